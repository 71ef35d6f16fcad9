//! Logical scenario detection: linear action-sequence patterns with
//! relational guards between an actor and a reference vehicle.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LaneTrack;
use crate::lane_frame::{RoadModel, Side};
use crate::segmentation::{Action, ActionKind, ActionTimeline, Channel};

/// Role name bound to the reference vehicle.
pub const EGO: &str = "ego";

/// Pairwise relations of `subject` with respect to `reference`, one entry per
/// shared sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTimeline {
    pub subject: String,
    pub reference: String,
    pub times: Vec<f64>,
    pub same_lane: Vec<bool>,
    /// Subject occupies the lane left of the reference's lane.
    pub adjacent_left: Vec<bool>,
    pub adjacent_right: Vec<bool>,
    pub ahead: Vec<bool>,
    /// Subject minus reference along the road-level s axis.
    pub gap_s: Vec<f64>,
}

impl RelationTimeline {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Nearest sample to `time`.
    pub fn index_at(&self, time: f64) -> Option<usize> {
        if self.times.is_empty() {
            return None;
        }
        let i = self.times.partition_point(|&t| t < time);
        Some(if i == 0 {
            0
        } else if i == self.times.len() || time - self.times[i - 1] <= self.times[i] - time {
            i - 1
        } else {
            i
        })
    }

    pub fn holds(&self, relation: &Relation, time: f64) -> bool {
        let Some(i) = self.index_at(time) else { return false };
        match *relation {
            Relation::SameLane => self.same_lane[i],
            Relation::NotSameLane => !self.same_lane[i],
            Relation::Adjacent => self.adjacent_left[i] || self.adjacent_right[i],
            Relation::AdjacentLeft => self.adjacent_left[i],
            Relation::AdjacentRight => self.adjacent_right[i],
            Relation::Ahead => self.ahead[i],
            Relation::Behind => self.gap_s[i] < 0.0,
            Relation::GapLessThan { value } => self.gap_s[i].abs() < value,
            Relation::GapGreaterThan { value } => self.gap_s[i].abs() > value,
        }
    }
}

fn relation_between(road: &RoadModel, subject: &LaneTrack, reference: &LaneTrack) -> Result<RelationTimeline> {
    if subject.len() != reference.len() {
        return Err(Error::InvalidRecording(format!(
            "`{}` and `{}` have {} and {} samples",
            subject.vehicle_id,
            reference.vehicle_id,
            subject.len(),
            reference.len()
        )));
    }
    let n = subject.len();
    let mut out = RelationTimeline {
        subject: subject.vehicle_id.clone(),
        reference: reference.vehicle_id.clone(),
        times: Vec::with_capacity(n),
        same_lane: Vec::with_capacity(n),
        adjacent_left: Vec::with_capacity(n),
        adjacent_right: Vec::with_capacity(n),
        ahead: Vec::with_capacity(n),
        gap_s: Vec::with_capacity(n),
    };
    for (a, b) in subject.samples.iter().zip(&reference.samples) {
        if (a.time - b.time).abs() > 1e-6 {
            return Err(Error::InvalidRecording(format!(
                "`{}` and `{}` do not share a time base ({} vs {})",
                subject.vehicle_id, reference.vehicle_id, a.time, b.time
            )));
        }
        let ref_lane = road.lane(b.lane_id);
        let side = |s: Side| ref_lane.and_then(|l| l.neighbor(s)) == Some(a.lane_id);
        let gap = a.road_s - b.road_s;
        out.times.push(b.time);
        out.same_lane.push(a.lane_id == b.lane_id);
        out.adjacent_left.push(side(Side::Left));
        out.adjacent_right.push(side(Side::Right));
        out.ahead.push(gap > 0.0);
        out.gap_s.push(gap);
    }
    Ok(out)
}

/// Relations of every other vehicle with respect to `ego_id`.
pub fn compute_relations(road: &RoadModel, tracks: &[LaneTrack], ego_id: &str) -> Result<Vec<RelationTimeline>> {
    let ego =
        tracks.iter().find(|t| t.vehicle_id == ego_id).ok_or_else(|| Error::UnknownVehicle(ego_id.to_string()))?;
    tracks.iter().filter(|t| t.vehicle_id != ego_id).map(|t| relation_between(road, t, ego)).collect()
}

/// Relations for every ordered pair of distinct vehicles.
pub fn compute_all_relations(road: &RoadModel, tracks: &[LaneTrack]) -> Result<Vec<RelationTimeline>> {
    let mut out = Vec::new();
    for s in tracks {
        for r in tracks {
            if s.vehicle_id != r.vehicle_id {
                out.push(relation_between(road, s, r)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "relation", rename_all = "snake_case")]
pub enum Relation {
    SameLane,
    NotSameLane,
    Adjacent,
    AdjacentLeft,
    AdjacentRight,
    Ahead,
    Behind,
    /// `|gap_s| < value`.
    GapLessThan {
        value: f64,
    },
    GapGreaterThan {
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum At {
    #[default]
    Start,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    #[serde(flatten)]
    pub relation: Relation,
    #[serde(default)]
    pub at: At,
}

impl Predicate {
    pub fn at_start(relation: Relation) -> Self {
        Self { relation, at: At::Start }
    }

    pub fn at_end(relation: Relation) -> Self {
        Self { relation, at: At::End }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindPattern {
    KeepVelocity,
    Accelerate,
    Decelerate,
    Standstill,
    KeepLane,
    LaneChangeLeft,
    LaneChangeRight,
    /// Either lane-change direction.
    LaneChange,
    Any,
}

impl KindPattern {
    pub fn matches(self, kind: ActionKind) -> bool {
        match self {
            KindPattern::Any => true,
            KindPattern::LaneChange => kind.is_lane_change(),
            KindPattern::KeepVelocity => kind == ActionKind::KeepVelocity,
            KindPattern::Accelerate => kind == ActionKind::Accelerate,
            KindPattern::Decelerate => kind == ActionKind::Decelerate,
            KindPattern::Standstill => kind == ActionKind::Standstill,
            KindPattern::KeepLane => kind == ActionKind::KeepLane,
            KindPattern::LaneChangeLeft => kind == ActionKind::LaneChangeLeft,
            KindPattern::LaneChangeRight => kind == ActionKind::LaneChangeRight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub actor: String,
    pub action_kind: KindPattern,
    #[serde(default)]
    pub relation_predicates: Vec<Predicate>,
    #[serde(default)]
    pub max_gap_to_next: f64,
}

/// Which vehicles the `ego` role may bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    Ego,
    AnyVehicle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub pattern_id: String,
    #[serde(default)]
    pub reference: Reference,
    pub steps: Vec<Step>,
}

impl Pattern {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPattern(self.pattern_id.clone(), m.to_string()));
        if self.pattern_id.is_empty() {
            return Err(Error::InvalidPattern(String::new(), "empty pattern_id".into()));
        }
        if self.steps.is_empty() {
            return bad("no steps");
        }
        for s in &self.steps {
            if s.actor.is_empty() {
                return bad("empty actor role");
            }
            if !(s.max_gap_to_next >= 0.0) || !s.max_gap_to_next.is_finite() {
                return bad("max_gap_to_next must be a non-negative number");
            }
            if s.actor == EGO && !s.relation_predicates.is_empty() {
                return bad("relations of the ego role with itself");
            }
            for p in &s.relation_predicates {
                if let Relation::GapLessThan { value } | Relation::GapGreaterThan { value } = p.relation {
                    if !(value >= 0.0) || !value.is_finite() {
                        return bad("gap threshold must be a non-negative number");
                    }
                }
            }
        }
        Ok(())
    }

    /// Roles other than `ego`, in first-use order.
    pub fn actor_roles(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for s in &self.steps {
            if s.actor != EGO && !seen.contains(&s.actor.as_str()) {
                seen.push(s.actor.as_str());
            }
        }
        seen
    }

    /// True when some step involves the reference vehicle.
    pub fn uses_reference(&self) -> bool {
        self.steps.iter().any(|s| s.actor == EGO || !s.relation_predicates.is_empty())
    }
}

pub const DEFAULT_CUT_IN_GAP: f64 = 50.0;
pub const DEFAULT_IMMEDIATE_GAP: f64 = 2.0;

fn cut_in_step(gap: f64, max_gap_to_next: f64) -> Step {
    Step {
        actor: "actor".into(),
        action_kind: KindPattern::LaneChange,
        relation_predicates: vec![
            Predicate::at_start(Relation::Adjacent),
            Predicate::at_end(Relation::SameLane),
            Predicate::at_end(Relation::Ahead),
            Predicate::at_end(Relation::GapLessThan { value: gap }),
        ],
        max_gap_to_next,
    }
}

pub fn builtin_patterns() -> Vec<Pattern> {
    builtin_patterns_with(DEFAULT_CUT_IN_GAP, DEFAULT_IMMEDIATE_GAP)
}

/// Built-ins with a custom cut-in proximity and "immediately after" window.
pub fn builtin_patterns_with(cut_in_gap: f64, immediate_gap: f64) -> Vec<Pattern> {
    vec![
        Pattern { pattern_id: "cut_in".into(), reference: Reference::Ego, steps: vec![cut_in_step(cut_in_gap, 0.0)] },
        Pattern {
            pattern_id: "cut_in_decelerate".into(),
            reference: Reference::Ego,
            steps: vec![
                cut_in_step(cut_in_gap, immediate_gap),
                Step {
                    actor: "actor".into(),
                    action_kind: KindPattern::Decelerate,
                    relation_predicates: vec![],
                    max_gap_to_next: 0.0,
                },
            ],
        },
        Pattern {
            pattern_id: "cut_out".into(),
            reference: Reference::Ego,
            steps: vec![Step {
                actor: "actor".into(),
                action_kind: KindPattern::LaneChange,
                relation_predicates: vec![
                    Predicate::at_start(Relation::SameLane),
                    Predicate::at_start(Relation::Ahead),
                    Predicate::at_end(Relation::NotSameLane),
                ],
                max_gap_to_next: 0.0,
            }],
        },
        Pattern {
            pattern_id: "overtake".into(),
            reference: Reference::AnyVehicle,
            steps: vec![Step {
                actor: "actor".into(),
                action_kind: KindPattern::KeepLane,
                relation_predicates: vec![
                    Predicate::at_start(Relation::Adjacent),
                    Predicate::at_start(Relation::Behind),
                    Predicate::at_end(Relation::Adjacent),
                    Predicate::at_end(Relation::Ahead),
                ],
                max_gap_to_next: 0.0,
            }],
        },
    ]
}

/// Patterns from JSON: a single pattern object or an array of them.
pub fn load_patterns(text: &str) -> Result<Vec<Pattern>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Many(Vec<Pattern>),
        One(Pattern),
    }
    let patterns = match serde_json::from_str::<Doc>(text)? {
        Doc::Many(v) => v,
        Doc::One(p) => vec![p],
    };
    for p in &patterns {
        p.validate()?;
    }
    Ok(patterns)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionRef {
    pub vehicle_id: String,
    pub channel: Channel,
    pub index: usize,
}

impl ActionRef {
    pub fn resolve<'a>(&self, timelines: &'a [ActionTimeline]) -> Result<&'a Action> {
        timelines
            .iter()
            .find(|t| t.vehicle_id == self.vehicle_id)
            .and_then(|t| t.channel(self.channel).get(self.index))
            .ok_or_else(|| {
                Error::UnresolvedAction(format!("{} {} #{}", self.vehicle_id, self.channel.as_str(), self.index))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInstance {
    pub pattern_id: String,
    pub actors: BTreeMap<String, String>,
    pub t_start: f64,
    pub t_end: f64,
    pub matched_actions: Vec<ActionRef>,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

impl ScenarioInstance {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// An action with its reference, in matching order.
struct Candidate<'a> {
    r: ActionRef,
    action: &'a Action,
}

fn ordered_actions(tl: &ActionTimeline) -> Vec<Candidate<'_>> {
    let mut out: Vec<Candidate> = [Channel::Longitudinal, Channel::Lateral]
        .into_iter()
        .flat_map(|ch| {
            tl.channel(ch).iter().enumerate().map(move |(index, action)| Candidate {
                r: ActionRef { vehicle_id: tl.vehicle_id.clone(), channel: ch, index },
                action,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.action
            .t_start
            .total_cmp(&b.action.t_start)
            .then(a.r.channel.cmp(&b.r.channel))
            .then(a.r.index.cmp(&b.r.index))
    });
    out
}

/// True when `action` meets the step's kind and relational guards.
pub fn step_accepts(step: &Step, action: &Action, relation: Option<&RelationTimeline>) -> bool {
    if !step.action_kind.matches(action.kind) {
        return false;
    }
    step.relation_predicates.iter().all(|p| {
        let time = match p.at {
            At::Start => action.t_start,
            At::End => action.t_end(),
        };
        relation.is_some_and(|r| r.holds(&p.relation, time))
    })
}

/// True when `next` may follow `prev` in a sequence.
pub fn follows(prev: &Action, gap: f64, next: &Action) -> bool {
    next.t_start >= prev.t_start && next.t_start <= prev.t_end() + gap
}

struct Binding<'a> {
    actors: BTreeMap<String, String>,
    reference: Option<&'a str>,
}

fn bindings<'a>(p: &Pattern, vehicles: &'a [String], ego_id: Option<&'a str>) -> Vec<Binding<'a>> {
    let refs: Vec<Option<&str>> = if !p.uses_reference() {
        vec![None]
    } else {
        match p.reference {
            Reference::Ego => ego_id.filter(|e| vehicles.iter().any(|v| v == e)).map(Some).into_iter().collect(),
            Reference::AnyVehicle => vehicles.iter().map(|v| Some(v.as_str())).collect(),
        }
    };
    let roles = p.actor_roles();
    let mut out = Vec::new();
    for r in refs {
        let pool: Vec<&String> = vehicles.iter().filter(|v| Some(v.as_str()) != r).collect();
        let mut assign: Vec<usize> = Vec::new();
        // injective assignments of roles to pool vehicles
        fn rec<'b>(
            k: usize,
            roles: &[&str],
            pool: &[&'b String],
            assign: &mut Vec<usize>,
            r: Option<&'b str>,
            out: &mut Vec<Binding<'b>>,
        ) {
            if k == roles.len() {
                let mut actors: BTreeMap<String, String> =
                    roles.iter().zip(assign.iter()).map(|(role, &i)| (role.to_string(), pool[i].clone())).collect();
                if let Some(e) = r {
                    actors.insert(EGO.to_string(), e.to_string());
                }
                out.push(Binding { actors, reference: r });
                return;
            }
            for i in 0..pool.len() {
                if !assign.contains(&i) {
                    assign.push(i);
                    rec(k + 1, roles, pool, assign, r, out);
                    assign.pop();
                }
            }
        }
        rec(0, &roles, &pool, &mut assign, r, &mut out);
    }
    out
}

/// Depth-first search for the earliest completion starting from `first`.
fn extend(p: &Pattern, per_step: &[Vec<usize>], pool: &[Candidate<'_>], chosen: &mut Vec<usize>) -> bool {
    let k = chosen.len();
    if k == p.steps.len() {
        return true;
    }
    let prev = pool[chosen[k - 1]].action;
    let gap = p.steps[k - 1].max_gap_to_next;
    for &c in &per_step[k] {
        if chosen.contains(&c) || !follows(prev, gap, pool[c].action) {
            continue;
        }
        chosen.push(c);
        if extend(p, per_step, pool, chosen) {
            return true;
        }
        chosen.pop();
    }
    false
}

fn overlap_ratio(a: &ScenarioInstance, b: &ScenarioInstance) -> f64 {
    let inter = a.t_end.min(b.t_end) - a.t_start.max(b.t_start);
    let shorter = a.duration().min(b.duration());
    if inter < 0.0 {
        0.0
    } else if shorter <= 0.0 {
        1.0
    } else {
        inter / shorter
    }
}

/// Drop instances that share actors with an earlier kept instance of the same
/// pattern and overlap it by at least half of the shorter duration.
pub fn deduplicate(mut found: Vec<ScenarioInstance>) -> Vec<ScenarioInstance> {
    found.sort_by(|a, b| {
        a.t_start
            .total_cmp(&b.t_start)
            .then(a.t_end.total_cmp(&b.t_end))
            .then_with(|| a.actors.cmp(&b.actors))
            .then_with(|| a.matched_actions.cmp(&b.matched_actions))
    });
    let mut kept: Vec<ScenarioInstance> = Vec::new();
    for inst in found {
        let dup = kept
            .iter()
            .any(|k| k.pattern_id == inst.pattern_id && k.actors == inst.actors && overlap_ratio(k, &inst) >= 0.5);
        if !dup {
            kept.push(inst);
        }
    }
    kept
}

/// Build an instance from matched actions.
pub fn make_instance(
    p: &Pattern,
    actors: BTreeMap<String, String>,
    matched: Vec<(ActionRef, &Action)>,
) -> ScenarioInstance {
    let t_start = matched.iter().map(|(_, a)| a.t_start).fold(f64::INFINITY, f64::min);
    let t_end = matched.iter().map(|(_, a)| a.t_end()).fold(f64::NEG_INFINITY, f64::max);
    ScenarioInstance {
        pattern_id: p.pattern_id.clone(),
        actors,
        t_start,
        t_end,
        matched_actions: matched.into_iter().map(|(r, _)| r).collect(),
        parameters: BTreeMap::new(),
    }
}

/// All deduplicated matches of `p`. `ego_id` names the reference vehicle for
/// patterns with [`Reference::Ego`].
pub fn match_pattern(
    p: &Pattern,
    timelines: &[ActionTimeline],
    relations: &[RelationTimeline],
    ego_id: Option<&str>,
) -> Result<Vec<ScenarioInstance>> {
    p.validate()?;
    let vehicles: Vec<String> = timelines.iter().map(|t| t.vehicle_id.clone()).collect();
    let by_vehicle: BTreeMap<&str, &ActionTimeline> = timelines.iter().map(|t| (t.vehicle_id.as_str(), t)).collect();
    let relation = |s: &str, r: &str| relations.iter().find(|x| x.subject == s && x.reference == r);

    let mut found = Vec::new();
    for b in bindings(p, &vehicles, ego_id) {
        // every step draws from one merged, time-ordered pool
        let mut pool: Vec<Candidate> = Vec::new();
        let mut involved: BTreeSet<&str> = BTreeSet::new();
        for s in &p.steps {
            let v = if s.actor == EGO { b.reference.unwrap_or_default() } else { b.actors[&s.actor].as_str() };
            involved.insert(v);
        }
        for v in &involved {
            if let Some(tl) = by_vehicle.get(v) {
                pool.extend(ordered_actions(tl));
            }
        }
        pool.sort_by(|a, c| {
            a.action
                .t_start
                .total_cmp(&c.action.t_start)
                .then(a.r.channel.cmp(&c.r.channel))
                .then(a.r.index.cmp(&c.r.index))
                .then_with(|| a.r.vehicle_id.cmp(&c.r.vehicle_id))
        });

        let per_step: Vec<Vec<usize>> = p
            .steps
            .iter()
            .map(|s| {
                let v = if s.actor == EGO { b.reference.unwrap_or_default() } else { b.actors[&s.actor].as_str() };
                let rel = b.reference.and_then(|r| relation(v, r));
                (0..pool.len()).filter(|&i| pool[i].r.vehicle_id == v && step_accepts(s, pool[i].action, rel)).collect()
            })
            .collect();

        for &first in &per_step[0] {
            let mut chosen = vec![first];
            if extend(p, &per_step, &pool, &mut chosen) {
                let matched = chosen.iter().map(|&i| (pool[i].r.clone(), pool[i].action)).collect();
                found.push(make_instance(p, b.actors.clone(), matched));
            }
        }
    }
    Ok(deduplicate(found))
}

/// Match every pattern; instances are grouped by pattern in input order.
pub fn detect(
    patterns: &[Pattern],
    timelines: &[ActionTimeline],
    relations: &[RelationTimeline],
    ego_id: Option<&str>,
) -> Result<Vec<ScenarioInstance>> {
    let mut out = Vec::new();
    for p in patterns {
        out.extend(match_pattern(p, timelines, relations, ego_id)?);
    }
    Ok(out)
}

//! Quantitative abstraction: one polynomial model per action, fitted to the
//! speed signal on the longitudinal channel and to the lateral offset on the
//! lateral channel, plus closed-form re-simulation from the fits.

mod lsq;
mod poly;

pub use lsq::{fit_constrained, LinearConstraint, LsqSolution};
pub use poly::{eval_poly, integrate_poly, PolyCoeffs, MAX_DEGREE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LaneTrack, Role, TrackSample};
use crate::lane_frame::{CrossingEvent, LaneId, RoadModel, Side};
use crate::segmentation::{qualitative_abstraction, Action, ActionKind, ActionTimeline, Channel, SegmentationConfig};

/// Relative tolerance for equality constraints on stored coefficients.
pub const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    SVelocity,
    TOffset,
}

impl Signal {
    pub fn of(channel: Channel) -> Self {
        match channel {
            Channel::Longitudinal => Signal::SVelocity,
            Channel::Lateral => Signal::TOffset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    IntegralEquals,
    ValueAtStart,
    ValueAtEnd,
    SlopeAtStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub kind: ConstraintKind,
    pub segment: usize,
    pub target: f64,
    pub achieved: f64,
}

impl ConstraintRecord {
    pub fn satisfied(&self) -> bool {
        (self.achieved - self.target).abs() <= CONSTRAINT_TOL * self.target.abs().max(1.0)
    }
}

/// Fit bookkeeping. Not transmitted in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub constraints_applied: Vec<ConstraintRecord>,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedAction {
    pub action: Action,
    pub channel_signal: Signal,
    /// Two segments for lane changes (before and after the crossing), one otherwise.
    pub segments: Vec<PolyCoeffs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
}

impl FittedAction {
    /// Value of the last segment at its end.
    pub fn end_value(&self) -> f64 {
        self.segments.last().map_or(0.0, |p| p.eval(1.0))
    }

    /// Physical-unit slope of the last segment at its end.
    pub fn end_slope(&self) -> f64 {
        self.segments.last().map_or(0.0, |p| p.derivative(1.0) / p.duration)
    }

    /// Segment index, normalized time and lane frame at absolute time `time`.
    pub fn locate(&self, time: f64) -> (usize, f64, LaneId) {
        let a = &self.action;
        let spans = segment_spans(a);
        let idx = match a.crossing_time {
            Some(c) if time >= c && self.segments.len() > 1 => 1,
            _ => 0,
        };
        let (start, dur) = spans[idx.min(spans.len() - 1)];
        let x = if dur > 0.0 { ((time - start) / dur).clamp(0.0, 1.0) } else { 0.0 };
        let lane = if idx == 1 { a.lane_after } else { a.lane_before };
        (idx, x, lane)
    }
}

/// `(start, duration)` of each fit segment of an action. Lane changes split at
/// the crossing time.
pub fn segment_spans(action: &Action) -> Vec<(f64, f64)> {
    match action.crossing_time {
        Some(c) if action.kind.is_lane_change() => {
            vec![(action.t_start, c - action.t_start), (c, action.t_end() - c)]
        }
        _ => vec![(action.t_start, action.duration)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub s: f64,
    pub t: f64,
    pub lane: LaneId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractedTrack {
    pub vehicle_id: String,
    pub role: Role,
    pub timeline: ActionTimeline,
    /// Longitudinal fits in time order, then lateral fits in time order.
    pub fitted: Vec<FittedAction>,
    pub initial_state: InitialState,
}

impl AbstractedTrack {
    pub fn fitted_channel(&self, channel: Channel) -> impl Iterator<Item = &FittedAction> {
        self.fitted.iter().filter(move |f| f.action.channel() == channel)
    }

    pub fn span(&self) -> (f64, f64) {
        self.timeline.span
    }

    /// Rebuild the timeline from the fitted actions.
    pub fn timeline_from_fits(vehicle_id: &str, fitted: &[FittedAction]) -> Result<ActionTimeline> {
        let pick = |c: Channel| {
            fitted.iter().filter(|f| f.action.channel() == c).map(|f| f.action.clone()).collect::<Vec<_>>()
        };
        let longitudinal = pick(Channel::Longitudinal);
        let lateral = pick(Channel::Lateral);
        let (Some(first), Some(last)) = (longitudinal.first(), longitudinal.last()) else {
            return Err(Error::Invariant(format!("{vehicle_id}: no longitudinal fits")));
        };
        let span = (first.t_start, last.t_end());
        let timeline = ActionTimeline { vehicle_id: vehicle_id.to_string(), longitudinal, lateral, span };
        timeline.check_tiling()?;
        Ok(timeline)
    }

    /// One fit per timeline action with the right segment count.
    pub fn check(&self) -> Result<()> {
        self.timeline.check_tiling()?;
        let expected: Vec<&Action> = self.timeline.longitudinal.iter().chain(&self.timeline.lateral).collect();
        if expected.len() != self.fitted.len() {
            return Err(Error::Invariant(format!(
                "{}: {} fits for {} actions",
                self.vehicle_id,
                self.fitted.len(),
                expected.len()
            )));
        }
        for (a, f) in expected.into_iter().zip(&self.fitted) {
            if a != &f.action {
                return Err(Error::Invariant(format!("{}: fit does not match its action", self.vehicle_id)));
            }
            let want = if a.kind.is_lane_change() { 2 } else { 1 };
            if f.segments.len() != want || f.channel_signal != Signal::of(a.channel()) {
                return Err(Error::Invariant(format!("{}: malformed fit for {:?}", self.vehicle_id, a.kind)));
            }
            if f.segments.iter().any(|p| !p.is_finite() || p.a.is_empty() || p.a.len() > MAX_DEGREE + 1) {
                return Err(Error::Invariant(format!("{}: invalid coefficients", self.vehicle_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Also match the first derivative at chained boundaries.
    pub c1_continuity: bool,
}

/// A single least-squares problem as handed to the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub degree: usize,
    pub constraints: Vec<LinearConstraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracedFit {
    pub channel: Channel,
    pub action_index: usize,
    pub segment: usize,
    pub problem: FitProblem,
    pub coeffs: Vec<f64>,
}

pub fn abstract_track(track: &LaneTrack, timeline: &ActionTimeline) -> Result<AbstractedTrack> {
    abstract_track_with(track, timeline, &FitOptions::default())
}

pub fn abstract_track_with(track: &LaneTrack, timeline: &ActionTimeline, opts: &FitOptions) -> Result<AbstractedTrack> {
    Fitter { track, opts, trace: None }.run(timeline)
}

/// Like [`abstract_track_with`], also returning every solver problem.
pub fn abstract_track_traced(
    track: &LaneTrack,
    timeline: &ActionTimeline,
    opts: &FitOptions,
) -> Result<(AbstractedTrack, Vec<TracedFit>)> {
    let mut trace = Vec::new();
    let at = Fitter { track, opts, trace: Some(&mut trace) }.run(timeline)?;
    Ok((at, trace))
}

/// Segment and fit every track in parallel.
pub fn abstract_tracks(
    tracks: &[LaneTrack],
    cfg: &SegmentationConfig,
    opts: &FitOptions,
) -> Result<Vec<AbstractedTrack>> {
    tracks
        .par_iter()
        .map(|tr| {
            let tl = qualitative_abstraction(tr, cfg)?;
            abstract_track_with(tr, &tl, opts)
        })
        .collect()
}

struct Pin {
    value: f64,
    slope: f64,
}

struct Segment<'s> {
    start: f64,
    duration: f64,
    samples: Vec<&'s TrackSample>,
}

struct Fitter<'a, 't> {
    track: &'a LaneTrack,
    opts: &'a FitOptions,
    trace: Option<&'t mut Vec<TracedFit>>,
}

const TIME_EPS: f64 = 1e-9;

impl<'a> Fitter<'a, '_> {
    fn run(mut self, timeline: &ActionTimeline) -> Result<AbstractedTrack> {
        let track = self.track;
        let first = track.samples.first().ok_or_else(|| Error::EmptyTrack(track.vehicle_id.clone()))?;
        let progress = track.progress();
        let mut fitted = Vec::with_capacity(timeline.longitudinal.len() + timeline.lateral.len());

        for channel in [Channel::Longitudinal, Channel::Lateral] {
            let mut prev: Option<Pin> = None;
            for (index, action) in timeline.channel(channel).iter().enumerate() {
                let wrap = |e: Error| Error::ActionFit {
                    vehicle_id: track.vehicle_id.clone(),
                    channel: channel.as_str().to_string(),
                    index,
                    source: Box::new(e),
                };
                let fa = match channel {
                    Channel::Longitudinal => self.fit_longitudinal(index, action, &progress, prev.as_ref()),
                    Channel::Lateral => self.fit_lateral(index, action, prev.as_ref()),
                }
                .map_err(wrap)?;
                prev = Some(Pin { value: fa.end_value(), slope: fa.end_slope() });
                fitted.push(fa);
            }
        }

        Ok(AbstractedTrack {
            vehicle_id: track.vehicle_id.clone(),
            role: track.role,
            timeline: timeline.clone(),
            fitted,
            initial_state: InitialState { s: first.s, t: first.t, lane: first.lane_id },
        })
    }

    fn samples_in(&self, lo: f64, hi: f64, hi_inclusive: bool, lane: Option<LaneId>) -> Vec<&'a TrackSample> {
        self.track
            .samples
            .iter()
            .filter(|s| {
                s.time >= lo - TIME_EPS
                    && (if hi_inclusive { s.time <= hi + TIME_EPS } else { s.time < hi - TIME_EPS })
                    && lane.is_none_or(|l| s.lane_id == l)
            })
            .collect()
    }

    fn index_at(&self, time: f64) -> usize {
        let s = &self.track.samples;
        let i = s.partition_point(|p| p.time < time);
        if i == 0 {
            0
        } else if i >= s.len() || (time - s[i - 1].time) < (s[i].time - time) {
            (i - 1).min(s.len() - 1)
        } else {
            i
        }
    }

    fn fit_longitudinal(
        &mut self,
        index: usize,
        action: &Action,
        progress: &[f64],
        prev: Option<&Pin>,
    ) -> Result<FittedAction> {
        let seg = Segment {
            start: action.t_start,
            duration: action.duration,
            samples: self.samples_in(action.t_start, action.t_end(), true, None),
        };
        let ds = progress[self.index_at(action.t_end())] - progress[self.index_at(action.t_start)];
        let (poly, records, sq, n) =
            self.fit_segment(Channel::Longitudinal, index, 0, &seg, Some(ds), prev, |s| s.speed)?;
        Ok(FittedAction {
            action: action.clone(),
            channel_signal: Signal::SVelocity,
            segments: vec![poly],
            diagnostics: Some(FitDiagnostics { constraints_applied: records, rms_residual: rms(sq, n) }),
        })
    }

    fn fit_lateral(&mut self, index: usize, action: &Action, prev: Option<&Pin>) -> Result<FittedAction> {
        let spans = segment_spans(action);
        let mut segments = Vec::with_capacity(spans.len());
        let mut records = Vec::new();
        let (mut sq, mut n) = (0.0, 0usize);
        for (k, &(start, duration)) in spans.iter().enumerate() {
            let (lane, pin, hi_inclusive) = if spans.len() == 2 {
                if k == 0 {
                    (action.lane_before, prev, false)
                } else {
                    // New lane frame: the offset jumps, nothing to chain to.
                    (action.lane_after, None, true)
                }
            } else {
                (action.lane_before, prev, true)
            };
            let seg = Segment {
                start,
                duration,
                samples: self.samples_in(start, start + duration, hi_inclusive, Some(lane)),
            };
            let (poly, mut recs, s2, m) = self.fit_segment(Channel::Lateral, index, k, &seg, None, pin, |s| s.t)?;
            segments.push(poly);
            records.append(&mut recs);
            sq += s2;
            n += m;
        }
        Ok(FittedAction {
            action: action.clone(),
            channel_signal: Signal::TOffset,
            segments,
            diagnostics: Some(FitDiagnostics { constraints_applied: records, rms_residual: rms(sq, n) }),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn fit_segment(
        &mut self,
        channel: Channel,
        action_index: usize,
        segment: usize,
        seg: &Segment<'_>,
        integral: Option<f64>,
        pin: Option<&Pin>,
        signal: impl Fn(&TrackSample) -> f64,
    ) -> Result<(PolyCoeffs, Vec<ConstraintRecord>, f64, usize)> {
        if !(seg.duration > 0.0) {
            return Err(Error::Fit(format!("non-positive segment duration {}", seg.duration)));
        }
        let xs: Vec<f64> = seg.samples.iter().map(|s| ((s.time - seg.start) / seg.duration).clamp(0.0, 1.0)).collect();
        let ys: Vec<f64> = seg.samples.iter().map(|s| signal(s)).collect();

        let build = |degree: usize| {
            let mut kinds = Vec::new();
            let mut rows = Vec::new();
            if let Some(ds) = integral {
                kinds.push(ConstraintKind::IntegralEquals);
                rows.push(LinearConstraint::integral(degree, 0.0, 1.0, seg.duration, ds));
            }
            if let Some(p) = pin {
                kinds.push(ConstraintKind::ValueAtStart);
                rows.push(LinearConstraint::value_at(degree, 0.0, p.value));
                if self.opts.c1_continuity && degree >= 1 && rows.len() < degree + 1 {
                    kinds.push(ConstraintKind::SlopeAtStart);
                    rows.push(LinearConstraint::slope_at(degree, 0.0, 1.0 / seg.duration, p.slope));
                }
            }
            (kinds, rows)
        };

        let m = integral.is_some() as usize + pin.is_some() as usize;
        let floor = m.saturating_sub(1);
        let start = xs.len().saturating_sub(1).max(1).max(floor).min(MAX_DEGREE);
        let mut last_err = None;
        for degree in (floor..=start).rev() {
            let (kinds, rows) = build(degree);
            match fit_constrained(&xs, &ys, degree, &rows) {
                Ok(sol) => {
                    let records: Vec<ConstraintRecord> = kinds
                        .iter()
                        .zip(&rows)
                        .map(|(&kind, r)| ConstraintRecord {
                            kind,
                            segment,
                            target: r.target,
                            achieved: r.achieved(&sol.coeffs),
                        })
                        .collect();
                    if let Some(bad) = records.iter().find(|r| !r.satisfied()) {
                        last_err = Some(Error::Fit(format!(
                            "{:?} constraint missed: target {} achieved {}",
                            bad.kind, bad.target, bad.achieved
                        )));
                        continue;
                    }
                    let sq = sol.rms_residual.powi(2) * xs.len() as f64;
                    if let Some(trace) = self.trace.as_deref_mut() {
                        trace.push(TracedFit {
                            channel,
                            action_index,
                            segment,
                            problem: FitProblem { xs: xs.clone(), ys: ys.clone(), degree, constraints: rows.clone() },
                            coeffs: sol.coeffs.clone(),
                        });
                    }
                    return Ok((PolyCoeffs::new(sol.coeffs, seg.duration), records, sq, xs.len()));
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Fit("no admissible degree".into())))
    }
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sum_sq / n as f64).sqrt()
    }
}

/// Re-simulated state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResimState {
    pub time: f64,
    /// Distance axis continued from the initial s.
    pub s: f64,
    pub t: f64,
    pub lane_id: LaneId,
    pub speed: f64,
}

/// Closed-form evaluation of an abstracted track at arbitrary times.
pub struct Resimulator<'a> {
    track: &'a AbstractedTrack,
    longitudinal: Vec<&'a FittedAction>,
    lateral: Vec<&'a FittedAction>,
    /// Distance covered before each longitudinal action.
    prefix: Vec<f64>,
}

impl<'a> Resimulator<'a> {
    pub fn new(track: &'a AbstractedTrack) -> Self {
        let longitudinal: Vec<_> = track.fitted_channel(Channel::Longitudinal).collect();
        let lateral: Vec<_> = track.fitted_channel(Channel::Lateral).collect();
        let mut prefix = Vec::with_capacity(longitudinal.len());
        let mut acc = 0.0;
        for f in &longitudinal {
            prefix.push(acc);
            acc += f.segments[0].integrate(0.0, 1.0);
        }
        Self { track, longitudinal, lateral, prefix }
    }

    pub fn span(&self) -> (f64, f64) {
        self.track.span()
    }

    fn find(actions: &[&FittedAction], time: f64) -> usize {
        actions.partition_point(|f| f.action.t_start <= time).saturating_sub(1).min(actions.len().saturating_sub(1))
    }

    /// State at `time`, clamped to the track span.
    pub fn state_at(&self, time: f64) -> ResimState {
        let (t0, t1) = self.span();
        let time = time.clamp(t0, t1);
        let init = self.track.initial_state;

        let (s, speed) = if self.longitudinal.is_empty() {
            (init.s, 0.0)
        } else {
            let k = Self::find(&self.longitudinal, time);
            let f = self.longitudinal[k];
            let (_, x, _) = f.locate(time);
            let p = &f.segments[0];
            (init.s + self.prefix[k] + p.integrate(0.0, x), p.eval(x))
        };

        let (t, lane_id) = if self.lateral.is_empty() {
            (init.t, init.lane)
        } else {
            let f = self.lateral[Self::find(&self.lateral, time)];
            let (seg, x, lane) = f.locate(time);
            (f.segments[seg].eval(x), lane)
        };

        ResimState { time, s, t, lane_id, speed }
    }
}

/// `t0, t0 + dt, …` up to `t1`, always ending exactly at `t1`.
pub fn sample_times(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    assert!(dt > 0.0, "sampling interval must be positive");
    let n = ((t1 - t0) / dt + 1e-9).floor().max(0.0) as usize;
    let mut out: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * dt).collect();
    match out.last_mut() {
        Some(last) if (t1 - *last).abs() <= 1e-9 * dt.max(1.0) => *last = t1,
        _ => out.push(t1),
    }
    out
}

/// Re-simulate a lane track at interval `dt`. `road_s` mirrors `s`; see
/// [`attach_road_axis`] for the road-level axis.
pub fn reconstruct(at: &AbstractedTrack, dt: f64) -> LaneTrack {
    let sim = Resimulator::new(at);
    let (t0, t1) = sim.span();
    let samples: Vec<TrackSample> = sample_times(t0, t1, dt)
        .into_iter()
        .map(|time| {
            let st = sim.state_at(time);
            TrackSample { time, s: st.s, t: st.t, lane_id: st.lane_id, speed: st.speed, road_s: st.s }
        })
        .collect();
    let crossings = at
        .fitted_channel(Channel::Lateral)
        .filter_map(|f| {
            let a = &f.action;
            let c = a.crossing_time.filter(|_| a.kind.is_lane_change())?;
            let direction = if a.kind == ActionKind::LaneChangeLeft { Side::Left } else { Side::Right };
            Some(CrossingEvent {
                time: c,
                sample_index: samples.partition_point(|s| s.time < c),
                from_lane: a.lane_before,
                to_lane: a.lane_after,
                direction,
            })
        })
        .collect();
    LaneTrack { vehicle_id: at.vehicle_id.clone(), role: at.role, samples, crossings }
}

/// Replace `road_s` with the road-level axis computed from each pose.
pub fn attach_road_axis(track: &mut LaneTrack, road: &RoadModel) -> Result<()> {
    for s in &mut track.samples {
        s.road_s = road.road_s_of_pose(s.pose())?;
    }
    Ok(())
}

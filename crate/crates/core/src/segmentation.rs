//! Qualitative abstraction: every vehicle gets exactly one longitudinal and
//! one lateral action at any instant.
//!
//! The two channels are segmented independently and their boundaries need
//! not coincide. Each channel's actions tile the track span: boundaries are
//! sample times, and every action's duration is chosen so that
//! `t_start + duration` reproduces the next boundary bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LaneTrack;
use crate::lane_frame::{CrossingEvent, LaneId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Longitudinal,
    Lateral,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Longitudinal => "longitudinal",
            Channel::Lateral => "lateral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    KeepVelocity,
    Accelerate,
    Decelerate,
    Standstill,
    KeepLane,
    LaneChangeLeft,
    LaneChangeRight,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::KeepVelocity,
        ActionKind::Accelerate,
        ActionKind::Decelerate,
        ActionKind::Standstill,
        ActionKind::KeepLane,
        ActionKind::LaneChangeLeft,
        ActionKind::LaneChangeRight,
    ];

    pub fn channel(self) -> Channel {
        match self {
            ActionKind::KeepVelocity | ActionKind::Accelerate | ActionKind::Decelerate | ActionKind::Standstill => {
                Channel::Longitudinal
            }
            ActionKind::KeepLane | ActionKind::LaneChangeLeft | ActionKind::LaneChangeRight => Channel::Lateral,
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, ActionKind::LaneChangeLeft | ActionKind::LaneChangeRight)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::KeepVelocity => "keep_velocity",
            ActionKind::Accelerate => "accelerate",
            ActionKind::Decelerate => "decelerate",
            ActionKind::Standstill => "standstill",
            ActionKind::KeepLane => "keep_lane",
            ActionKind::LaneChangeLeft => "lane_change_left",
            ActionKind::LaneChangeRight => "lane_change_right",
        }
    }
}

/// One qualitative abstraction unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub vehicle_id: String,
    pub kind: ActionKind,
    pub t_start: f64,
    pub duration: f64,
    pub lane_before: LaneId,
    pub lane_after: LaneId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossing_time: Option<f64>,
}

impl Action {
    pub fn channel(&self) -> Channel {
        self.kind.channel()
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.duration
    }

    /// Check the per-action invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invariant(format!("{} {:?}: {msg}", self.vehicle_id, self.kind)));
        if !(self.duration >= 0.0) || !self.t_start.is_finite() || !self.duration.is_finite() {
            return bad(format!("invalid span start={} duration={}", self.t_start, self.duration));
        }
        if self.kind.is_lane_change() {
            let Some(c) = self.crossing_time else { return bad("lane change without crossing time".into()) };
            if !(c > self.t_start && c < self.t_end()) {
                return bad(format!("crossing {c} outside ({}, {})", self.t_start, self.t_end()));
            }
            if self.lane_before == self.lane_after {
                return bad("lane change keeps its lane".into());
            }
        } else if self.crossing_time.is_some() {
            return bad("crossing time on a non-lane-change action".into());
        }
        Ok(())
    }
}

/// Smallest-magnitude adjustment of `end - start` such that
/// `start + duration == end` holds exactly in floating point.
pub fn exact_span(start: f64, end: f64) -> f64 {
    let mut d = end - start;
    for _ in 0..64 {
        let e = start + d;
        if e == end {
            break;
        }
        d = if e < end { d.next_up() } else { d.next_down() };
    }
    d
}

/// Lay actions end to end from `start`, aiming each boundary at the next
/// action's current start and the last end at `end`. Returns the end reached.
fn chain(actions: &mut [Action], start: f64, end: f64) -> f64 {
    let mut b = start;
    for i in 0..actions.len() {
        let target = actions.get(i + 1).map_or(end, |n| n.t_start);
        actions[i].t_start = b;
        actions[i].duration = exact_span(b, target);
        b += actions[i].duration;
    }
    b
}

/// Rewrite starts and durations so that both channels tile one span exactly
/// in floating point. Some end values cannot be written as `start + d` for a
/// given start; the last inner boundary of one channel then moves by a few
/// ulps until the shared end is reachable.
pub fn retile(tl: &mut ActionTimeline) -> Result<()> {
    let (start, end) = tl.span;
    if tl.longitudinal.is_empty() || tl.lateral.is_empty() {
        return Err(Error::Invariant(format!("{}: empty channel", tl.vehicle_id)));
    }
    let lateral_first = tl.lateral.len() == 1 && tl.longitudinal.len() > 1;
    let (primary, secondary) =
        if lateral_first { (&mut tl.lateral, &mut tl.longitudinal) } else { (&mut tl.longitudinal, &mut tl.lateral) };
    let e = chain(primary, start, end);
    if chain(secondary, start, e) != e {
        if secondary.len() == 1 {
            secondary[0].duration = primary[0].duration;
        } else {
            let k = secondary.len() - 1;
            let before = secondary[k - 1].t_start;
            let boundary = secondary[k].t_start;
            let mut fixed = false;
            'search: for j in 1..=32 {
                for up in [true, false] {
                    let mut b = boundary;
                    for _ in 0..j {
                        b = if up { b.next_up() } else { b.next_down() };
                    }
                    let d_prev = exact_span(before, b);
                    let d_last = exact_span(b, e);
                    if before + d_prev == b && b + d_last == e {
                        secondary[k - 1].duration = d_prev;
                        secondary[k].t_start = b;
                        secondary[k].duration = d_last;
                        fixed = true;
                        break 'search;
                    }
                }
            }
            if !fixed {
                return Err(Error::Invariant(format!("{}: cannot tile [{start}, {e}] exactly", tl.vehicle_id)));
            }
        }
    }
    tl.span.1 = e;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTimeline {
    pub vehicle_id: String,
    pub longitudinal: Vec<Action>,
    pub lateral: Vec<Action>,
    pub span: (f64, f64),
}

impl ActionTimeline {
    pub fn channel(&self, channel: Channel) -> &[Action] {
        match channel {
            Channel::Longitudinal => &self.longitudinal,
            Channel::Lateral => &self.lateral,
        }
    }

    /// The action of `channel` containing `time`. Actions are half-open except
    /// the last one, which also contains the span end.
    pub fn action_at(&self, channel: Channel, time: f64) -> Option<(usize, &Action)> {
        let actions = self.channel(channel);
        if actions.is_empty() || time < self.span.0 || time > self.span.1 {
            return None;
        }
        let idx = actions.partition_point(|a| a.t_start <= time).checked_sub(1)?;
        let a = &actions[idx];
        if time < a.t_end() || idx + 1 == actions.len() {
            Some((idx, a))
        } else {
            None
        }
    }

    pub fn all_actions(&self) -> impl Iterator<Item = &Action> {
        self.longitudinal.iter().chain(&self.lateral)
    }

    /// Verify that both channels tile `span` exactly and that every action
    /// satisfies its own invariants.
    pub fn check_tiling(&self) -> Result<()> {
        for channel in [Channel::Longitudinal, Channel::Lateral] {
            let actions = self.channel(channel);
            let (first, last) = match (actions.first(), actions.last()) {
                (Some(f), Some(l)) => (f, l),
                _ => return Err(Error::Invariant(format!("{}: empty {} channel", self.vehicle_id, channel.as_str()))),
            };
            if first.t_start != self.span.0 || last.t_end() != self.span.1 {
                return Err(Error::Invariant(format!(
                    "{}: {} actions cover [{}, {}] instead of [{}, {}]",
                    self.vehicle_id,
                    channel.as_str(),
                    first.t_start,
                    last.t_end(),
                    self.span.0,
                    self.span.1
                )));
            }
            for a in actions {
                a.validate()?;
                if a.channel() != channel {
                    return Err(Error::Invariant(format!("{:?} in {} channel", a.kind, channel.as_str())));
                }
                if actions.len() > 1 && !(a.duration > 0.0) {
                    return Err(Error::Invariant(format!("{}: zero-length {:?}", self.vehicle_id, a.kind)));
                }
            }
            for w in actions.windows(2) {
                if w[0].t_end() != w[1].t_start {
                    return Err(Error::Invariant(format!(
                        "{}: gap or overlap between {} and {}",
                        self.vehicle_id,
                        w[0].t_end(),
                        w[1].t_start
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// m/s²
    pub accel_threshold: f64,
    /// m/s
    pub standstill_speed: f64,
    /// s
    pub min_action_duration: f64,
    /// m/s
    pub lane_change_lat_rate: f64,
    pub hysteresis_fraction: f64,
    /// Width of the centered moving average applied to acceleration, s.
    pub accel_smoothing_window: f64,
    /// Width of the centered moving average applied to the lateral rate, s.
    /// Zero disables smoothing.
    pub lateral_smoothing_window: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            accel_threshold: 0.2,
            standstill_speed: 0.3,
            min_action_duration: 1.0,
            lane_change_lat_rate: 0.15,
            hysteresis_fraction: 0.5,
            accel_smoothing_window: 0.5,
            lateral_smoothing_window: 1.0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("accel_threshold", self.accel_threshold),
            ("standstill_speed", self.standstill_speed),
            ("min_action_duration", self.min_action_duration),
            ("lane_change_lat_rate", self.lane_change_lat_rate),
            ("hysteresis_fraction", self.hysteresis_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.hysteresis_fraction >= 1.0 {
            return Err(Error::InvalidConfig("hysteresis_fraction must be below 1".into()));
        }
        for (name, v) in [
            ("accel_smoothing_window", self.accel_smoothing_window),
            ("lateral_smoothing_window", self.lateral_smoothing_window),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Centered moving average with a window of `width` seconds; the window
/// shrinks at the ends. NaN entries are skipped.
fn moving_average(values: &[f64], dt: f64, width: f64) -> Vec<f64> {
    let half = if dt > 0.0 { (0.5 * width / dt).round() as usize } else { 0 };
    if half == 0 {
        return values.to_vec();
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            let (sum, n) =
                values[lo..=hi].iter().filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

/// A run of samples `[start, next run's start)` sharing one kind.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Run {
    kind: ActionKind,
    start: usize,
}

fn runs_from_labels(labels: &[ActionKind]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for (i, &kind) in labels.iter().enumerate() {
        if runs.last().is_none_or(|r| r.kind != kind) {
            runs.push(Run { kind, start: i });
        }
    }
    runs
}

fn coalesce(runs: &mut Vec<Run>) {
    runs.dedup_by(|next, prev| next.kind == prev.kind);
}

/// Duration of run `i` given sample times; the last run ends at the last
/// sample.
fn run_duration(runs: &[Run], i: usize, times: &[f64]) -> f64 {
    let end = runs.get(i + 1).map_or(times.len() - 1, |r| r.start);
    times[end] - times[runs[i].start]
}

/// Repeatedly absorb the shortest sub-minimum run into its longer neighbor
/// (earlier neighbor on ties). `absorbable` decides which runs may vanish.
fn merge_short_runs(runs: &mut Vec<Run>, times: &[f64], min: f64, absorbable: impl Fn(&Run) -> bool) {
    loop {
        if runs.len() < 2 {
            return;
        }
        let victim = (0..runs.len())
            .filter(|&i| absorbable(&runs[i]))
            .map(|i| (i, run_duration(runs, i, times)))
            .filter(|&(_, d)| d < min)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((i, _)) = victim else { return };
        let left = i.checked_sub(1).map(|j| run_duration(runs, j, times));
        let right = (i + 1 < runs.len()).then(|| run_duration(runs, i + 1, times));
        let into_left = match (left, right) {
            (Some(l), Some(r)) => l >= r,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if into_left {
            runs.remove(i);
        } else {
            // the right neighbor takes over the victim's samples
            runs[i + 1].start = runs[i].start;
            runs.remove(i);
        }
        coalesce(runs);
    }
}

fn actions_from_runs(
    track: &LaneTrack,
    runs: &[Run],
    lane_of: impl Fn(usize, usize) -> (LaneId, LaneId, Option<f64>),
) -> Vec<Action> {
    let times: Vec<f64> = track.samples.iter().map(|s| s.time).collect();
    let last = times.len() - 1;
    runs.iter()
        .enumerate()
        .map(|(i, run)| {
            let end_idx = runs.get(i + 1).map_or(last, |r| r.start);
            let (t_start, t_end) = (times[run.start], times[end_idx]);
            let (lane_before, lane_after, crossing_time) = lane_of(i, run.start);
            Action {
                vehicle_id: track.vehicle_id.clone(),
                kind: run.kind,
                t_start,
                duration: exact_span(t_start, t_end),
                lane_before,
                lane_after,
                crossing_time,
            }
        })
        .collect()
}

fn raw_acceleration(track: &LaneTrack) -> Vec<f64> {
    let n = track.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let s = &track.samples;
    (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (s[hi].speed - s[lo].speed) / (s[hi].time - s[lo].time)
        })
        .collect()
}

/// Smoothed acceleration from the speed channel.
pub fn smoothed_acceleration(track: &LaneTrack, window: f64) -> Vec<f64> {
    moving_average(&raw_acceleration(track), track.dt(), window)
}

fn sse(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Move each boundary between two non-standstill runs to the best
/// two-level split of `raw` within `radius` samples. Smoothing plus
/// hysteresis lags a boundary by up to half a window; this undoes the lag.
/// Runs are never shrunk below `min` seconds (or their current length).
fn refine_boundaries(runs: &mut [Run], raw: &[f64], times: &[f64], radius: usize, min: f64) {
    if radius == 0 {
        return;
    }
    let n = raw.len();
    for b in 1..runs.len() {
        if runs[b - 1].kind == ActionKind::Standstill || runs[b].kind == ActionKind::Standstill {
            continue;
        }
        let prev_start = runs[b - 1].start;
        let next_end = runs.get(b + 1).map_or(n - 1, |r| r.start);
        let cur = runs[b].start;
        let need_left = min.min(times[cur] - times[prev_start]);
        let need_right = min.min(times[next_end] - times[cur]);
        let lo = cur.saturating_sub(radius).max(prev_start + 1);
        let hi = (cur + radius).min(next_end.saturating_sub(1));
        let window_lo = cur.saturating_sub(2 * radius + 1).max(prev_start);
        let window_hi = (cur + 2 * radius + 1).min(next_end);
        let mut best: Option<(f64, usize)> = None;
        for k in lo..=hi {
            if times[k] - times[prev_start] < need_left - 1e-9 || times[next_end] - times[k] < need_right - 1e-9 {
                continue;
            }
            let cost = sse(&raw[window_lo..k]) + sse(&raw[k..window_hi]);
            best = match best {
                Some((c, j)) => {
                    let tie = (cost - c).abs() <= 1e-12 * c.abs().max(1e-12);
                    // ties go to the candidate closest to the detected boundary
                    if (!tie && cost < c) || (tie && k.abs_diff(cur) < j.abs_diff(cur)) {
                        Some((cost, k))
                    } else {
                        Some((c, j))
                    }
                }
                None => Some((cost, k)),
            };
        }
        if let Some((_, k)) = best {
            runs[b].start = k;
        }
    }
}

pub fn segment_longitudinal(track: &LaneTrack, cfg: &SegmentationConfig) -> Result<Vec<Action>> {
    if track.is_empty() {
        return Err(Error::EmptyTrack(track.vehicle_id.clone()));
    }
    let accel = smoothed_acceleration(track, cfg.accel_smoothing_window);
    let thr = cfg.accel_threshold;
    let hold = thr * cfg.hysteresis_fraction;
    let standstill_exit = cfg.standstill_speed * (1.0 + cfg.hysteresis_fraction);

    let mut labels = Vec::with_capacity(track.len());
    let mut state: Option<ActionKind> = None;
    for (sample, &a) in track.samples.iter().zip(&accel) {
        let v = sample.speed;
        let fresh = || {
            if a > thr {
                ActionKind::Accelerate
            } else if a < -thr {
                ActionKind::Decelerate
            } else {
                ActionKind::KeepVelocity
            }
        };
        let next = match state {
            _ if v < cfg.standstill_speed => ActionKind::Standstill,
            Some(ActionKind::Standstill) if v <= standstill_exit => ActionKind::Standstill,
            Some(ActionKind::Accelerate) if a > hold => ActionKind::Accelerate,
            Some(ActionKind::Decelerate) if a < -hold => ActionKind::Decelerate,
            _ => fresh(),
        };
        state = Some(next);
        labels.push(next);
    }

    let times: Vec<f64> = track.samples.iter().map(|s| s.time).collect();
    let mut runs = runs_from_labels(&labels);
    merge_short_runs(&mut runs, &times, cfg.min_action_duration, |_| true);
    let radius =
        if track.dt() > 0.0 { (0.5 * cfg.accel_smoothing_window / track.dt()).round() as usize + 1 } else { 0 };
    refine_boundaries(&mut runs, &raw_acceleration(track), &times, radius, cfg.min_action_duration);
    Ok(actions_from_runs(track, &runs, |_, start| {
        let lane = track.samples[start].lane_id;
        (lane, lane, None)
    }))
}

/// Lateral rate within the current lane frame. Differences never straddle a
/// lane reassignment, so the frame jump does not show up as motion.
pub fn lateral_rate(track: &LaneTrack) -> Vec<f64> {
    let s = &track.samples;
    let n = s.len();
    let mut rate: Vec<f64> = (0..n)
        .map(|i| {
            let mut lo = i.saturating_sub(1);
            let mut hi = (i + 1).min(n - 1);
            if s[lo].lane_id != s[i].lane_id {
                lo = i;
            }
            if s[hi].lane_id != s[i].lane_id {
                hi = i;
            }
            if lo == hi {
                f64::NAN
            } else {
                (s[hi].t - s[lo].t) / (s[hi].time - s[lo].time)
            }
        })
        .collect();
    // isolated samples inherit the previous rate
    let mut prev = 0.0;
    for r in rate.iter_mut() {
        if r.is_nan() {
            *r = prev;
        } else {
            prev = *r;
        }
    }
    rate
}

/// Crossing events that survive flicker suppression: a crossing immediately
/// reversed within `min_gap` seconds is treated as one noisy crossing. Groups
/// with no net lane change disappear.
pub fn effective_crossings(crossings: &[CrossingEvent], min_gap: f64) -> Vec<CrossingEvent> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < crossings.len() {
        let mut j = i;
        while j + 1 < crossings.len()
            && crossings[j + 1].to_lane == crossings[j].from_lane
            && crossings[j + 1].time - crossings[j].time < min_gap
        {
            j += 1;
        }
        let (first, last) = (crossings[i], crossings[j]);
        if first.from_lane != last.to_lane {
            out.push(first);
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Settle {
    event: CrossingEvent,
    start: bool,
    end: bool,
}

/// Move the start of `actions[i]` (and the end of its predecessor) to `b`.
fn move_boundary(actions: &mut [Action], i: usize, b: f64) {
    let end = actions[i].t_end();
    let prev_start = actions[i - 1].t_start;
    actions[i - 1].duration = exact_span(prev_start, b);
    actions[i].t_start = b;
    actions[i].duration = exact_span(b, end);
}

pub fn segment_lateral(track: &LaneTrack, cfg: &SegmentationConfig) -> Result<Vec<Action>> {
    if track.is_empty() {
        return Err(Error::EmptyTrack(track.vehicle_id.clone()));
    }
    let n = track.len();
    let times: Vec<f64> = track.samples.iter().map(|s| s.time).collect();
    let raw = lateral_rate(track);
    let rate: Vec<f64> =
        moving_average(&raw, track.dt(), cfg.lateral_smoothing_window).into_iter().map(f64::abs).collect();
    let thr = cfg.lane_change_lat_rate;
    let crossings = effective_crossings(&track.crossings, cfg.min_action_duration);

    // sample-index intervals [start, end] of each lane change
    let mut intervals: Vec<(usize, usize, Settle)> = Vec::with_capacity(crossings.len());
    for (k, ev) in crossings.iter().enumerate() {
        let c = ev.sample_index;
        let lower = intervals.last().map_or(0, |iv| iv.1);
        let upper = crossings.get(k + 1).map_or(n - 1, |next| next.sample_index - 1).max(c);
        let mut start = c - 1;
        while start > lower && rate[start - 1] >= thr {
            start -= 1;
        }
        if start == c - 1 && start > lower {
            start -= 1;
        }
        let mut end = c;
        while end < upper && rate[end] >= thr {
            end += 1;
        }
        if end == c && end < upper {
            end += 1;
        }
        // The threshold cuts off the slow tails of the manoeuvre; follow the
        // unsmoothed rate outward while it keeps decaying in the same direction.
        let dir = match ev.direction {
            crate::lane_frame::Side::Left => 1.0,
            crate::lane_frame::Side::Right => -1.0,
        };
        // Smoothing also spreads short manoeuvres over motionless samples.
        while start + 1 < c && dir * raw[start] <= 0.0 {
            start += 1;
        }
        while end > c && dir * raw[end] <= 0.0 {
            end -= 1;
        }
        while start > lower && dir * raw[start - 1] > 0.0 && dir * raw[start - 1] < dir * raw[start] {
            start -= 1;
        }
        while end < upper && dir * raw[end + 1] > 0.0 && dir * raw[end + 1] < dir * raw[end] {
            end += 1;
        }
        // A walk that ran into a motionless neighbor brackets the onset
        // between two samples; the boundary goes midway.
        let settle = Settle {
            event: *ev,
            start: start > lower && dir * raw[start - 1] <= 0.0,
            end: end < upper && dir * raw[end + 1] <= 0.0,
        };
        intervals.push((start.max(lower), end, settle));
    }

    // runs: lane changes carry their crossing index in a side table
    let mut runs: Vec<Run> = Vec::new();
    let mut crossing_of: Vec<Option<Settle>> = Vec::new();
    let mut cursor = 0;
    for &(start, end, ev) in &intervals {
        if start > cursor {
            runs.push(Run { kind: ActionKind::KeepLane, start: cursor });
            crossing_of.push(None);
        }
        let kind = match ev.event.direction {
            crate::lane_frame::Side::Left => ActionKind::LaneChangeLeft,
            crate::lane_frame::Side::Right => ActionKind::LaneChangeRight,
        };
        runs.push(Run { kind, start });
        crossing_of.push(Some(ev));
        cursor = end;
    }
    if cursor < n - 1 || runs.is_empty() {
        runs.push(Run { kind: ActionKind::KeepLane, start: cursor });
        crossing_of.push(None);
    }

    // absorb short keep_lane runs into neighboring lane changes
    let mut tagged: Vec<(Run, Option<Settle>)> = runs.into_iter().zip(crossing_of).collect();
    loop {
        if tagged.len() < 2 {
            break;
        }
        let dur = |t: &[(Run, Option<Settle>)], i: usize| {
            let end = t.get(i + 1).map_or(n - 1, |r| r.0.start);
            times[end] - times[t[i].0.start]
        };
        let victim = (0..tagged.len())
            .filter(|&i| tagged[i].0.kind == ActionKind::KeepLane)
            .map(|i| (i, dur(&tagged, i)))
            .filter(|&(_, d)| d < cfg.min_action_duration)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((i, _)) = victim else { break };
        let left = i.checked_sub(1).map(|j| dur(&tagged, j));
        let right = (i + 1 < tagged.len()).then(|| dur(&tagged, i + 1));
        let into_left = match (left, right) {
            (Some(l), Some(r)) => l >= r,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if into_left {
            if let Some(st) = tagged[i - 1].1.as_mut() {
                st.end = false;
            }
        } else {
            tagged[i + 1].0.start = tagged[i].0.start;
            if let Some(st) = tagged[i + 1].1.as_mut() {
                st.start = false;
            }
        }
        tagged.remove(i);
    }

    let runs: Vec<Run> = tagged.iter().map(|t| t.0).collect();
    let mut actions = actions_from_runs(track, &runs, |idx, start| match tagged[idx].1 {
        Some(st) => (st.event.from_lane, st.event.to_lane, Some(st.event.time)),
        None => {
            let lane = track.samples[start].lane_id;
            (lane, lane, None)
        }
    });
    for (i, (run, settle)) in tagged.iter().enumerate() {
        let Some(st) = settle else { continue };
        let end_idx = runs.get(i + 1).map_or(n - 1, |r| r.start);
        if st.start && i > 0 && run.start + 1 < n {
            let b = 0.5 * (times[run.start] + times[run.start + 1]);
            if b < st.event.time {
                move_boundary(&mut actions, i, b);
            }
        }
        if st.end && i + 1 < actions.len() && end_idx > 0 {
            let b = 0.5 * (times[end_idx - 1] + times[end_idx]);
            if b > st.event.time && b > actions[i].t_start {
                move_boundary(&mut actions, i + 1, b);
            }
        }
    }
    Ok(actions)
}

pub fn qualitative_abstraction(track: &LaneTrack, cfg: &SegmentationConfig) -> Result<ActionTimeline> {
    cfg.validate()?;
    let mut timeline = ActionTimeline {
        vehicle_id: track.vehicle_id.clone(),
        longitudinal: segment_longitudinal(track, cfg)?,
        lateral: segment_lateral(track, cfg)?,
        span: (track.start_time(), track.end_time()),
    };
    retile(&mut timeline)?;
    timeline.check_tiling()?;
    Ok(timeline)
}

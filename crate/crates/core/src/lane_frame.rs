//! Road model and lane coordinates.
//!
//! Every lane carries its own s/t frame: `s` is the arc length along the
//! lane's center line measured from the lane start, `t` is the signed lateral
//! offset, positive to the left of the direction of increasing `s`. Center
//! lines are piecewise linear and roads are planar.
//!
//! Cross-lane longitudinal comparisons use a road-level axis obtained by
//! projecting onto a designated reference lane.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LaneId = i32;

/// Default distance a position may stray outside a lane corridor and still be
/// assigned to it.
pub const DEFAULT_TOLERANCE_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSpec {
    pub lane_id: LaneId,
    pub center_line: Vec<[f64; 2]>,
    pub width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successor: Option<LaneId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_neighbor: Option<LaneId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_neighbor: Option<LaneId>,
}

/// JSON document describing a road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadDocument {
    pub lanes: Vec<LaneSpec>,
    /// Lane whose s-axis serves as the shared road-level axis. Defaults to
    /// the first lane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_lane: Option<LaneId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance_margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanePose {
    pub s: f64,
    pub t: f64,
    pub lane_id: LaneId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingEvent {
    /// Interpolated instant at which the vehicle centre crossed the marking.
    pub time: f64,
    /// First sample assigned to `to_lane`.
    pub sample_index: usize,
    pub from_lane: LaneId,
    pub to_lane: LaneId,
    pub direction: Side,
}

/// Foot-point projection of a position onto one lane's center line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub t: f64,
    /// Longitudinal distance beyond either end of the center line (0 inside).
    pub overshoot: f64,
}

#[derive(Debug, Clone)]
pub struct Lane {
    spec: LaneSpec,
    cumulative: Vec<f64>,
}

impl Lane {
    pub fn id(&self) -> LaneId {
        self.spec.lane_id
    }

    pub fn spec(&self) -> &LaneSpec {
        &self.spec
    }

    pub fn width(&self) -> f64 {
        self.spec.width
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("validated lane has points")
    }

    pub fn neighbor(&self, side: Side) -> Option<LaneId> {
        match side {
            Side::Left => self.spec.left_neighbor,
            Side::Right => self.spec.right_neighbor,
        }
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let pts = &self.spec.center_line;
        let last = pts.len() - 2;
        let mut best: Option<(f64, Projection)> = None;
        for i in 0..=last {
            let (a, b) = (pts[i], pts[i + 1]);
            let len = self.cumulative[i + 1] - self.cumulative[i];
            if len <= 0.0 {
                continue;
            }
            let u = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
            let rel = [p[0] - a[0], p[1] - a[1]];
            let along = rel[0] * u[0] + rel[1] * u[1];
            let lateral = u[0] * rel[1] - u[1] * rel[0];

            let (proj, dist2) = if along < 0.0 && i == 0 {
                let proj = Projection { s: 0.0, t: lateral, overshoot: -along };
                (proj, along * along + lateral * lateral)
            } else if along > len && i == last {
                let over = along - len;
                let proj = Projection { s: self.cumulative[i + 1], t: lateral, overshoot: over };
                (proj, over * over + lateral * lateral)
            } else {
                let clamped = along.clamp(0.0, len);
                let gap = along - clamped;
                let dist2 = gap * gap + lateral * lateral;
                let t = if gap == 0.0 { lateral } else { dist2.sqrt().copysign(lateral) };
                let proj = Projection { s: self.cumulative[i] + clamped, t, overshoot: 0.0 };
                (proj, dist2)
            };
            if best.as_ref().is_none_or(|(d, _)| dist2 < *d) {
                best = Some((dist2, proj));
            }
        }
        best.expect("validated lane has a segment of positive length").1
    }

    /// Cartesian point at arc length `s` with lateral offset `t`. `s` outside
    /// the lane extrapolates along the first/last segment.
    pub fn point_at(&self, s: f64, t: f64) -> [f64; 2] {
        let pts = &self.spec.center_line;
        let seg_len = |i: usize| self.cumulative[i + 1] - self.cumulative[i];
        let mut i = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1).min(pts.len() - 2);
        // skip zero-length segments
        while i > 0 && seg_len(i) <= 0.0 {
            i -= 1;
        }
        while seg_len(i) <= 0.0 {
            i += 1;
        }
        let (a, b) = (pts[i], pts[i + 1]);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let u = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let along = s - self.cumulative[i];
        [a[0] + along * u[0] - t * u[1], a[1] + along * u[1] + t * u[0]]
    }
}

/// Immutable road: a set of lanes with symmetric neighbor relations.
#[derive(Debug, Clone)]
pub struct RoadModel {
    lanes: Vec<Lane>,
    index: BTreeMap<LaneId, usize>,
    reference_lane: LaneId,
    tolerance_margin: f64,
}

pub fn build_road(lane_specs: Vec<LaneSpec>) -> Result<RoadModel> {
    RoadModel::new(lane_specs, None, DEFAULT_TOLERANCE_MARGIN)
}

impl RoadModel {
    pub fn new(lane_specs: Vec<LaneSpec>, reference_lane: Option<LaneId>, tolerance_margin: f64) -> Result<Self> {
        if lane_specs.is_empty() {
            return Err(Error::InvalidRoad("no lanes".into()));
        }
        if !(tolerance_margin >= 0.0) {
            return Err(Error::InvalidRoad("tolerance margin must be non-negative".into()));
        }
        let mut index = BTreeMap::new();
        let mut lanes = Vec::with_capacity(lane_specs.len());
        for spec in lane_specs {
            let id = spec.lane_id;
            if spec.center_line.len() < 2 {
                return Err(Error::InvalidRoad(format!("lane {id}: center line needs at least 2 points")));
            }
            if spec.center_line.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRoad(format!("lane {id}: non-finite center line point")));
            }
            if !(spec.width > 0.0) || !spec.width.is_finite() {
                return Err(Error::InvalidRoad(format!("lane {id}: width must be positive")));
            }
            let mut cumulative = Vec::with_capacity(spec.center_line.len());
            let mut acc = 0.0;
            cumulative.push(0.0);
            for w in spec.center_line.windows(2) {
                acc += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
                cumulative.push(acc);
            }
            if !(acc > 0.0) {
                return Err(Error::InvalidRoad(format!("lane {id}: center line has zero length")));
            }
            if index.insert(id, lanes.len()).is_some() {
                return Err(Error::InvalidRoad(format!("duplicate lane id {id}")));
            }
            lanes.push(Lane { spec, cumulative });
        }

        let road =
            RoadModel { reference_lane: reference_lane.unwrap_or(lanes[0].id()), lanes, index, tolerance_margin };
        if !road.index.contains_key(&road.reference_lane) {
            return Err(Error::InvalidRoad(format!("unknown reference lane {}", road.reference_lane)));
        }
        for lane in &road.lanes {
            for (side, back) in [(Side::Left, Side::Right), (Side::Right, Side::Left)] {
                let Some(other) = lane.neighbor(side) else { continue };
                let other_lane = road.lane(other).ok_or_else(|| {
                    Error::InvalidRoad(format!("lane {} references unknown neighbor {other}", lane.id()))
                })?;
                if other_lane.neighbor(back) != Some(lane.id()) {
                    return Err(Error::InvalidRoad(format!(
                        "asymmetric neighbors: lane {}.{:?} = {other} but lane {other}.{:?} = {:?}",
                        lane.id(),
                        side,
                        back,
                        other_lane.neighbor(back)
                    )));
                }
            }
            if let Some(succ) = lane.spec.successor {
                if !road.index.contains_key(&succ) {
                    return Err(Error::InvalidRoad(format!("lane {} has unknown successor {succ}", lane.id())));
                }
            }
        }
        Ok(road)
    }

    pub fn from_document(doc: RoadDocument) -> Result<Self> {
        Self::new(doc.lanes, doc.reference_lane, doc.tolerance_margin.unwrap_or(DEFAULT_TOLERANCE_MARGIN))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn to_document(&self) -> RoadDocument {
        RoadDocument {
            lanes: self.lanes.iter().map(|l| l.spec.clone()).collect(),
            reference_lane: Some(self.reference_lane),
            tolerance_margin: Some(self.tolerance_margin),
        }
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter()
    }

    pub fn lane(&self, id: LaneId) -> Option<&Lane> {
        self.index.get(&id).map(|&i| &self.lanes[i])
    }

    fn lane_or_err(&self, id: LaneId) -> Result<&Lane> {
        self.lane(id).ok_or_else(|| Error::InvalidRoad(format!("unknown lane {id}")))
    }

    pub fn reference_lane(&self) -> LaneId {
        self.reference_lane
    }

    pub fn tolerance_margin(&self) -> f64 {
        self.tolerance_margin
    }

    /// Which side of `from` the lane `to` lies on, if they are neighbors.
    pub fn side_of(&self, from: LaneId, to: LaneId) -> Option<Side> {
        let lane = self.lane(from)?;
        if lane.neighbor(Side::Left) == Some(to) {
            Some(Side::Left)
        } else if lane.neighbor(Side::Right) == Some(to) {
            Some(Side::Right)
        } else {
            None
        }
    }

    /// Nearest-corridor lane pose of a Cartesian position.
    ///
    /// Lanes whose corridor (|t| <= width/2) contains the point win, smaller
    /// |t| first. Otherwise the lane with the smallest excess over its half
    /// width is used if that excess is within the tolerance margin.
    pub fn to_lane_pose(&self, position: [f64; 2]) -> Result<LanePose> {
        let margin = self.tolerance_margin;
        let mut best: Option<(bool, f64, f64, LanePose)> = None;
        for lane in &self.lanes {
            let proj = lane.project(position);
            if proj.overshoot > margin {
                continue;
            }
            let half = 0.5 * lane.width();
            let excess = proj.t.abs() - half;
            if excess > margin {
                continue;
            }
            let inside = excess <= 0.0;
            let key = if inside { proj.t.abs() } else { excess };
            let pose = LanePose { s: proj.s, t: proj.t, lane_id: lane.id() };
            let better = match &best {
                None => true,
                Some((b_inside, b_key, _, b_pose)) => match (inside, *b_inside) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => key < *b_key || (key == *b_key && pose.lane_id < b_pose.lane_id),
                },
            };
            if better {
                best = Some((inside, key, proj.t.abs(), pose));
            }
        }
        best.map(|b| b.3).ok_or(Error::OutOfRoad { x: position[0], y: position[1] })
    }

    /// Arc length of a Cartesian position along the reference lane,
    /// extrapolated past the lane ends.
    pub fn road_s(&self, position: [f64; 2]) -> f64 {
        let lane = self.lane(self.reference_lane).expect("reference lane validated");
        let proj = lane.project(position);
        if proj.overshoot > 0.0 && proj.s == 0.0 {
            -proj.overshoot
        } else {
            proj.s + proj.overshoot
        }
    }

    pub fn to_xy(&self, pose: LanePose) -> Result<[f64; 2]> {
        Ok(self.lane_or_err(pose.lane_id)?.point_at(pose.s, pose.t))
    }

    /// Road-level arc length of a lane pose.
    pub fn road_s_of_pose(&self, pose: LanePose) -> Result<f64> {
        Ok(self.road_s(self.to_xy(pose)?))
    }

    /// Project a Cartesian position into a specific lane's frame regardless of
    /// corridor membership.
    pub fn project_onto(&self, lane: LaneId, position: [f64; 2]) -> Result<Projection> {
        Ok(self.lane_or_err(lane)?.project(position))
    }

    /// Per-sample lane poses and the crossing events where the assigned lane
    /// changes. `times` and `positions` must have equal length.
    pub fn assign_lanes(&self, times: &[f64], positions: &[[f64; 2]]) -> Result<(Vec<LanePose>, Vec<CrossingEvent>)> {
        if times.len() != positions.len() {
            return Err(Error::InvalidRecording(format!(
                "{} timestamps but {} positions",
                times.len(),
                positions.len()
            )));
        }
        let mut poses = Vec::with_capacity(positions.len());
        let mut events = Vec::new();
        for (i, &p) in positions.iter().enumerate() {
            let pose = self.to_lane_pose(p).map_err(|_| Error::OutOfRoadAt { index: i, x: p[0], y: p[1] })?;
            if let Some(prev) = poses.last().copied() {
                let prev: LanePose = prev;
                if prev.lane_id != pose.lane_id {
                    events.push(self.crossing_between(i, times[i - 1], times[i], prev, pose)?);
                }
            }
            poses.push(pose);
        }
        Ok((poses, events))
    }

    fn crossing_between(
        &self,
        index: usize,
        t_prev: f64,
        t_next: f64,
        prev: LanePose,
        next: LanePose,
    ) -> Result<CrossingEvent> {
        let direction = self.side_of(prev.lane_id, next.lane_id).ok_or_else(|| {
            Error::InvalidRecording(format!(
                "sample {index}: lane jump {} -> {} between non-neighbors",
                prev.lane_id, next.lane_id
            ))
        })?;
        let half_from = 0.5 * self.lane_or_err(prev.lane_id)?.width();
        let half_to = 0.5 * self.lane_or_err(next.lane_id)?.width();
        // distance of each sample to the marking it sits beside
        let (d1, d2) = match direction {
            Side::Left => (half_from - prev.t, next.t + half_to),
            Side::Right => (prev.t + half_from, half_to - next.t),
        };
        let (d1, d2) = (d1.max(0.0), d2.max(0.0));
        let frac = if d1 + d2 > 0.0 { d1 / (d1 + d2) } else { 0.5 };
        let frac = frac.clamp(1e-6, 1.0 - 1e-6);
        Ok(CrossingEvent {
            time: t_prev + frac * (t_next - t_prev),
            sample_index: index,
            from_lane: prev.lane_id,
            to_lane: next.lane_id,
            direction,
        })
    }
}

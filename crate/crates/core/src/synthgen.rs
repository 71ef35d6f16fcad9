//! Scripted synthetic fleet recordings with known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FleetRecording, Role, Sample, VehicleRecording};
use crate::lane_frame::{LaneId, LaneSpec, RoadDocument, RoadModel, Side};
use crate::segmentation::{exact_span, retile, Action, ActionKind, ActionTimeline};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    HoldSpeed { duration: f64 },
    Accelerate { to: f64, duration: f64 },
    Decelerate { to: f64, duration: f64 },
    ChangeLane { direction: Side, duration: f64 },
}

impl Primitive {
    pub fn duration(&self) -> f64 {
        match *self {
            Primitive::HoldSpeed { duration }
            | Primitive::Accelerate { duration, .. }
            | Primitive::Decelerate { duration, .. }
            | Primitive::ChangeLane { duration, .. } => duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub lane: LaneId,
    pub s: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedVehicle {
    pub vehicle_id: String,
    pub role: Role,
    pub initial: InitialCondition,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveScript {
    #[serde(default)]
    pub recording_id: String,
    pub road: RoadDocument,
    pub vehicles: Vec<ScriptedVehicle>,
    pub sample_rate: f64,
    /// Recording length. Vehicles whose primitives end earlier keep their last speed.
    pub duration: f64,
    #[serde(default)]
    pub noise_sigma_pos: f64,
    #[serde(default)]
    pub noise_sigma_speed: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl DriveScript {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn road_model(&self) -> Result<RoadModel> {
        RoadModel::from_document(self.road.clone())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScript(m));
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return bad(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.noise_sigma_pos >= 0.0) || !(self.noise_sigma_speed >= 0.0) {
            return bad("noise sigmas must be non-negative".into());
        }
        if self.vehicles.is_empty() {
            return bad("no vehicles".into());
        }
        for v in &self.vehicles {
            if !(v.initial.speed >= 0.0) {
                return bad(format!("{}: negative initial speed", v.vehicle_id));
            }
            let mut speed = v.initial.speed;
            let mut total = 0.0;
            for p in &v.primitives {
                if !(p.duration() > 0.0) || !p.duration().is_finite() {
                    return bad(format!("{}: primitive duration must be positive", v.vehicle_id));
                }
                total += p.duration();
                match *p {
                    Primitive::Accelerate { to, .. } if !(to > speed) => {
                        return bad(format!("{}: accelerate to {to} from {speed}", v.vehicle_id))
                    }
                    Primitive::Decelerate { to, .. } if !(to < speed) || to < 0.0 => {
                        return bad(format!("{}: decelerate to {to} from {speed}", v.vehicle_id))
                    }
                    Primitive::Accelerate { to, .. } | Primitive::Decelerate { to, .. } => speed = to,
                    _ => {}
                }
            }
            if total > self.duration + 1e-9 {
                return bad(format!("{}: primitives last {total} s, recording {} s", v.vehicle_id, self.duration));
            }
        }
        Ok(())
    }
}

/// Kinematic piece: constant or linearly ramped speed, optional lateral move.
#[derive(Debug, Clone, Copy)]
struct Piece {
    start: f64,
    end: f64,
    lane: LaneId,
    s0: f64,
    v0: f64,
    v1: f64,
    /// Signed lateral travel for a lane change, zero otherwise.
    shift: f64,
    target_lane: LaneId,
    primitive: Primitive,
}

impl Piece {
    fn duration(&self) -> f64 {
        self.end - self.start
    }

    fn u(&self, time: f64) -> f64 {
        ((time - self.start) / self.duration()).clamp(0.0, 1.0)
    }

    fn speed(&self, time: f64) -> f64 {
        self.v0 + (self.v1 - self.v0) * self.u(time)
    }

    fn s(&self, time: f64) -> f64 {
        let dt = (time - self.start).clamp(0.0, self.duration());
        self.s0 + self.v0 * dt + 0.5 * (self.v1 - self.v0) / self.duration() * dt * dt
    }

    fn t(&self, time: f64) -> f64 {
        let u = self.u(time);
        self.shift * u * u * (3.0 - 2.0 * u)
    }
}

fn pieces_for(road: &RoadModel, v: &ScriptedVehicle, duration: f64) -> Result<Vec<Piece>> {
    let bad = |m: String| Error::InvalidScript(format!("{}: {m}", v.vehicle_id));
    let mut lane = v.initial.lane;
    let mut s = v.initial.s;
    let mut speed = v.initial.speed;
    let mut time = 0.0;
    let mut pieces = Vec::new();
    let mut prims = v.primitives.clone();
    let used: f64 = prims.iter().map(Primitive::duration).sum();
    if duration - used > 1e-9 {
        prims.push(Primitive::HoldSpeed { duration: duration - used });
    }
    let check_on_lane = |lane: LaneId, s: f64| -> Result<()> {
        let l = road.lane(lane).ok_or_else(|| bad(format!("unknown lane {lane}")))?;
        if s < -1e-9 || s > l.length() + 1e-9 {
            return Err(bad(format!("s = {s:.3} leaves lane {lane} (length {:.3})", l.length())));
        }
        Ok(())
    };
    check_on_lane(lane, s)?;
    for (k, p) in prims.iter().enumerate() {
        let end = if k + 1 == prims.len() { duration } else { time + p.duration() };
        let mut piece =
            Piece { start: time, end, lane, s0: s, v0: speed, v1: speed, shift: 0.0, target_lane: lane, primitive: *p };
        match *p {
            Primitive::HoldSpeed { .. } => {}
            Primitive::Accelerate { to, .. } | Primitive::Decelerate { to, .. } => piece.v1 = to,
            Primitive::ChangeLane { direction, .. } => {
                let from = road.lane(lane).ok_or_else(|| bad(format!("unknown lane {lane}")))?;
                let to = from
                    .neighbor(direction)
                    .ok_or_else(|| bad(format!("lane {lane} has no {direction:?} neighbor at t = {time}")))?;
                let to_width = road.lane(to).map(|l| l.width()).unwrap_or(from.width());
                let dist = 0.5 * (from.width() + to_width);
                piece.shift = if direction == Side::Left { dist } else { -dist };
                piece.target_lane = to;
            }
        }
        let s_end = piece.s(end);
        check_on_lane(lane, s_end)?;
        if piece.target_lane != lane {
            let xy = road.lane(lane).expect("checked").point_at(s_end, piece.shift);
            s = road.project_onto(piece.target_lane, xy)?.s;
            lane = piece.target_lane;
        } else {
            s = s_end;
        }
        speed = piece.v1;
        time = end;
        pieces.push(piece);
    }
    Ok(pieces)
}

fn piece_at(pieces: &[Piece], time: f64) -> &Piece {
    let i = pieces.partition_point(|p| p.start <= time).saturating_sub(1);
    &pieces[i.min(pieces.len() - 1)]
}

fn ground_truth(vehicle_id: &str, pieces: &[Piece], span: (f64, f64)) -> ActionTimeline {
    let mut longitudinal: Vec<Action> = Vec::new();
    let mut lateral: Vec<Action> = Vec::new();
    let push = |list: &mut Vec<Action>, kind, start: f64, end: f64, before, after, crossing| {
        if let Some(last) = list.last_mut() {
            if last.kind == kind && !kind.is_lane_change() {
                last.duration = exact_span(last.t_start, end);
                last.lane_after = after;
                return;
            }
        }
        list.push(Action {
            vehicle_id: vehicle_id.to_string(),
            kind,
            t_start: start,
            duration: exact_span(start, end),
            lane_before: before,
            lane_after: after,
            crossing_time: crossing,
        });
    };
    for p in pieces {
        let long = match p.primitive {
            Primitive::Accelerate { .. } => ActionKind::Accelerate,
            Primitive::Decelerate { .. } => ActionKind::Decelerate,
            _ if p.v0 == 0.0 => ActionKind::Standstill,
            _ => ActionKind::KeepVelocity,
        };
        push(&mut longitudinal, long, p.start, p.end, p.lane, p.lane, None);
        match p.primitive {
            Primitive::ChangeLane { direction, .. } => {
                let kind =
                    if direction == Side::Left { ActionKind::LaneChangeLeft } else { ActionKind::LaneChangeRight };
                let mid = 0.5 * (p.start + p.end);
                push(&mut lateral, kind, p.start, p.end, p.lane, p.target_lane, Some(mid));
            }
            _ => push(&mut lateral, ActionKind::KeepLane, p.start, p.end, p.lane, p.lane, None),
        }
    }
    // longitudinal actions report the lane at their start
    for a in &mut longitudinal {
        a.lane_after = a.lane_before;
    }
    let mut tl = ActionTimeline { vehicle_id: vehicle_id.to_string(), longitudinal, lateral, span };
    retile(&mut tl).expect("both channels are non-empty");
    tl
}

/// Sample the script. Returns the recording and one ground-truth timeline per
/// vehicle, both in script order.
pub fn generate(script: &DriveScript) -> Result<(FleetRecording, Vec<ActionTimeline>)> {
    script.validate()?;
    let road = script.road_model()?;
    let n = script.sample_count();
    let dt = 1.0 / script.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(script.rng_seed);
    let pos_noise = Normal::new(0.0, script.noise_sigma_pos).map_err(|e| Error::InvalidScript(e.to_string()))?;
    let speed_noise = Normal::new(0.0, script.noise_sigma_speed).map_err(|e| Error::InvalidScript(e.to_string()))?;

    let mut vehicles = Vec::with_capacity(script.vehicles.len());
    let mut truths = Vec::with_capacity(script.vehicles.len());
    for v in &script.vehicles {
        let pieces = pieces_for(&road, v, script.duration)?;
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let time = if k + 1 == n { script.duration } else { k as f64 * dt };
            let p = piece_at(&pieces, time);
            let lane = road.lane(p.lane).expect("validated lane");
            let [mut x, mut y] = lane.point_at(p.s(time), p.t(time));
            let mut speed = p.speed(time);
            if script.noise_sigma_pos > 0.0 {
                x += pos_noise.sample(&mut rng);
                y += pos_noise.sample(&mut rng);
            }
            if script.noise_sigma_speed > 0.0 {
                speed = (speed + speed_noise.sample(&mut rng)).max(0.0);
            }
            samples.push(Sample { time, x, y, speed: Some(speed) });
        }
        truths.push(ground_truth(&v.vehicle_id, &pieces, (0.0, script.duration)));
        vehicles.push(VehicleRecording { vehicle_id: v.vehicle_id.clone(), role: v.role, samples });
    }
    let rec = FleetRecording { recording_id: script.recording_id.clone(), sample_rate: script.sample_rate, vehicles };
    rec.validate()?;
    Ok((rec, truths))
}

/// Two straight parallel lanes along +x: lane 1 on the right, lane 2 on the left.
pub fn two_lane_road(length: f64, width: f64) -> RoadDocument {
    RoadDocument {
        lanes: vec![
            LaneSpec {
                lane_id: 1,
                center_line: vec![[0.0, 0.0], [length, 0.0]],
                width,
                successor: None,
                left_neighbor: Some(2),
                right_neighbor: None,
            },
            LaneSpec {
                lane_id: 2,
                center_line: vec![[0.0, width], [length, width]],
                width,
                successor: None,
                left_neighbor: None,
                right_neighbor: Some(1),
            },
        ],
        reference_lane: Some(1),
        tolerance_margin: None,
    }
}

fn fig3_vehicles(brown: Vec<Primitive>) -> Vec<ScriptedVehicle> {
    let hold = |d| Primitive::HoldSpeed { duration: d };
    vec![
        ScriptedVehicle {
            vehicle_id: "ego".into(),
            role: Role::Ego,
            initial: InitialCondition { lane: 1, s: 100.0, speed: 30.0 },
            primitives: vec![hold(60.0)],
        },
        ScriptedVehicle {
            vehicle_id: "green".into(),
            role: Role::Other,
            initial: InitialCondition { lane: 1, s: 160.0, speed: 30.0 },
            primitives: vec![hold(60.0)],
        },
        ScriptedVehicle {
            vehicle_id: "brown".into(),
            role: Role::Other,
            initial: InitialCondition { lane: 2, s: 70.0, speed: 36.0 },
            primitives: brown,
        },
    ]
}

/// Three-vehicle cut-in drive, 60 s at 10 Hz, noiseless. The brown vehicle
/// passes the ego on the left, cuts in between ego and green, brakes, then
/// accelerates and leaves to the left again.
pub fn fig3_script() -> DriveScript {
    use Primitive::*;
    let brown = vec![
        HoldSpeed { duration: 7.5 },
        ChangeLane { direction: Side::Right, duration: 4.0 },
        Decelerate { to: 28.0, duration: 4.0 },
        HoldSpeed { duration: 14.0 },
        Accelerate { to: 36.0, duration: 4.0 },
        ChangeLane { direction: Side::Left, duration: 4.0 },
        HoldSpeed { duration: 22.5 },
    ];
    DriveScript {
        recording_id: "fig3".into(),
        road: two_lane_road(2500.0, 3.5),
        vehicles: fig3_vehicles(brown),
        sample_rate: 10.0,
        duration: 60.0,
        noise_sigma_pos: 0.0,
        noise_sigma_speed: 0.0,
        rng_seed: 0,
    }
}

/// The cut-in drive without the braking after the lane change.
pub fn fig3_script_without_deceleration() -> DriveScript {
    use Primitive::*;
    let brown = vec![
        HoldSpeed { duration: 7.5 },
        ChangeLane { direction: Side::Right, duration: 4.0 },
        HoldSpeed { duration: 48.5 },
    ];
    DriveScript { recording_id: "fig3-no-decel".into(), vehicles: fig3_vehicles(brown), ..fig3_script() }
}

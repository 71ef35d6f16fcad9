//! Fleet recordings and their conversion into lane tracks.
//!
//! CSV layout: header `time,vehicle_id,role,x,y,speed`, one row per
//! (vehicle, sample). An empty `speed` cell means the bus signal is missing;
//! speed is then recovered from positions by central differences.

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lane_frame::{CrossingEvent, LaneId, LanePose, RoadModel};

/// Tolerance on the uniform time step.
pub const TIMESTEP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ego,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecording {
    pub vehicle_id: String,
    pub role: Role,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetRecording {
    pub recording_id: String,
    pub sample_rate: f64,
    pub vehicles: Vec<VehicleRecording>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Guess from a file extension; anything but `.json` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    time: f64,
    vehicle_id: String,
    role: Role,
    x: f64,
    y: f64,
    speed: Option<f64>,
}

#[derive(Deserialize)]
struct RawVehicle {
    vehicle_id: String,
    role: Role,
    samples: Option<Vec<Sample>>,
}

#[derive(Deserialize)]
struct RawRecording {
    recording_id: String,
    sample_rate: f64,
    vehicles: Vec<RawVehicle>,
}

pub fn load_recording(source: impl Read, format: Format) -> Result<FleetRecording> {
    let rec = match format {
        Format::Csv => parse_csv(source)?,
        Format::Json => parse_json(source)?,
    };
    rec.validate()?;
    Ok(rec)
}

fn parse_csv(source: impl Read) -> Result<FleetRecording> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| Error::MalformedRow { line: 1, message: e.to_string() })?.clone();
    let expected = ["time", "vehicle_id", "role", "x", "y", "speed"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::MalformedRow { line: 1, message: format!("expected header `{}`", expected.join(",")) });
    }

    let mut vehicles: Vec<VehicleRecording> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line() + 1;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                return Err(Error::MalformedRow { line, message: e.to_string() });
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        let row: CsvRow =
            record.deserialize(Some(&headers)).map_err(|e| Error::MalformedRow { line, message: e.to_string() })?;
        if let Some(v) = row.speed {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::MalformedRow {
                    line,
                    message: format!("invalid speed {v} for vehicle `{}`", row.vehicle_id),
                });
            }
        }
        if ![row.time, row.x, row.y].iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedRow { line, message: "non-finite value".into() });
        }
        let idx = *slot.entry(row.vehicle_id.clone()).or_insert_with(|| {
            vehicles.push(VehicleRecording { vehicle_id: row.vehicle_id.clone(), role: row.role, samples: Vec::new() });
            vehicles.len() - 1
        });
        if vehicles[idx].role != row.role {
            return Err(Error::MalformedRow { line, message: format!("vehicle `{}` changes role", row.vehicle_id) });
        }
        vehicles[idx].samples.push(Sample { time: row.time, x: row.x, y: row.y, speed: row.speed });
    }

    if vehicles.is_empty() {
        return Err(Error::InvalidRecording("no data rows".into()));
    }
    let first = &vehicles[0].samples;
    if first.len() < 2 {
        return Err(Error::InvalidRecording(
            "at least two samples per vehicle are needed to infer the sample rate".into(),
        ));
    }
    let sample_rate = 1.0 / (first[1].time - first[0].time);
    Ok(FleetRecording { recording_id: String::new(), sample_rate, vehicles })
}

fn parse_json(source: impl Read) -> Result<FleetRecording> {
    let raw: RawRecording = serde_json::from_reader(source)?;
    let vehicles = raw
        .vehicles
        .into_iter()
        .map(|v| {
            let samples = v
                .samples
                .ok_or_else(|| Error::InvalidRecording(format!("vehicle `{}` has no `samples`", v.vehicle_id)))?;
            Ok(VehicleRecording { vehicle_id: v.vehicle_id, role: v.role, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FleetRecording { recording_id: raw.recording_id, sample_rate: raw.sample_rate, vehicles })
}

impl FleetRecording {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(Error::InvalidRecording(format!("sample rate {} must be positive", self.sample_rate)));
        }
        let dt = self.dt();
        let mut seen = std::collections::HashSet::new();
        let mut base: Option<&[Sample]> = None;
        for v in &self.vehicles {
            if !seen.insert(v.vehicle_id.as_str()) {
                return Err(Error::InvalidRecording(format!("duplicate vehicle `{}`", v.vehicle_id)));
            }
            if v.samples.is_empty() {
                return Err(Error::InvalidRecording(format!("vehicle `{}` has no samples", v.vehicle_id)));
            }
            for (i, s) in v.samples.iter().enumerate() {
                if let Some(speed) = s.speed {
                    if speed < 0.0 || !speed.is_finite() {
                        return Err(Error::InvalidRecording(format!(
                            "vehicle `{}`, sample {i}: invalid speed {speed}",
                            v.vehicle_id
                        )));
                    }
                }
            }
            for (i, w) in v.samples.windows(2).enumerate() {
                let step = w[1].time - w[0].time;
                if (step - dt).abs() > TIMESTEP_TOLERANCE {
                    return Err(Error::InvalidRecording(format!(
                        "vehicle `{}`: non-uniform timestep {step} at sample {} (expected {dt})",
                        v.vehicle_id,
                        i + 1
                    )));
                }
            }
            match base {
                None => base = Some(&v.samples),
                Some(b) => {
                    let aligned = b.len() == v.samples.len()
                        && b.iter().zip(&v.samples).all(|(p, q)| (p.time - q.time).abs() <= TIMESTEP_TOLERANCE);
                    if !aligned {
                        return Err(Error::InvalidRecording(format!(
                            "vehicle `{}` does not share the recording time base",
                            v.vehicle_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn ego_id(&self) -> Option<&str> {
        self.vehicles.iter().find(|v| v.role == Role::Ego).map(|v| v.vehicle_id.as_str())
    }

    /// Write in the CSV ingest layout, vehicle by vehicle.
    pub fn write_csv(&self, sink: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        for v in &self.vehicles {
            for s in &v.samples {
                w.serialize(CsvRow {
                    time: s.time,
                    vehicle_id: v.vehicle_id.clone(),
                    role: v.role,
                    x: s.x,
                    y: s.y,
                    speed: s.speed,
                })
                .map_err(io)?;
            }
        }
        if self.vehicles.is_empty() {
            w.write_record(["time", "vehicle_id", "role", "x", "y", "speed"]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub time: f64,
    pub s: f64,
    pub t: f64,
    pub lane_id: LaneId,
    pub speed: f64,
    /// Arc length along the road's reference lane.
    pub road_s: f64,
}

impl TrackSample {
    pub fn pose(&self) -> LanePose {
        LanePose { s: self.s, t: self.t, lane_id: self.lane_id }
    }
}

/// One vehicle's drive in lane coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneTrack {
    pub vehicle_id: String,
    pub role: Role,
    pub samples: Vec<TrackSample>,
    pub crossings: Vec<CrossingEvent>,
}

impl LaneTrack {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.time)
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    /// Sampling interval, or 0 for tracks with fewer than two samples.
    pub fn dt(&self) -> f64 {
        match self.samples.as_slice() {
            [a, b, ..] => b.time - a.time,
            _ => 0.0,
        }
    }

    /// Cumulative distance travelled at each sample. Steps within a lane use
    /// the lane's s; steps across a crossing use the road-level axis.
    pub fn progress(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.samples.len());
        let mut acc = 0.0;
        for (i, cur) in self.samples.iter().enumerate() {
            if i > 0 {
                let prev = &self.samples[i - 1];
                acc += if prev.lane_id == cur.lane_id { cur.s - prev.s } else { cur.road_s - prev.road_s };
            }
            out.push(acc);
        }
        out
    }
}

/// Central-difference speed from positions, one-sided at the ends.
fn speed_from_positions(samples: &[Sample]) -> Vec<f64> {
    let n = samples.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let dist = |a: &Sample, b: &Sample| (b.x - a.x).hypot(b.y - a.y);
    (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            dist(&samples[lo], &samples[hi]) / (samples[hi].time - samples[lo].time)
        })
        .collect()
}

pub fn to_lane_track(road: &RoadModel, vehicle: &VehicleRecording) -> Result<LaneTrack> {
    let times: Vec<f64> = vehicle.samples.iter().map(|s| s.time).collect();
    let positions: Vec<[f64; 2]> = vehicle.samples.iter().map(|s| [s.x, s.y]).collect();
    let (poses, crossings) = road.assign_lanes(&times, &positions).map_err(|e| match e {
        Error::OutOfRoadAt { index, .. } => Error::VehicleOutOfRoad { vehicle_id: vehicle.vehicle_id.clone(), index },
        other => other,
    })?;
    let fallback = if vehicle.samples.iter().any(|s| s.speed.is_none()) {
        speed_from_positions(&vehicle.samples)
    } else {
        Vec::new()
    };
    let samples = vehicle
        .samples
        .iter()
        .zip(poses)
        .enumerate()
        .map(|(i, (src, pose))| TrackSample {
            time: src.time,
            s: pose.s,
            t: pose.t,
            lane_id: pose.lane_id,
            speed: src.speed.unwrap_or_else(|| fallback[i]),
            road_s: road.road_s([src.x, src.y]),
        })
        .collect();
    Ok(LaneTrack { vehicle_id: vehicle.vehicle_id.clone(), role: vehicle.role, samples, crossings })
}

/// One lane track per vehicle, in recording order.
pub fn to_lane_tracks(road: &RoadModel, rec: &FleetRecording) -> Result<Vec<LaneTrack>> {
    rec.vehicles.par_iter().map(|v| to_lane_track(road, v)).collect()
}

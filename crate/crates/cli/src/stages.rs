//! Pipeline stages. Each takes loaded inputs and returns results; file I/O
//! stays in the command layer.

use std::path::Path;

use log::info;

use fleetscen::ingest::{load_recording, to_lane_tracks, FleetRecording, Format, Role};
use fleetscen::lane_frame::RoadModel;
use fleetscen::patterns::{
    builtin_patterns_with, compute_all_relations, detect, load_patterns, Pattern, ScenarioInstance,
};
use fleetscen::payload;
use fleetscen::quantfit::{abstract_tracks, attach_road_axis, reconstruct, AbstractedTrack};
use fleetscen::segmentation::{ActionKind, ActionTimeline};
use fleetscen::statistics::{
    annotate_instances, build_report, extract_parameters_with, ExtractOptions, ParameterTable, ReportOptions,
    StatsReport,
};
use fleetscen::synthgen::{fig3_script, fig3_script_without_deceleration, generate, DriveScript};
use fleetscen::xosc::{export_xosc, ExportOptions, ExportScope};

use crate::config::PipelineConfig;
use crate::CliError;

pub const PRESETS: [&str; 2] = ["fig3", "fig3-no-decel"];

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    info!("wrote {} ({} bytes)", path.display(), bytes.len());
    Ok(())
}

pub fn load_road(path: &Path) -> Result<RoadModel, CliError> {
    Ok(RoadModel::from_json(&read_text(path)?)?)
}

pub fn preset_script(name: &str) -> Result<DriveScript, CliError> {
    match name {
        "fig3" => Ok(fig3_script()),
        "fig3-no-decel" => Ok(fig3_script_without_deceleration()),
        other => Err(CliError::Config(format!("unknown preset `{other}`; available: {}", PRESETS.join(", ")))),
    }
}

pub fn load_script(path: &Path) -> Result<DriveScript, CliError> {
    Ok(DriveScript::from_json(&read_text(path)?)?)
}

/// Synthesized recording, its road and the scripted timelines.
pub fn synth(
    mut script: DriveScript,
    seed: Option<u64>,
) -> Result<(FleetRecording, RoadModel, Vec<ActionTimeline>), CliError> {
    if let Some(seed) = seed {
        script.rng_seed = seed;
    }
    let road = script.road_model()?;
    let (rec, truth) = generate(&script)?;
    info!(
        "synth: {} vehicles, {} samples each, {} scripted actions",
        rec.vehicles.len(),
        script.sample_count(),
        truth.iter().map(|t| t.longitudinal.len() + t.lateral.len()).sum::<usize>()
    );
    Ok((rec, road, truth))
}

pub fn load_fleet(path: &Path) -> Result<FleetRecording, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rec = load_recording(std::io::BufReader::new(file), Format::from_path(path))?;
    if rec.recording_id.is_empty() {
        rec.recording_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    Ok(rec)
}

/// Abstract every vehicle; the result is sorted by vehicle id.
pub fn abstract_recording(
    road: &RoadModel,
    rec: &FleetRecording,
    cfg: &PipelineConfig,
) -> Result<Vec<AbstractedTrack>, CliError> {
    let mut lane_tracks = to_lane_tracks(road, rec)?;
    lane_tracks.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id));
    let tracks = abstract_tracks(&lane_tracks, &cfg.segmentation, &cfg.fit.options())?;
    let actions: usize = tracks.iter().map(|t| t.fitted.len()).sum();
    let crossings: usize = lane_tracks.iter().map(|t| t.crossings.len()).sum();
    info!("abstract: {} tracks, {} lane crossings, {} actions", tracks.len(), crossings, actions);
    Ok(tracks)
}

/// Encode and decode again, so every run exercises the wire format.
pub fn payload_round_trip(
    tracks: &[AbstractedTrack],
    recording_id: &str,
) -> Result<(Vec<u8>, Vec<AbstractedTrack>), CliError> {
    let bytes = payload::encode(tracks, recording_id)?;
    let (_, decoded) = payload::decode(&bytes)?;
    info!("payload: {} tracks in {} bytes", decoded.len(), bytes.len());
    Ok((bytes, decoded))
}

pub fn patterns(cfg: &PipelineConfig) -> Result<Vec<Pattern>, CliError> {
    match &cfg.paths.patterns {
        Some(p) => Ok(load_patterns(&read_text(p)?)?),
        None => Ok(builtin_patterns_with(cfg.detect.cut_in_gap, cfg.detect.immediate_gap)),
    }
}

/// Detect on re-simulated tracks, as a receiver of the payload would.
pub fn detect_instances(
    road: &RoadModel,
    tracks: &[AbstractedTrack],
    patterns: &[Pattern],
    cfg: &PipelineConfig,
) -> Result<Vec<ScenarioInstance>, CliError> {
    let mut lane_tracks = Vec::with_capacity(tracks.len());
    for t in tracks {
        let mut lt = reconstruct(t, cfg.fit.dt);
        attach_road_axis(&mut lt, road)?;
        lane_tracks.push(lt);
    }
    let relations = compute_all_relations(road, &lane_tracks)?;
    let timelines: Vec<ActionTimeline> = tracks.iter().map(|t| t.timeline.clone()).collect();
    let ego = tracks.iter().find(|t| t.role == Role::Ego).map(|t| t.vehicle_id.as_str());
    let mut instances = detect(patterns, &timelines, &relations, ego)?;
    annotate_instances(&mut instances, tracks, Some(road))?;
    info!("detect: {} patterns, {} instances", patterns.len(), instances.len());
    for p in patterns {
        info!("  {}: {}", p.pattern_id, instances.iter().filter(|i| i.pattern_id == p.pattern_id).count());
    }
    Ok(instances)
}

pub fn statistics(
    road: Option<&RoadModel>,
    tracks: &[AbstractedTrack],
    instances: &[ScenarioInstance],
    cfg: &PipelineConfig,
) -> Result<(ParameterTable, StatsReport), CliError> {
    let extract = ExtractOptions { columns: cfg.stats.columns.clone(), speed_bucket: cfg.stats.speed_bucket };
    let table = extract_parameters_with(instances, tracks, road, &extract)?;
    let report = build_report(
        &table,
        &ReportOptions {
            bins: cfg.stats.bins.clone(),
            group_by: cfg.stats.group_by.clone(),
            targets: cfg.stats.targets.clone(),
        },
    )?;
    info!("stats: {} rows, {} dropped", table.len(), table.dropped_rows());
    Ok((table, report))
}

pub fn export(
    tracks: &[AbstractedTrack],
    instances: &[ScenarioInstance],
    recording_id: &str,
    cfg: &PipelineConfig,
) -> Result<String, CliError> {
    let scope = match cfg.export.instance {
        None => ExportScope::Recording,
        Some(k) => ExportScope::Instance(instances.get(k).ok_or_else(|| {
            CliError::Config(format!("export.instance {k} out of range ({} instances)", instances.len()))
        })?),
    };
    let timestamp =
        (!cfg.run.no_timestamp).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let opts = ExportOptions { recording_id: recording_id.to_string(), dt: cfg.fit.dt, timestamp };
    let xml = export_xosc(tracks, scope, &opts)?;
    info!("export: {} maneuver groups", tracks.len());
    Ok(xml)
}

/// Human-readable summary of a payload.
pub fn describe(recording_id: &str, tracks: &[AbstractedTrack], bytes: usize) -> String {
    let mut out = format!("recording {recording_id:?}: {} tracks, {bytes} bytes\n", tracks.len());
    for t in tracks {
        let (t0, t1) = t.span();
        out += &format!(
            "  {} ({}) {:.3}..{:.3} s, lane {} at s={:.3}\n",
            t.vehicle_id,
            if t.role == Role::Ego { "ego" } else { "other" },
            t0,
            t1,
            t.initial_state.lane,
            t.initial_state.s
        );
        for f in &t.fitted {
            let a = &f.action;
            let degrees: Vec<String> = f.segments.iter().map(|p| p.degree().to_string()).collect();
            out += &format!(
                "    {:<12} {:<17} {:>9.3} +{:>8.3} s  lanes {}->{}  degree {}\n",
                a.channel().as_str(),
                a.kind.as_str(),
                a.t_start,
                a.duration,
                a.lane_before,
                a.lane_after,
                degrees.join("/")
            );
        }
    }
    let counts: Vec<String> = ActionKind::ALL
        .iter()
        .map(|k| {
            format!("{} {}", k.as_str(), tracks.iter().flat_map(|t| &t.fitted).filter(|f| f.action.kind == *k).count())
        })
        .collect();
    out += &format!("actions: {}\n", counts.join(", "));
    out
}

//! Command-line front end: synthesize or load recordings, abstract them,
//! ship them through the payload codec, detect scenarios, compute parameter
//! statistics and export scenarios.

mod config;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use config::PipelineConfig;
use fleetscen::lane_frame::RoadModel;
use fleetscen::patterns::ScenarioInstance;
use fleetscen::payload;
use fleetscen::quantfit::AbstractedTrack;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    /// Rendered argument error, usage text included.
    #[error("{0}")]
    Arguments(String),
    /// Help or version output was requested and printed.
    #[error("")]
    Handled,
    #[error(transparent)]
    Core(#[from] fleetscen::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_internal() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fleetscen", version, about = "Driving-scenario abstraction pipeline")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Flags {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Road model JSON.
    #[arg(long, global = true, value_name = "PATH")]
    road: Option<PathBuf>,
    /// Recording (abstract, pipeline) or payload (detect, stats, export, inspect).
    #[arg(long, global = true, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Built-in drive script: fig3 or fig3-no-decel.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Drive script JSON.
    #[arg(long, global = true, value_name = "PATH")]
    script: Option<PathBuf>,
    /// Pattern JSON replacing the built-in patterns.
    #[arg(long, global = true, value_name = "PATH")]
    patterns: Option<PathBuf>,
    /// Instances JSON written by `detect`.
    #[arg(long, global = true, value_name = "PATH")]
    instances: Option<PathBuf>,
    /// Export only this instance (index into the instance list).
    #[arg(long, global = true, value_name = "N")]
    instance: Option<usize>,
    /// Seed for synthetic noise.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for per-track work.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Leave the generation date out of the exported XML.
    #[arg(long, global = true)]
    no_timestamp: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a recording from a drive script.
    Synth,
    /// Abstract a recording into a payload.
    Abstract,
    /// Detect scenario instances in a payload.
    Detect,
    /// Extract parameters and their statistics.
    Stats,
    /// Export a payload as OpenSCENARIO-style XML.
    Export,
    /// Print a payload summary.
    Inspect,
    /// Every stage in sequence.
    Pipeline,
}

fn merge(flags: Flags) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.road, flags.road),
        (&mut paths.input, flags.input),
        (&mut paths.out, flags.out),
        (&mut paths.script, flags.script),
        (&mut paths.patterns, flags.patterns),
        (&mut paths.instances, flags.instances),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    cfg.run.preset = flags.preset.or(cfg.run.preset);
    cfg.run.seed = flags.seed.or(cfg.run.seed);
    cfg.run.workers = flags.workers.or(cfg.run.workers);
    cfg.run.no_timestamp |= flags.no_timestamp;
    cfg.export.instance = flags.instance.or(cfg.export.instance);
    cfg.validate()?;
    for p in [&cfg.paths.road, &cfg.paths.input, &cfg.paths.script, &cfg.paths.patterns, &cfg.paths.instances]
        .into_iter()
        .flatten()
    {
        if !p.exists() {
            return Err(CliError::Config(format!("{}: no such file", p.display())));
        }
    }
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("`{command}` needs --{flag}")))
}

fn json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(fleetscen::Error::from)?;
    out.push(b'\n');
    Ok(out)
}

fn load_payload(path: &Path) -> Result<(String, Vec<AbstractedTrack>, usize), CliError> {
    let bytes = stages::read(path)?;
    let (id, tracks) = payload::decode(&bytes)?;
    Ok((id, tracks, bytes.len()))
}

fn load_instances(path: &Path) -> Result<Vec<ScenarioInstance>, CliError> {
    serde_json::from_str(&stages::read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn script_of(cfg: &PipelineConfig) -> Result<Option<fleetscen::synthgen::DriveScript>, CliError> {
    match (&cfg.run.preset, &cfg.paths.script) {
        (Some(_), Some(_)) => Err(CliError::Usage("--preset and --script are mutually exclusive".into())),
        (Some(name), None) => stages::preset_script(name).map(Some),
        (None, Some(p)) => stages::load_script(p).map(Some),
        (None, None) => Ok(None),
    }
}

fn write_synth(
    out: &Path,
    rec: &fleetscen::ingest::FleetRecording,
    road: &RoadModel,
    truth: &[fleetscen::segmentation::ActionTimeline],
) -> Result<(), CliError> {
    stages::write(&out.join("recording.csv"), rec.to_csv_string()?.as_bytes())?;
    stages::write(&out.join("road.json"), &json(&road.to_document())?)?;
    stages::write(&out.join("truth.json"), &json(truth)?)
}

fn write_stats(
    out: &Path,
    tracks: &[AbstractedTrack],
    instances: &[ScenarioInstance],
    road: Option<&RoadModel>,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let (table, report) = stages::statistics(road, tracks, instances, cfg)?;
    stages::write(&out.join("params.csv"), table.to_csv_string()?.as_bytes())?;
    stages::write(&out.join("stats.json"), &json(&report)?)
}

fn run_command(command: Command, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    match command {
        Command::Synth => {
            let script = script_of(cfg)?.ok_or_else(|| CliError::Usage("`synth` needs --preset or --script".into()))?;
            let (rec, road, truth) = stages::synth(script, cfg.run.seed)?;
            write_synth(&out, &rec, &road, &truth)
        }
        Command::Abstract => {
            let road = stages::load_road(require(&cfg.paths.road, "road", "abstract")?)?;
            let rec = stages::load_fleet(require(&cfg.paths.input, "input", "abstract")?)?;
            let tracks = stages::abstract_recording(&road, &rec, cfg)?;
            let bytes = payload::encode(&tracks, &rec.recording_id)?;
            stages::write(&out.join("abstracted.bin"), &bytes)
        }
        Command::Detect => {
            let road = stages::load_road(require(&cfg.paths.road, "road", "detect")?)?;
            let (_, tracks, _) = load_payload(require(&cfg.paths.input, "input", "detect")?)?;
            let instances = stages::detect_instances(&road, &tracks, &stages::patterns(cfg)?, cfg)?;
            stages::write(&out.join("instances.json"), &json(&instances)?)
        }
        Command::Stats => {
            let (_, tracks, _) = load_payload(require(&cfg.paths.input, "input", "stats")?)?;
            let instances = load_instances(require(&cfg.paths.instances, "instances", "stats")?)?;
            let road = cfg.paths.road.as_deref().map(stages::load_road).transpose()?;
            write_stats(&out, &tracks, &instances, road.as_ref(), cfg)
        }
        Command::Export => {
            let (id, tracks, _) = load_payload(require(&cfg.paths.input, "input", "export")?)?;
            let instances = match (&cfg.paths.instances, cfg.export.instance) {
                (Some(p), _) => load_instances(p)?,
                (None, Some(_)) => return Err(CliError::Usage("--instance needs --instances".into())),
                (None, None) => Vec::new(),
            };
            let xml = stages::export(&tracks, &instances, &id, cfg)?;
            stages::write(&out.join("scenario.xosc"), xml.as_bytes())
        }
        Command::Inspect => {
            let (id, tracks, n) = load_payload(require(&cfg.paths.input, "input", "inspect")?)?;
            print!("{}", stages::describe(&id, &tracks, n));
            Ok(())
        }
        Command::Pipeline => {
            let (rec, road) = match script_of(cfg)? {
                Some(script) => {
                    let (rec, road, truth) = stages::synth(script, cfg.run.seed)?;
                    write_synth(&out, &rec, &road, &truth)?;
                    (rec, road)
                }
                None => {
                    let road = stages::load_road(require(&cfg.paths.road, "road", "pipeline")?)?;
                    let input = cfg.paths.input.as_deref().ok_or_else(|| {
                        CliError::Usage("`pipeline` needs --preset, --script or --road with --input".into())
                    })?;
                    (stages::load_fleet(input)?, road)
                }
            };
            let tracks = stages::abstract_recording(&road, &rec, cfg)?;
            let (bytes, decoded) = stages::payload_round_trip(&tracks, &rec.recording_id)?;
            stages::write(&out.join("abstracted.bin"), &bytes)?;
            let instances = stages::detect_instances(&road, &decoded, &stages::patterns(cfg)?, cfg)?;
            stages::write(&out.join("instances.json"), &json(&instances)?)?;
            write_stats(&out, &decoded, &instances, Some(&road), cfg)?;
            let xml = stages::export(&decoded, &instances, &rec.recording_id, cfg)?;
            stages::write(&out.join("scenario.xosc"), xml.as_bytes())?;
            info!("pipeline: done");
            Ok(())
        }
    }
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            CliError::Handled
        }
        _ => CliError::Arguments(e.render().to_string()),
    })?;
    let cfg = merge(cli.flags)?;
    match cfg.run.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?
            .install(|| run_command(cli.command, &cfg)),
        None => run_command(cli.command, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    match std::panic::catch_unwind(|| run(argv)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Handled)) => ExitCode::SUCCESS,
        Ok(Err(CliError::Arguments(text))) => {
            eprint!("{text}");
            ExitCode::from(1)
        }
        Ok(Err(e)) => {
            eprintln!("error: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(2),
    }
}

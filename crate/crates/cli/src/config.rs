//! Run configuration: a TOML document whose values command-line flags override.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fleetscen::patterns::{DEFAULT_CUT_IN_GAP, DEFAULT_IMMEDIATE_GAP};
use fleetscen::quantfit::FitOptions;
use fleetscen::segmentation::SegmentationConfig;
use fleetscen::statistics::{Bins, DEFAULT_SPEED_BUCKET};
use fleetscen::xosc::DEFAULT_DT;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub road: Option<PathBuf>,
    /// Recording (CSV or JSON) for `abstract` and `pipeline`, payload for the later stages.
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Drive script JSON for `synth`.
    pub script: Option<PathBuf>,
    /// Pattern JSON; the built-in set when absent.
    pub patterns: Option<PathBuf>,
    /// Instances JSON for `stats` and `export`.
    pub instances: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub c1_continuity: bool,
    /// Interval for reconstruction and export vertices, s.
    pub dt: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { c1_continuity: false, dt: DEFAULT_DT }
    }
}

impl FitConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions { c1_continuity: self.c1_continuity }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub cut_in_gap: f64,
    pub immediate_gap: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { cut_in_gap: DEFAULT_CUT_IN_GAP, immediate_gap: DEFAULT_IMMEDIATE_GAP }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub bins: Bins,
    pub group_by: Vec<String>,
    pub targets: Vec<String>,
    pub speed_bucket: f64,
    /// Numeric columns to keep; every defined column when absent.
    pub columns: Option<Vec<String>>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let report = fleetscen::statistics::ReportOptions::default();
        Self {
            bins: report.bins,
            group_by: report.group_by,
            targets: report.targets,
            speed_bucket: DEFAULT_SPEED_BUCKET,
            columns: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Index into the instance list; the whole recording when absent.
    pub instance: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub run: RunOptions,
    pub segmentation: SegmentationConfig,
    pub fit: FitConfig,
    pub detect: DetectConfig,
    pub stats: StatsConfig,
    pub export: ExportConfig,
}

impl PipelineConfig {
    /// Parse a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.road,
            &mut cfg.paths.input,
            &mut cfg.paths.out,
            &mut cfg.paths.script,
            &mut cfg.paths.patterns,
            &mut cfg.paths.instances,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.segmentation.validate()?;
        if !(self.fit.dt > 0.0) || !self.fit.dt.is_finite() {
            return Err(CliError::Config(format!("fit.dt must be positive, got {}", self.fit.dt)));
        }
        if self.run.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if !(self.stats.speed_bucket > 0.0) {
            return Err(CliError::Config(format!(
                "stats.speed_bucket must be positive, got {}",
                self.stats.speed_bucket
            )));
        }
        for gap in [self.detect.cut_in_gap, self.detect.immediate_gap] {
            if !(gap >= 0.0) || !gap.is_finite() {
                return Err(CliError::Config(format!("detect gaps must be non-negative, got {gap}")));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

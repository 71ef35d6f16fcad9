//! Scenario parameter tables, histograms, correlations and conditional
//! distributions.
//!
//! Sums run over sorted values so every statistic is independent of row order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lane_frame::{LanePose, RoadModel};
use crate::patterns::{ScenarioInstance, EGO};
use crate::quantfit::{AbstractedTrack, FittedAction, Resimulator};
use crate::segmentation::{Action, Channel};

pub const DEFAULT_SPEED_BUCKET: f64 = 5.0;

/// Numeric columns produced by [`extract_parameters`], in order.
pub const PARAMETER_COLUMNS: [&str; 16] = [
    "lane_change_duration",
    "t_displacement",
    "mean_speed",
    "cut_in_gap",
    "a0",
    "a1",
    "a2",
    "a3",
    "a4",
    "a5",
    "post_a0",
    "post_a1",
    "post_a2",
    "post_a3",
    "post_a4",
    "post_a5",
];

pub const CATEGORICAL_COLUMNS: [&str; 3] = ["scenario_type", "speed_bucket", "actor"];

/// Column-oriented table of real parameters with categorical keys. Rows with
/// a non-finite value are dropped on insertion and counted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterTable {
    numeric: Vec<(String, Vec<f64>)>,
    categorical: Vec<(String, Vec<String>)>,
    dropped_rows: usize,
}

impl ParameterTable {
    pub fn new<S: AsRef<str>>(numeric: &[S], categorical: &[S]) -> Self {
        Self {
            numeric: numeric.iter().map(|n| (n.as_ref().to_string(), Vec::new())).collect(),
            categorical: categorical.iter().map(|n| (n.as_ref().to_string(), Vec::new())).collect(),
            dropped_rows: 0,
        }
    }

    /// Build from whole columns; rows with non-finite values are dropped.
    pub fn from_columns(numeric: Vec<(String, Vec<f64>)>, categorical: Vec<(String, Vec<String>)>) -> Result<Self> {
        let n = numeric.first().map(|c| c.1.len()).or_else(|| categorical.first().map(|c| c.1.len())).unwrap_or(0);
        if numeric.iter().any(|c| c.1.len() != n) || categorical.iter().any(|c| c.1.len() != n) {
            return Err(Error::Statistics("columns differ in length".into()));
        }
        let names: Vec<&str> = numeric.iter().map(|c| c.0.as_str()).collect();
        let cats: Vec<&str> = categorical.iter().map(|c| c.0.as_str()).collect();
        let mut t = ParameterTable::new(&names, &cats);
        for i in 0..n {
            let row: Vec<f64> = numeric.iter().map(|c| c.1[i]).collect();
            let keys: Vec<String> = categorical.iter().map(|c| c.1[i].clone()).collect();
            t.push_row(&row, keys)?;
        }
        Ok(t)
    }

    /// Append a row. Returns false when it was dropped for a non-finite value.
    pub fn push_row(&mut self, values: &[f64], keys: Vec<String>) -> Result<bool> {
        if values.len() != self.numeric.len() || keys.len() != self.categorical.len() {
            return Err(Error::Statistics("row shape does not match the table".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            self.dropped_rows += 1;
            return Ok(false);
        }
        for (col, &v) in self.numeric.iter_mut().zip(values) {
            col.1.push(v);
        }
        for (col, k) in self.categorical.iter_mut().zip(keys) {
            col.1.push(k);
        }
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.numeric.first().map(|c| c.1.len()).or_else(|| self.categorical.first().map(|c| c.1.len())).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn numeric_names(&self) -> impl Iterator<Item = &str> {
        self.numeric.iter().map(|c| c.0.as_str())
    }

    pub fn categorical_names(&self) -> impl Iterator<Item = &str> {
        self.categorical.iter().map(|c| c.0.as_str())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.numeric
            .iter()
            .find(|c| c.0 == name)
            .map(|c| c.1.as_slice())
            .ok_or_else(|| Error::Statistics(format!("unknown column `{name}`")))
    }

    pub fn key_column(&self, name: &str) -> Result<&[String]> {
        self.categorical
            .iter()
            .find(|c| c.0 == name)
            .map(|c| c.1.as_slice())
            .ok_or_else(|| Error::Statistics(format!("unknown key `{name}`")))
    }

    /// CSV with categorical keys first, then numeric columns.
    pub fn write_csv(&self, sink: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let header: Vec<&str> = self.categorical_names().chain(self.numeric_names()).collect();
        w.write_record(&header).map_err(io)?;
        for i in 0..self.len() {
            let record: Vec<String> = self
                .categorical
                .iter()
                .map(|c| c.1[i].clone())
                .chain(self.numeric.iter().map(|c| c.1[i].to_string()))
                .collect();
            w.write_record(&record).map_err(io)?;
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

fn fitted_for(track: &AbstractedTrack, channel: Channel, index: usize) -> Option<&FittedAction> {
    track.fitted_channel(channel).nth(index)
}

fn road_position(road: Option<&RoadModel>, pose: LanePose) -> f64 {
    road.and_then(|r| r.road_s_of_pose(pose).ok()).unwrap_or(pose.s)
}

/// Parameters of one actor in one instance, keyed by column name. Undefined
/// parameters are NaN.
pub fn actor_parameters(
    inst: &ScenarioInstance,
    role: &str,
    tracks: &[AbstractedTrack],
    road: Option<&RoadModel>,
) -> Result<BTreeMap<String, f64>> {
    let vehicle = inst
        .actors
        .get(role)
        .ok_or_else(|| Error::UnresolvedAction(format!("{}: no actor `{role}`", inst.pattern_id)))?;
    let find = |id: &str| {
        tracks
            .iter()
            .find(|t| t.vehicle_id == id)
            .ok_or_else(|| Error::UnresolvedAction(format!("unknown vehicle `{id}`")))
    };
    let track = find(vehicle)?;
    let timelines = std::slice::from_ref(&track.timeline);
    let mut own: Vec<(&crate::patterns::ActionRef, &Action)> = Vec::new();
    for r in &inst.matched_actions {
        if &r.vehicle_id == vehicle {
            own.push((r, r.resolve(timelines)?));
        } else {
            // every reference must resolve, even those of other actors
            r.resolve(&[find(&r.vehicle_id)?.timeline.clone()])?;
        }
    }
    let primary = own.iter().find(|(r, _)| r.channel == Channel::Lateral).or_else(|| own.first());

    let mut out: BTreeMap<String, f64> = PARAMETER_COLUMNS.iter().map(|c| (c.to_string(), f64::NAN)).collect();
    let Some(&(pref, action)) = primary else { return Ok(out) };
    let fitted = fitted_for(track, pref.channel, pref.index)
        .ok_or_else(|| Error::UnresolvedAction(format!("{} has no fit for {:?}", vehicle, pref)))?;

    let sim = Resimulator::new(track);
    let (s0, s1) = (sim.state_at(action.t_start), sim.state_at(action.t_end()));
    out.insert("lane_change_duration".into(), action.duration);
    if action.duration > 0.0 {
        out.insert("mean_speed".into(), (s1.s - s0.s) / action.duration);
    }
    if pref.channel == Channel::Lateral {
        let disp: f64 = fitted.segments.iter().map(|p| (p.eval(1.0) - p.eval(0.0)).abs()).sum();
        out.insert("t_displacement".into(), disp);
        let pre = fitted.segments[0].padded();
        let post = fitted.segments.get(1).map_or([0.0; 6], |p| p.padded());
        for k in 0..6 {
            out.insert(format!("a{k}"), pre[k]);
            out.insert(format!("post_a{k}"), post[k]);
        }
    }
    if let Some(ego_id) = inst.actors.get(EGO) {
        let ego = find(ego_id)?;
        let e = Resimulator::new(ego).state_at(action.t_end());
        let gap = road_position(road, LanePose { s: s1.s, t: s1.t, lane_id: s1.lane_id })
            - road_position(road, LanePose { s: e.s, t: e.t, lane_id: e.lane_id });
        out.insert("cut_in_gap".into(), gap);
    }
    Ok(out)
}

fn speed_bucket(mean_speed: f64, width: f64) -> String {
    if mean_speed.is_finite() {
        format!("{}", (mean_speed / width).floor() as i64)
    } else {
        "nan".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractOptions {
    /// Numeric columns to keep. `None` keeps every column defined in at
    /// least one row.
    pub columns: Option<Vec<String>>,
    pub speed_bucket: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { columns: None, speed_bucket: DEFAULT_SPEED_BUCKET }
    }
}

/// One row per (instance, non-ego actor).
pub fn extract_parameters(
    instances: &[ScenarioInstance],
    tracks: &[AbstractedTrack],
    road: Option<&RoadModel>,
) -> Result<ParameterTable> {
    extract_parameters_with(instances, tracks, road, &ExtractOptions::default())
}

pub fn extract_parameters_with(
    instances: &[ScenarioInstance],
    tracks: &[AbstractedTrack],
    road: Option<&RoadModel>,
    opts: &ExtractOptions,
) -> Result<ParameterTable> {
    if !(opts.speed_bucket > 0.0) {
        return Err(Error::Statistics("speed bucket width must be positive".into()));
    }
    let mut rows = Vec::new();
    for inst in instances {
        for (role, vehicle) in &inst.actors {
            if role == EGO {
                continue;
            }
            let p = actor_parameters(inst, role, tracks, road)?;
            let keys = vec![inst.pattern_id.clone(), speed_bucket(p["mean_speed"], opts.speed_bucket), vehicle.clone()];
            rows.push((p, keys));
        }
    }
    let columns: Vec<String> = match &opts.columns {
        Some(c) => {
            if let Some(bad) = c.iter().find(|c| !PARAMETER_COLUMNS.contains(&c.as_str())) {
                return Err(Error::Statistics(format!("unknown column `{bad}`")));
            }
            c.clone()
        }
        None => PARAMETER_COLUMNS
            .iter()
            .filter(|c| rows.iter().any(|(p, _)| p[**c].is_finite()))
            .map(|c| c.to_string())
            .collect(),
    };
    let mut table = ParameterTable::new(&columns, &CATEGORICAL_COLUMNS.map(String::from));
    for (p, keys) in rows {
        let values: Vec<f64> = columns.iter().map(|c| p[c.as_str()]).collect();
        table.push_row(&values, keys)?;
    }
    Ok(table)
}

/// Store the defined parameters of each instance's first non-ego actor.
pub fn annotate_instances(
    instances: &mut [ScenarioInstance],
    tracks: &[AbstractedTrack],
    road: Option<&RoadModel>,
) -> Result<()> {
    for inst in instances.iter_mut() {
        let Some(role) = inst.actors.keys().find(|r| r.as_str() != EGO).cloned() else { continue };
        let p = actor_parameters(inst, &role, tracks, road)?;
        inst.parameters = p.into_iter().filter(|(_, v)| v.is_finite()).collect();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bins {
    /// Freedman–Diaconis width, √n bins when the interquartile range is zero.
    #[default]
    Auto,
    Count(usize),
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total_n: u64,
    pub underflow: u64,
    pub overflow: u64,
    pub mean: f64,
    /// Unbiased; zero for a single value.
    pub variance: f64,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Two-pass mean and unbiased variance over sorted input.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let v = sorted(values);
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, dev.iter().sum::<f64>() / (n - 1.0))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const MAX_AUTO_BINS: usize = 1000;

fn even_edges(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    let split = |lo: f64, hi: f64| {
        let mut e: Vec<f64> = (0..=k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect();
        e[k] = hi;
        e
    };
    let e = split(lo, hi);
    if e.windows(2).all(|w| w[0] < w[1]) {
        return e;
    }
    // a span of a few ulps cannot be split; centre a unit range on it
    let mid = lo + (hi - lo) / 2.0;
    split(mid - 0.5, mid + 0.5)
}

/// Bin edges for `values` under `bins`.
pub fn bin_edges(values: &[f64], bins: &Bins) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Statistics("histogram of an empty column".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Statistics("non-finite value in histogram input".into()));
    }
    let v = sorted(values);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let edges = match bins {
        Bins::Edges(e) => e.clone(),
        Bins::Count(0) => return Err(Error::Statistics("bin count must be at least 1".into())),
        Bins::Count(k) => even_edges(lo, hi, *k),
        Bins::Auto if lo == hi => even_edges(lo, hi, 1),
        Bins::Auto => {
            let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
            let k = if iqr > 0.0 {
                let h = 2.0 * iqr / (v.len() as f64).cbrt();
                ((hi - lo) / h).ceil() as usize
            } else {
                (v.len() as f64).sqrt().ceil() as usize
            };
            // never more bins than values
            even_edges(lo, hi, k.clamp(1, v.len().min(MAX_AUTO_BINS)))
        }
    };
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Statistics("bin edges must be finite and strictly increasing".into()));
    }
    Ok(edges)
}

pub fn histogram(values: &[f64], bins: &Bins) -> Result<Histogram> {
    let edges = bin_edges(values, bins)?;
    let k = edges.len() - 1;
    let mut counts = vec![0u64; k];
    let (mut underflow, mut overflow) = (0, 0);
    for &x in values {
        if x < edges[0] {
            underflow += 1;
        } else if x > edges[k] {
            overflow += 1;
        } else if x == edges[k] {
            counts[k - 1] += 1;
        } else {
            counts[edges.partition_point(|&e| e <= x) - 1] += 1;
        }
    }
    let (mean, variance) = mean_variance(values);
    Ok(Histogram { bin_edges: edges, counts, total_n: values.len() as u64, underflow, overflow, mean, variance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Pearson correlation of two equally long columns.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, _) = mean_variance(x);
    let (my, _) = mean_variance(y);
    let mut terms: Vec<(f64, f64, f64)> =
        x.iter().zip(y).map(|(a, b)| ((a - mx) * (b - my), (a - mx).powi(2), (b - my).powi(2))).collect();
    terms.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)).then(p.2.total_cmp(&q.2)));
    let (sxy, sxx, syy) = terms.iter().fold((0.0, 0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2));
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn correlation_matrix<S: AsRef<str>>(table: &ParameterTable, columns: &[S]) -> Result<CorrelationMatrix> {
    if table.len() < 2 {
        return Err(Error::Statistics(format!("correlation needs at least 2 rows, table has {}", table.len())));
    }
    let cols: Vec<&[f64]> = columns.iter().map(|c| table.column(c.as_ref())).collect::<Result<_>>()?;
    for (name, c) in columns.iter().zip(&cols) {
        let (_, var) = mean_variance(c);
        if !(var > 0.0) {
            return Err(Error::ZeroVariance(name.as_ref().to_string()));
        }
    }
    let k = cols.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let r = pearson(cols[i], cols[j]).ok_or_else(|| Error::ZeroVariance(columns[j].as_ref().to_string()))?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { columns: columns.iter().map(|c| c.as_ref().to_string()).collect(), values })
}

/// Group key of row `i`: the selected key values joined by `|`.
fn group_key(keys: &[&[String]], i: usize) -> String {
    keys.iter().map(|k| k[i].as_str()).collect::<Vec<_>>().join("|")
}

/// Per-group histograms of `target`, all sharing the edges computed from the
/// whole column.
pub fn conditional_distribution<S: AsRef<str>>(
    table: &ParameterTable,
    group_by: &[S],
    target: &str,
    bins: &Bins,
) -> Result<BTreeMap<String, Histogram>> {
    let values = table.column(target)?;
    let keys: Vec<&[String]> = group_by.iter().map(|g| table.key_column(g.as_ref())).collect::<Result<_>>()?;
    if table.is_empty() {
        return Ok(BTreeMap::new());
    }
    let edges = Bins::Edges(bin_edges(values, bins)?);
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, &v) in values.iter().enumerate() {
        groups.entry(group_key(&keys, i)).or_default().push(v);
    }
    groups.into_iter().map(|(k, v)| Ok((k, histogram(&v, &edges)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub bins: Bins,
    pub group_by: Vec<String>,
    pub targets: Vec<String>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            bins: Bins::Auto,
            group_by: vec!["scenario_type".into()],
            targets: vec!["lane_change_duration".into(), "mean_speed".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: usize,
    pub dropped_rows: usize,
    pub histograms: BTreeMap<String, Histogram>,
    /// Correlation over every column with nonzero variance.
    pub correlation: Option<CorrelationMatrix>,
    pub constant_columns: Vec<String>,
    /// target → group → histogram
    pub conditional: BTreeMap<String, BTreeMap<String, Histogram>>,
}

pub fn build_report(table: &ParameterTable, opts: &ReportOptions) -> Result<StatsReport> {
    let mut histograms = BTreeMap::new();
    let mut varying = Vec::new();
    let mut constant_columns = Vec::new();
    for name in table.numeric_names() {
        let col = table.column(name)?;
        if col.is_empty() {
            continue;
        }
        histograms.insert(name.to_string(), histogram(col, &opts.bins)?);
        if mean_variance(col).1 > 0.0 {
            varying.push(name.to_string());
        } else {
            constant_columns.push(name.to_string());
        }
    }
    let correlation =
        if table.len() >= 2 && varying.len() >= 2 { Some(correlation_matrix(table, &varying)?) } else { None };
    let mut conditional = BTreeMap::new();
    for target in &opts.targets {
        conditional.insert(target.clone(), conditional_distribution(table, &opts.group_by, target, &opts.bins)?);
    }
    Ok(StatsReport {
        rows: table.len(),
        dropped_rows: table.dropped_rows(),
        histograms,
        correlation,
        constant_columns,
        conditional,
    })
}

//! Stage-wise execution of the full analysis.
//!
//! Each stage reads the files written by the previous one under
//! `<out>/stages/` and writes its own, so running the four stages one by one
//! produces exactly what [`cmd_run`] produces.
//!
//! | stage   | reads                          | writes                                   |
//! |---------|--------------------------------|------------------------------------------|
//! | metrics | trace CSVs                     | `stages/metrics/<metric>_<period>.csv`   |
//! | detect  | visit series                   | `stages/detect/{baseline,anomalies}.csv` |
//! | select  | anomalies, imagery manifest    | `stages/select/selection.txt`            |
//! | diff    | all of the above, rasters      | `report/`                                |

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crate::anomaly::{build_baseline, flag_anomalies, AnomalyReport, BaselineMode, HourBaseline};
use crate::config::{ConfigError, ImageryTrigger, RunConfig};
use crate::fusion::{infer_event, render_report, ReportInputs, Verdict, REPORT_DIR};
use crate::imagery::{
    load_manifest, select_image_pair, utility, Catalog, ImageRecord, ImageryError, SelectionResult,
};
use crate::metrics::{
    detect_stays, rog_per_day, stays_per_day, visits_per_bucket, GridSpec, MetricSeries,
    DAY_SECONDS, HOUR_SECONDS, METRIC_ROG, METRIC_STAYS, METRIC_VISITS,
};
use crate::raster::{
    align, change_stats, diff, greyscale, load_raster, ndvi, ChangeKind, ChangeMap, ChangeStats,
    RasterError, RasterGrid,
};
use crate::trace::{
    group_by_device, parse_traces, partition_by_period, precision_filter, project_points,
    spatial_filter, velocity_filter, Period, Rejection, SchemaConfig, TracePoint, Trajectory,
};

pub const STAGES_DIR: &str = "stages";
pub const LOCK_NAME: &str = ".lock";
pub const DIAGNOSTICS_NAME: &str = "diagnostics.txt";

/// Metrics in stage-file order, with their bucket length.
pub const METRICS: [(&str, i64); 3] = [
    (METRIC_VISITS, HOUR_SECONDS),
    (METRIC_STAYS, DAY_SECONDS),
    (METRIC_ROG, DAY_SECONDS),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Lock,
    Metrics,
    Detect,
    Select,
    Diff,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Lock => "lock",
            Stage::Metrics => "metrics",
            Stage::Detect => "detect",
            Stage::Select => "select",
            Stage::Diff => "diff",
        }
    }

    fn dir(&self, out: &Path) -> PathBuf {
        out.join(STAGES_DIR).join(self.label())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Validation,
    MissingData,
    Other,
}

impl FailureKind {
    pub fn label(&self) -> &'static str {
        match self {
            FailureKind::Validation => "validation",
            FailureKind::MissingData => "missing-data",
            FailureKind::Other => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation => 2,
            FailureKind::MissingData => 3,
            FailureKind::Other => 1,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::new(Stage::Config, FailureKind::Validation, e.to_string())
    }
}

fn other(stage: Stage, e: impl fmt::Display) -> PipelineError {
    PipelineError::new(stage, FailureKind::Other, e.to_string())
}

fn io_err(stage: Stage, path: &Path, e: std::io::Error) -> PipelineError {
    other(stage, format!("{}: {e}", path.display()))
}

fn imagery_err(stage: Stage, e: ImageryError) -> PipelineError {
    let kind = match e {
        ImageryError::NoBeforeImage | ImageryError::NoAfterImage | ImageryError::Manifest { .. } => {
            FailureKind::MissingData
        }
        ImageryError::InvalidInput(_) | ImageryError::Geo(_) => FailureKind::Validation,
        ImageryError::Io(_) => FailureKind::Other,
    };
    PipelineError::new(stage, kind, e.to_string())
}

fn raster_err(e: RasterError) -> PipelineError {
    let kind = match e {
        RasterError::NoOverlap | RasterError::EmptyChangeMap => FailureKind::MissingData,
        RasterError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
            FailureKind::MissingData
        }
        RasterError::Io(_) => FailureKind::Other,
        _ => FailureKind::Validation,
    };
    PipelineError::new(Stage::Diff, kind, e.to_string())
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(out_dir).map_err(|e| io_err(Stage::Lock, out_dir, e))?;
        let path = out_dir.join(LOCK_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    other(
                        Stage::Lock,
                        format!("{} exists; another run is using this output directory", path.display()),
                    )
                } else {
                    io_err(Stage::Lock, &path, e)
                }
            })?;
        writeln!(f, "pid={}", std::process::id()).map_err(|e| io_err(Stage::Lock, &path, e))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(stage: Stage, path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(stage, parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(stage, path, e))
}

/// Empties a stage directory so no file from an earlier run survives.
fn reset_dir(stage: Stage, dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(stage, dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(stage, dir, e))
}

fn open_input(stage: Stage, path: &Path) -> Result<BufReader<File>, PipelineError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::new(
            stage,
            FailureKind::MissingData,
            format!("missing stage input {}", path.display()),
        )),
        Err(e) => Err(io_err(stage, path, e)),
    }
}

fn read_kv(stage: Stage, path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = std::io::read_to_string(open_input(stage, path)?).map_err(|e| io_err(stage, path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn kv_get<'a>(
    stage: Stage,
    path: &Path,
    kv: &'a BTreeMap<String, String>,
    key: &str,
) -> Result<&'a str, PipelineError> {
    kv.get(key).map(String::as_str).ok_or_else(|| {
        other(stage, format!("{} lacks `{key}`", path.display()))
    })
}

fn kv_num(stage: Stage, path: &Path, kv: &BTreeMap<String, String>, key: &str) -> Result<f64, PipelineError> {
    let v = kv_get(stage, path, kv, key)?;
    v.parse()
        .map_err(|_| other(stage, format!("{}: `{key}` is not a number", path.display())))
}

pub fn series_file(out: &Path, metric: &str, period: Period) -> PathBuf {
    Stage::Metrics.dir(out).join(format!("{metric}_{}.csv", period.label()))
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub rows_read: usize,
    pub rejected: usize,
    pub precision_dropped: usize,
    pub outside_roi: usize,
    pub velocity_dropped: usize,
    pub outside_periods: usize,
    pub devices: usize,
    pub points_kept: usize,
}

impl IngestStats {
    pub fn to_text(&self) -> String {
        format!(
            "rows_read={}\nrejected={}\nprecision_dropped={}\noutside_roi={}\nvelocity_dropped={}\noutside_periods={}\ndevices={}\npoints_kept={}\n",
            self.rows_read,
            self.rejected,
            self.precision_dropped,
            self.outside_roi,
            self.velocity_dropped,
            self.outside_periods,
            self.devices,
            self.points_kept
        )
    }
}

/// Cleaned trajectories, split by period.
#[derive(Debug, Clone, Default)]
pub struct PreparedTraces {
    pub before: Vec<Trajectory>,
    pub during: Vec<Trajectory>,
    pub after: Vec<Trajectory>,
    pub stats: IngestStats,
    /// `(trace file as configured, rejection)`.
    pub rejects: Vec<(PathBuf, Rejection)>,
}

impl PreparedTraces {
    pub fn get(&self, p: Period) -> &[Trajectory] {
        match p {
            Period::Before => &self.before,
            Period::During => &self.during,
            Period::After => &self.after,
        }
    }
}

/// Project, clip to the ROI, velocity-filter per device, then split by
/// period. Points are clipped before the velocity filter.
pub fn prepare_points(points: Vec<TracePoint>, cfg: &RunConfig) -> Result<PreparedTraces, PipelineError> {
    let stage = Stage::Metrics;
    let mut stats = IngestStats::default();
    let mut points = points;
    project_points(&mut points, cfg.zone).map_err(|e| other(stage, e))?;
    if let Some(max) = cfg.max_precision_m {
        let n = points.len();
        points = precision_filter(points, max);
        stats.precision_dropped = n - points.len();
    }
    let n = points.len();
    let clipped = spatial_filter(&points, &cfg.roi()).map_err(|e| other(stage, e))?;
    stats.outside_roi = n - clipped.len();

    let mut kept = Vec::with_capacity(clipped.len());
    for traj in group_by_device(clipped) {
        let filtered = velocity_filter(&traj, cfg.max_speed_mps).map_err(|e| other(stage, e))?;
        stats.velocity_dropped += traj.len() - filtered.len();
        kept.extend(filtered.into_points());
    }

    let parts = partition_by_period(&kept, &cfg.periods);
    stats.outside_periods = parts.discarded;
    let mut out = PreparedTraces::default();
    let mut devices = std::collections::BTreeSet::new();
    for p in Period::ALL {
        let trajs = group_by_device(parts.get(p).to_vec());
        for t in &trajs {
            devices.insert(t.device_id().to_string());
            stats.points_kept += t.len();
        }
        match p {
            Period::Before => out.before = trajs,
            Period::During => out.during = trajs,
            Period::After => out.after = trajs,
        }
    }
    stats.devices = devices.len();
    out.stats = stats;
    Ok(out)
}

/// Parses every configured trace file and runs [`prepare_points`].
pub fn ingest(cfg: &RunConfig) -> Result<PreparedTraces, PipelineError> {
    let stage = Stage::Metrics;
    // No upper bound tied to the clock: later rows fall outside the periods.
    let schema = SchemaConfig {
        latest: chrono::DateTime::<chrono::Utc>::MAX_UTC,
        ..SchemaConfig::default()
    };
    let mut points = Vec::new();
    let mut rejects = Vec::new();
    let mut rows_read = 0;
    for rel in &cfg.traces {
        let path = cfg.resolve(rel);
        let f = File::open(&path).map_err(|e| {
            let kind = if e.kind() == std::io::ErrorKind::NotFound {
                FailureKind::MissingData
            } else {
                FailureKind::Other
            };
            PipelineError::new(stage, kind, format!("{}: {e}", path.display()))
        })?;
        let outcome = parse_traces(BufReader::new(f), &schema)
            .map_err(|e| PipelineError::new(stage, FailureKind::Validation, format!("{}: {e}", path.display())))?;
        rows_read += outcome.rows_read;
        rejects.extend(outcome.rejects.into_iter().map(|r| (rel.clone(), r)));
        points.extend(outcome.points);
    }
    let mut prepared = prepare_points(points, cfg)?;
    prepared.stats.rows_read = rows_read;
    prepared.stats.rejected = rejects.len();
    prepared.rejects = rejects;
    Ok(prepared)
}

/// Hourly visits, daily stays and daily radius of gyration for every period,
/// in [`METRICS`] then period order.
pub fn compute_metrics(prepared: &PreparedTraces, cfg: &RunConfig) -> Result<Vec<MetricSeries>, PipelineError> {
    let stage = Stage::Metrics;
    let grid = GridSpec::new(cfg.roi(), cfg.grid_rows, cfg.grid_cols).map_err(|e| other(stage, e))?;
    let mut visits = Vec::new();
    let mut stays = Vec::new();
    let mut rog = Vec::new();
    for p in Period::ALL {
        let range = cfg.periods.get(p);
        let trajs = prepared.get(p);
        visits.push(
            visits_per_bucket(trajs, &grid, HOUR_SECONDS, range, p.label()).map_err(|e| other(stage, e))?,
        );
        let mut all = Vec::new();
        for t in trajs {
            all.extend(detect_stays(t, &cfg.stays).map_err(|e| other(stage, e))?);
        }
        stays.push(stays_per_day(&all, range, p.label()));
        rog.push(rog_per_day(trajs, range, p.label()).map_err(|e| other(stage, e))?);
    }
    Ok(visits.into_iter().chain(stays).chain(rog).collect())
}

#[derive(Debug, Clone)]
pub struct MetricsOutcome {
    pub stats: IngestStats,
    pub files: Vec<PathBuf>,
}

pub fn stage_metrics(cfg: &RunConfig, out: &Path) -> Result<MetricsOutcome, PipelineError> {
    let stage = Stage::Metrics;
    let prepared = ingest(cfg)?;
    let series = compute_metrics(&prepared, cfg)?;
    let dir = stage.dir(out);
    reset_dir(stage, &dir)?;
    let mut files = Vec::new();
    for s in &series {
        let period = Period::from_label(&s.period).expect("series period label");
        let path = series_file(out, &s.metric, period);
        write_file(stage, &path, &s.to_csv_bytes(true))?;
        files.push(path);
    }
    write_file(stage, &dir.join("ingest.txt"), prepared.stats.to_text().as_bytes())?;
    let rejects: String = prepared
        .rejects
        .iter()
        .map(|(file, r)| format!("file={} {r}\n", file.display()))
        .collect();
    write_file(stage, &dir.join("rejects.txt"), rejects.as_bytes())?;
    Ok(MetricsOutcome {
        stats: prepared.stats,
        files,
    })
}

/// Reads one metric series written by the metrics stage.
pub fn read_series(stage: Stage, out: &Path, metric: &str, bucket_seconds: i64, period: Period) -> Result<MetricSeries, PipelineError> {
    let path = series_file(out, metric, period);
    let mut s = MetricSeries::read_csv(open_input(stage, &path)?, bucket_seconds)
        .map_err(|e| other(stage, format!("{}: {e}", path.display())))?;
    // An empty series carries no metric or period column to read back.
    s.metric = metric.to_string();
    s.period = period.label().to_string();
    Ok(s)
}

// ----------------------------------------------------------------- detect

fn baseline_label(cfg: &RunConfig) -> String {
    cfg.baseline_periods
        .iter()
        .map(|p| p.label())
        .collect::<Vec<_>>()
        .join("+")
}

fn mode_label(mode: BaselineMode) -> &'static str {
    match mode {
        BaselineMode::HourOfDay => "hour-of-day",
        BaselineMode::Pooled => "pooled",
    }
}

/// Baseline over the configured baseline periods and the scored during
/// period of the visits series.
pub fn detect_anomalies(
    visits: &BTreeMap<Period, MetricSeries>,
    cfg: &RunConfig,
) -> Result<(HourBaseline, AnomalyReport), PipelineError> {
    let stage = Stage::Detect;
    let base: Vec<&MetricSeries> = cfg
        .baseline_periods
        .iter()
        .filter_map(|p| visits.get(p))
        .collect();
    let baseline = build_baseline(&base, &cfg.baseline_intervals(), cfg.baseline_mode)
        .map_err(|e| other(stage, e))?;
    let during = visits
        .get(&Period::During)
        .ok_or_else(|| other(stage, "no during-period visit series"))?;
    let report = flag_anomalies(during, &baseline, cfg.z_threshold, &baseline_label(cfg))
        .map_err(|e| other(stage, e))?;
    Ok((baseline, report))
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub report: AnomalyReport,
}

pub fn stage_detect(cfg: &RunConfig, out: &Path) -> Result<DetectOutcome, PipelineError> {
    let stage = Stage::Detect;
    let mut visits = BTreeMap::new();
    let mut needed: Vec<Period> = cfg.baseline_periods.clone();
    needed.push(Period::During);
    for p in needed {
        visits.insert(p, read_series(stage, out, METRIC_VISITS, HOUR_SECONDS, p)?);
    }
    let (baseline, report) = detect_anomalies(&visits, cfg)?;
    let dir = stage.dir(out);
    reset_dir(stage, &dir)?;
    let mut buf = Vec::new();
    baseline.write_csv(&mut buf, true).map_err(|e| other(stage, e))?;
    write_file(stage, &dir.join("baseline.csv"), &buf)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf, true).map_err(|e| other(stage, e))?;
    write_file(stage, &dir.join("anomalies.csv"), &buf)?;
    let meta = format!(
        "metric={}\nthreshold={}\nbaseline_period={}\ntest_period={}\nbaseline_mode={}\n",
        report.metric,
        report.threshold,
        report.baseline_period,
        report.test_period,
        mode_label(cfg.baseline_mode)
    );
    write_file(stage, &dir.join("detect.txt"), meta.as_bytes())?;
    Ok(DetectOutcome { report })
}

/// Baseline and anomaly report written by the detect stage.
pub fn read_detection(stage: Stage, out: &Path) -> Result<(HourBaseline, AnomalyReport), PipelineError> {
    let dir = Stage::Detect.dir(out);
    let meta_path = dir.join("detect.txt");
    let meta = read_kv(stage, &meta_path)?;
    let mode = match kv_get(stage, &meta_path, &meta, "baseline_mode")? {
        "pooled" => BaselineMode::Pooled,
        _ => BaselineMode::HourOfDay,
    };
    let path = dir.join("baseline.csv");
    let baseline = HourBaseline::read_csv(open_input(stage, &path)?, mode)
        .map_err(|e| other(stage, format!("{}: {e}", path.display())))?;
    let path = dir.join("anomalies.csv");
    let report = AnomalyReport::read_csv(
        open_input(stage, &path)?,
        kv_get(stage, &meta_path, &meta, "metric")?,
        kv_num(stage, &meta_path, &meta, "threshold")?,
        kv_get(stage, &meta_path, &meta, "baseline_period")?,
        kv_get(stage, &meta_path, &meta, "test_period")?,
    )
    .map_err(|e| other(stage, format!("{}: {e}", path.display())))?;
    Ok((baseline, report))
}

// ----------------------------------------------------------------- select

#[derive(Debug, Clone, PartialEq)]
pub enum SelectOutcome {
    Selected(SelectionResult),
    Skipped(String),
}

fn selection_path(out: &Path) -> PathBuf {
    Stage::Select.dir(out).join("selection.txt")
}

pub fn stage_select(cfg: &RunConfig, out: &Path) -> Result<SelectOutcome, PipelineError> {
    let stage = Stage::Select;
    let (_, report) = read_detection(stage, out)?;
    let dir = stage.dir(out);
    let manifest_path = cfg.resolve(&cfg.manifest);
    let catalog = load_manifest(&manifest_path).map_err(|e| imagery_err(stage, e))?;
    reset_dir(stage, &dir)?;
    let rejects: String = catalog.rejects.iter().map(|r| format!("{r}\n")).collect();
    write_file(stage, &dir.join("manifest_rejects.txt"), rejects.as_bytes())?;

    if cfg.trigger == ImageryTrigger::OnAnomaly && report.flag_count() == 0 {
        let reason = format!("no flagged {} buckets; imagery not requested", report.test_period);
        write_file(stage, &selection_path(out), format!("status=skipped\nreason={reason}\n").as_bytes())?;
        return Ok(SelectOutcome::Skipped(reason));
    }
    let sel = select_image_pair(&catalog.records, &cfg.event_spec(), &cfg.selection_params())
        .map_err(|e| imagery_err(stage, e))?;
    let text = format!(
        "status=selected\nbefore={}\nafter={}\nu_before={}\nu_after={}\ncandidates_considered={}\nutility_form={}\n",
        sel.before.image_id,
        sel.after.image_id,
        sel.u_before,
        sel.u_after,
        sel.candidates_considered,
        cfg.utility_form.label()
    );
    write_file(stage, &selection_path(out), text.as_bytes())?;
    Ok(SelectOutcome::Selected(sel))
}

fn catalog_record<'a>(stage: Stage, catalog: &'a Catalog, id: &str) -> Result<&'a ImageRecord, PipelineError> {
    catalog.get(id).ok_or_else(|| {
        PipelineError::new(
            stage,
            FailureKind::MissingData,
            format!("image `{id}` is not in the manifest"),
        )
    })
}

fn read_selection(out: &Path, catalog: &Catalog) -> Result<SelectOutcome, PipelineError> {
    let stage = Stage::Diff;
    let path = selection_path(out);
    let kv = read_kv(stage, &path)?;
    if kv_get(stage, &path, &kv, "status")? == "skipped" {
        return Ok(SelectOutcome::Skipped(kv.get("reason").cloned().unwrap_or_default()));
    }
    Ok(SelectOutcome::Selected(SelectionResult {
        before: catalog_record(stage, catalog, kv_get(stage, &path, &kv, "before")?)?.clone(),
        after: catalog_record(stage, catalog, kv_get(stage, &path, &kv, "after")?)?.clone(),
        u_before: kv_num(stage, &path, &kv, "u_before")?,
        u_after: kv_num(stage, &path, &kv, "u_after")?,
        candidates_considered: kv_num(stage, &path, &kv, "candidates_considered")? as usize,
    }))
}

// ------------------------------------------------------------------- diff

/// Image ids that replace the stored selection.
#[derive(Debug, Clone, Default)]
pub struct DiffOverrides {
    pub before: Option<String>,
    pub after: Option<String>,
}

/// Greyscale and, when both images carry NIR and R, NDVI change maps over
/// the ROI.
pub fn change_maps(
    before: &RasterGrid,
    after: &RasterGrid,
    cfg: &RunConfig,
) -> Result<Vec<(ChangeMap, ChangeStats)>, RasterError> {
    let (b, a) = align(before, after, &cfg.roi())?;
    let mut out = Vec::new();
    let gm = diff(&greyscale(&b)?, &greyscale(&a)?, ChangeKind::Greyscale)?;
    let gs = change_stats(&gm, cfg.greyscale_threshold)?;
    out.push((gm, gs));
    let has_ndvi = |g: &RasterGrid| g.band("NIR").is_some() && g.band("R").is_some();
    if has_ndvi(&b) && has_ndvi(&a) {
        let nm = diff(&ndvi(&b)?, &ndvi(&a)?, ChangeKind::Ndvi)?;
        let ns = change_stats(&nm, cfg.ndvi_threshold)?;
        out.push((nm, ns));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DiffOutcome {
    pub verdict: Verdict,
    pub report_dir: PathBuf,
    pub stats: Vec<ChangeStats>,
    pub flagged: usize,
}

pub fn stage_diff(cfg: &RunConfig, out: &Path, overrides: &DiffOverrides) -> Result<DiffOutcome, PipelineError> {
    let stage = Stage::Diff;
    let mut series = Vec::new();
    for (metric, secs) in METRICS {
        for p in Period::ALL {
            series.push(read_series(stage, out, metric, secs, p)?);
        }
    }
    let (baseline, report) = read_detection(stage, out)?;
    let event = cfg.event_spec();

    let catalog_for = || load_manifest(&cfg.resolve(&cfg.manifest)).map_err(|e| imagery_err(stage, e));
    let mut notes = Vec::new();
    let selection = if overrides.before.is_some() || overrides.after.is_some() {
        let catalog = catalog_for()?;
        let stored = match read_selection(out, &catalog) {
            Ok(SelectOutcome::Selected(s)) => Some(s),
            _ => None,
        };
        let pick = |id: &Option<String>, fallback: Option<&ImageRecord>, role: &str| {
            match (id, fallback) {
                (Some(id), _) => catalog_record(stage, &catalog, id).cloned(),
                (None, Some(r)) => Ok(r.clone()),
                (None, None) => Err(PipelineError::new(
                    stage,
                    FailureKind::MissingData,
                    format!("no {role} image selected or given"),
                )),
            }
        };
        let before = pick(&overrides.before, stored.as_ref().map(|s| &s.before), "before")?;
        let after = pick(&overrides.after, stored.as_ref().map(|s| &s.after), "after")?;
        let u = |img: &ImageRecord| {
            utility(img, &event, cfg.phi, cfg.utility_form).map_err(|e| imagery_err(stage, e))
        };
        notes.push("image pair given on the command line".to_string());
        Some((
            SelectionResult {
                u_before: u(&before)?,
                u_after: u(&after)?,
                before,
                after,
                candidates_considered: 0,
            },
            catalog,
        ))
    } else {
        let path = selection_path(out);
        let kv = read_kv(stage, &path)?;
        if kv.get("status").map(String::as_str) == Some("skipped") {
            notes.push(format!("imagery skipped: {}", kv.get("reason").cloned().unwrap_or_default()));
            None
        } else {
            let catalog = catalog_for()?;
            match read_selection(out, &catalog)? {
                SelectOutcome::Selected(s) => Some((s, catalog)),
                SelectOutcome::Skipped(_) => None,
            }
        }
    };

    let mut maps = Vec::new();
    let mut stats = Vec::new();
    if let Some((sel, catalog)) = &selection {
        let load = |r: &ImageRecord| load_raster(&catalog.resolve(r), &r.band_layout).map_err(raster_err);
        let before = load(&sel.before)?;
        let after = load(&sel.after)?;
        for (m, s) in change_maps(&before, &after, cfg).map_err(raster_err)? {
            maps.push(m);
            stats.push(s);
        }
    }

    let inference = infer_event(Some(&report), &stats, cfg.min_changed_fraction);
    let inputs = ReportInputs {
        event: &event,
        inference: &inference,
        series: &series,
        baseline: &baseline,
        band_level: cfg.band_level,
        selection: selection.as_ref().map(|(s, _)| s),
        change_maps: &maps,
        notes: &notes,
    };
    let report_dir = out.join(REPORT_DIR);
    if report_dir.exists() {
        fs::remove_dir_all(&report_dir).map_err(|e| io_err(stage, &report_dir, e))?;
    }
    let report_dir = render_report(&inputs, out).map_err(|e| other(stage, e))?;
    Ok(DiffOutcome {
        verdict: inference.verdict,
        report_dir,
        stats,
        flagged: report.flag_count(),
    })
}

// --------------------------------------------------------------- commands

/// Runs `f` under the output-directory lock. A failure is recorded in
/// `<out>/diagnostics.txt`; a success removes any stale one.
fn locked<T>(out: &Path, f: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    let lock = RunLock::acquire(out)?;
    let result = f();
    let diag = out.join(DIAGNOSTICS_NAME);
    match &result {
        Ok(_) => {
            let _ = fs::remove_file(&diag);
        }
        Err(e) => {
            let text = format!(
                "stage={}\nstatus={}\nexit_code={}\nmessage={}\n",
                e.stage,
                e.kind.label(),
                e.exit_code(),
                e.message
            );
            let _ = fs::write(&diag, text);
        }
    }
    drop(lock);
    result
}

pub fn cmd_metrics(cfg: &RunConfig) -> Result<MetricsOutcome, PipelineError> {
    let out = cfg.output_dir();
    locked(&out, || stage_metrics(cfg, &out))
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<DetectOutcome, PipelineError> {
    let out = cfg.output_dir();
    locked(&out, || stage_detect(cfg, &out))
}

pub fn cmd_select(cfg: &RunConfig) -> Result<SelectOutcome, PipelineError> {
    let out = cfg.output_dir();
    locked(&out, || stage_select(cfg, &out))
}

pub fn cmd_diff(cfg: &RunConfig, overrides: &DiffOverrides) -> Result<DiffOutcome, PipelineError> {
    let out = cfg.output_dir();
    locked(&out, || stage_diff(cfg, &out, overrides))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: MetricsOutcome,
    pub detect: DetectOutcome,
    pub select: SelectOutcome,
    pub diff: DiffOutcome,
}

/// The four stages in order, under one lock.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    let out = cfg.output_dir();
    locked(&out, || {
        Ok(RunOutcome {
            metrics: stage_metrics(cfg, &out)?,
            detect: stage_detect(cfg, &out)?,
            select: stage_select(cfg, &out)?,
            diff: stage_diff(cfg, &out, &DiffOverrides::default())?,
        })
    })
}

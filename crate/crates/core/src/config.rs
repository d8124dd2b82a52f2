//! Run configuration: one `key = value` pair per line with flat dotted keys.
//! `#` starts a comment line. Relative paths resolve against the directory
//! of the config file.
//!
//! ```text
//! event.name = muskogee
//! event.time = 2020-05-15T14:00:00Z
//! event.lon = -95.37
//! event.lat = 35.75
//! periods.before = 2020-04-17T00:00:00Z/2020-05-15T00:00:00Z
//! periods.during = 2020-05-15T00:00:00Z/2020-05-16T00:00:00Z
//! periods.after = 2020-05-16T00:00:00Z/2020-05-23T00:00:00Z
//! inputs.traces = traces.csv
//! inputs.manifest = imagery/manifest.jsonl
//! ```
//!
//! Every other key is optional; see [`KEYS`] for the full list.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;

use crate::anomaly::{BaselineMode, DEFAULT_Z_THRESHOLD};
use crate::format::{format_timestamp, parse_timestamp};
use crate::fusion::{DEFAULT_BAND_LEVEL, DEFAULT_MIN_CHANGED_FRACTION};
use crate::geo::{bbox_from_centroid, project_to_utm, BoundingBox, GeoPoint};
use crate::imagery::{EventSpec, SelectionParams, UtilityForm, DEFAULT_CLOUD_MAX, DEFAULT_PHI};
use crate::metrics::StayParams;
use crate::raster::{DEFAULT_GREYSCALE_THRESHOLD, DEFAULT_NDVI_THRESHOLD};
use crate::trace::{Period, PeriodPartition, TimeInterval, DEFAULT_MAX_SPEED_MPS};

pub const KEYS: &[&str] = &[
    "event.name",
    "event.time",
    "event.lon",
    "event.lat",
    "event.roi_side_m",
    "event.zone",
    "periods.before",
    "periods.during",
    "periods.after",
    "inputs.traces",
    "inputs.manifest",
    "output.dir",
    "filter.max_speed_mps",
    "filter.max_precision_m",
    "stays.min_duration_min",
    "stays.max_distance_m",
    "grid.rows",
    "grid.cols",
    "anomaly.z_threshold",
    "anomaly.baseline_periods",
    "anomaly.baseline_mode",
    "anomaly.band_level",
    "imagery.phi",
    "imagery.cloud_max",
    "imagery.utility_form",
    "imagery.trigger",
    "raster.greyscale_threshold",
    "raster.ndvi_threshold",
    "fusion.min_changed_fraction",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Field { field, .. } => Some(field),
            _ => None,
        }
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// When imagery is pulled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageryTrigger {
    /// Only once the mobility stage has flagged at least one bucket.
    OnAnomaly,
    Always,
}

impl ImageryTrigger {
    pub fn label(&self) -> &'static str {
        match self {
            ImageryTrigger::OnAnomaly => "on-anomaly",
            ImageryTrigger::Always => "always",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub base_dir: PathBuf,
    pub event_name: String,
    pub event_time: DateTime<Utc>,
    pub centroid: GeoPoint,
    pub roi_side_m: f64,
    pub zone: u8,
    pub periods: PeriodPartition,
    /// As written in the file; see [`RunConfig::resolve`].
    pub traces: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub max_speed_mps: f64,
    pub max_precision_m: Option<f64>,
    pub stays: StayParams,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub z_threshold: f64,
    pub baseline_periods: Vec<Period>,
    pub baseline_mode: BaselineMode,
    pub band_level: f64,
    pub phi: f64,
    pub cloud_max: f64,
    pub utility_form: UtilityForm,
    pub trigger: ImageryTrigger,
    pub greyscale_threshold: f64,
    pub ndvi_threshold: f64,
    pub min_changed_fraction: f64,
}

impl RunConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn roi(&self) -> BoundingBox {
        let c = project_to_utm(self.centroid, self.zone).expect("validated centroid");
        bbox_from_centroid(c, self.roi_side_m).expect("validated side")
    }

    pub fn event_spec(&self) -> EventSpec {
        EventSpec {
            name: self.event_name.clone(),
            event_time: self.event_time,
            roi: self.roi(),
        }
    }

    pub fn selection_params(&self) -> SelectionParams {
        SelectionParams {
            cloud_max: self.cloud_max,
            phi: self.phi,
            form: self.utility_form,
        }
    }

    /// Baseline intervals in config order.
    pub fn baseline_intervals(&self) -> Vec<TimeInterval> {
        self.baseline_periods
            .iter()
            .map(|p| *self.periods.get(*p))
            .collect()
    }

    /// Serialises back to the config grammar. Parsing the result with the
    /// same base directory yields an identical config.
    pub fn to_text(&self) -> String {
        let iv = |p: Period| {
            let i = self.periods.get(p);
            format!("{}/{}", format_timestamp(&i.start), format_timestamp(&i.end))
        };
        let paths = |v: &[PathBuf]| {
            v.iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv: Vec<(&str, String)> = vec![
            ("event.name", self.event_name.clone()),
            ("event.time", format_timestamp(&self.event_time)),
            ("event.lon", self.centroid.lon.to_string()),
            ("event.lat", self.centroid.lat.to_string()),
            ("event.roi_side_m", self.roi_side_m.to_string()),
            ("event.zone", self.zone.to_string()),
            ("periods.before", iv(Period::Before)),
            ("periods.during", iv(Period::During)),
            ("periods.after", iv(Period::After)),
            ("inputs.traces", paths(&self.traces)),
            ("inputs.manifest", self.manifest.to_string_lossy().into_owned()),
            ("output.dir", self.out_dir.to_string_lossy().into_owned()),
            ("filter.max_speed_mps", self.max_speed_mps.to_string()),
        ];
        if let Some(p) = self.max_precision_m {
            kv.push(("filter.max_precision_m", p.to_string()));
        }
        kv.extend([
            (
                "stays.min_duration_min",
                (self.stays.min_duration.num_milliseconds() as f64 / 60_000.0).to_string(),
            ),
            ("stays.max_distance_m", self.stays.max_distance_m.to_string()),
            ("grid.rows", self.grid_rows.to_string()),
            ("grid.cols", self.grid_cols.to_string()),
            ("anomaly.z_threshold", self.z_threshold.to_string()),
            (
                "anomaly.baseline_periods",
                self.baseline_periods
                    .iter()
                    .map(|p| p.label())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "anomaly.baseline_mode",
                match self.baseline_mode {
                    BaselineMode::HourOfDay => "hour-of-day".into(),
                    BaselineMode::Pooled => "pooled".into(),
                },
            ),
            ("anomaly.band_level", self.band_level.to_string()),
            ("imagery.phi", self.phi.to_string()),
            ("imagery.cloud_max", self.cloud_max.to_string()),
            ("imagery.utility_form", self.utility_form.label().into()),
            ("imagery.trigger", self.trigger.label().into()),
            ("raster.greyscale_threshold", self.greyscale_threshold.to_string()),
            ("raster.ndvi_threshold", self.ndvi_threshold.to_string()),
            ("fusion.min_changed_fraction", self.min_changed_fraction.to_string()),
        ]);
        kv.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(field_err(k, "unknown key"));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(field_err(k, "given more than once"));
        }
    }
    Ok(map)
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        match self.raw(key) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(field_err(key, "required")),
        }
    }

    fn number(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| field_err(key, format!("not a number: {v}"))),
        }
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let x = self.number(key, default)?;
        if x > 0.0 {
            Ok(x)
        } else {
            Err(field_err(key, format!("must be positive, got {x}")))
        }
    }

    fn count(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        let n = match self.raw(key) {
            None => default,
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| field_err(key, format!("not a whole number: {v}")))?,
        };
        if n == 0 {
            return Err(field_err(key, "must be positive"));
        }
        Ok(n)
    }

    fn instant(&self, key: &str) -> Result<DateTime<Utc>, ConfigError> {
        let v = self.required(key)?;
        parse_timestamp(v).ok_or_else(|| field_err(key, format!("not an ISO-8601 instant: {v}")))
    }

    fn interval(&self, key: &str) -> Result<TimeInterval, ConfigError> {
        let v = self.required(key)?;
        let (a, b) = v
            .split_once('/')
            .ok_or_else(|| field_err(key, "expected `start/end`"))?;
        let start = parse_timestamp(a).ok_or_else(|| field_err(key, format!("bad start {a}")))?;
        let end = parse_timestamp(b).ok_or_else(|| field_err(key, format!("bad end {b}")))?;
        TimeInterval::new(start, end).map_err(|e| field_err(key, e.to_string()))
    }
}

fn zone_for_lon(lon: f64) -> u8 {
    (((lon + 180.0) / 6.0).floor() as i64).clamp(0, 59) as u8 + 1
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    parse_config_with(text, base_dir, &[])
}

/// Like [`parse_config`], with `overrides` replacing or adding keys before
/// validation.
pub fn parse_config_with(
    text: &str,
    base_dir: &Path,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut map = parse_pairs(text)?;
    for (k, v) in overrides {
        if !KEYS.contains(&k.as_str()) {
            return Err(field_err(k, "unknown key"));
        }
        map.insert(k.clone(), v.trim().to_string());
    }
    let f = Fields { map };

    let event_name = f.required("event.name")?.to_string();
    let event_time = f.instant("event.time")?;
    let lon = f.number("event.lon", f64::NAN)?;
    let lat = f.number("event.lat", f64::NAN)?;
    f.required("event.lon")?;
    f.required("event.lat")?;
    let centroid = GeoPoint::new(lon, lat).map_err(|e| field_err("event.lat", e.to_string()))?;
    let zone = match f.raw("event.zone") {
        None => zone_for_lon(lon),
        Some(v) => v
            .parse::<u8>()
            .ok()
            .filter(|z| (1..=60).contains(z))
            .ok_or_else(|| field_err("event.zone", format!("not a UTM zone: {v}")))?,
    };
    project_to_utm(centroid, zone).map_err(|e| field_err("event.zone", e.to_string()))?;
    let roi_side_m = f.positive("event.roi_side_m", 1000.0)?;

    let periods = PeriodPartition::new(
        f.interval("periods.before")?,
        f.interval("periods.during")?,
        f.interval("periods.after")?,
    )
    .map_err(|e| field_err("periods", e.to_string()))?;

    let traces: Vec<PathBuf> = f
        .required("inputs.traces")?
        .split(',')
        .map(|s| PathBuf::from(s.trim()))
        .collect();
    for t in &traces {
        if !base_dir.join(t).is_file() {
            return Err(field_err(
                "inputs.traces",
                format!("{} does not exist", base_dir.join(t).display()),
            ));
        }
    }
    let manifest = PathBuf::from(f.required("inputs.manifest")?);
    if !base_dir.join(&manifest).is_file() {
        return Err(field_err(
            "inputs.manifest",
            format!("{} does not exist", base_dir.join(&manifest).display()),
        ));
    }
    let out_dir = PathBuf::from(f.raw("output.dir").unwrap_or("out"));

    let max_precision_m = match f.raw("filter.max_precision_m") {
        None => None,
        Some(_) => Some(f.positive("filter.max_precision_m", 0.0)?),
    };
    let stay_minutes = f.positive("stays.min_duration_min", 15.0)?;
    let stays = StayParams {
        min_duration: Duration::milliseconds((stay_minutes * 60_000.0).round() as i64),
        max_distance_m: f.positive("stays.max_distance_m", 100.0)?,
    };

    let baseline_periods = match f.raw("anomaly.baseline_periods") {
        None => vec![Period::Before],
        Some(v) => {
            let mut out = Vec::new();
            for name in v.split(',').map(str::trim) {
                let p = Period::from_label(name).ok_or_else(|| {
                    field_err("anomaly.baseline_periods", format!("unknown period {name}"))
                })?;
                if p == Period::During {
                    return Err(field_err(
                        "anomaly.baseline_periods",
                        "the during period is the one under test",
                    ));
                }
                if !out.contains(&p) {
                    out.push(p);
                }
            }
            out
        }
    };
    let baseline_mode = match f.raw("anomaly.baseline_mode").unwrap_or("hour-of-day") {
        "hour-of-day" => BaselineMode::HourOfDay,
        "pooled" => BaselineMode::Pooled,
        v => return Err(field_err("anomaly.baseline_mode", format!("expected hour-of-day or pooled, got {v}"))),
    };
    let band_level = f.positive("anomaly.band_level", DEFAULT_BAND_LEVEL)?;
    if band_level >= 1.0 {
        return Err(field_err("anomaly.band_level", "must be below 1"));
    }

    let utility_form = match f.raw("imagery.utility_form") {
        None => UtilityForm::Calibrated,
        Some(v) => UtilityForm::parse(v).ok_or_else(|| {
            field_err("imagery.utility_form", format!("expected calibrated or printed, got {v}"))
        })?,
    };
    let trigger = match f.raw("imagery.trigger").unwrap_or("on-anomaly") {
        "on-anomaly" => ImageryTrigger::OnAnomaly,
        "always" => ImageryTrigger::Always,
        v => return Err(field_err("imagery.trigger", format!("expected on-anomaly or always, got {v}"))),
    };
    let cloud_max = f.number("imagery.cloud_max", DEFAULT_CLOUD_MAX)?;
    if !(0.0..=1.0).contains(&cloud_max) {
        return Err(field_err("imagery.cloud_max", format!("must lie in [0, 1], got {cloud_max}")));
    }

    Ok(RunConfig {
        base_dir: base_dir.to_path_buf(),
        event_name,
        event_time,
        centroid,
        roi_side_m,
        zone,
        periods,
        traces,
        manifest,
        out_dir,
        max_speed_mps: f.positive("filter.max_speed_mps", DEFAULT_MAX_SPEED_MPS)?,
        max_precision_m,
        stays,
        grid_rows: f.count("grid.rows", 10)?,
        grid_cols: f.count("grid.cols", 10)?,
        z_threshold: f.positive("anomaly.z_threshold", DEFAULT_Z_THRESHOLD)?,
        baseline_periods,
        baseline_mode,
        band_level,
        phi: f.positive("imagery.phi", DEFAULT_PHI)?,
        cloud_max,
        utility_form,
        trigger,
        greyscale_threshold: f.positive("raster.greyscale_threshold", DEFAULT_GREYSCALE_THRESHOLD)?,
        ndvi_threshold: f.positive("raster.ndvi_threshold", DEFAULT_NDVI_THRESHOLD)?,
        min_changed_fraction: f.positive("fusion.min_changed_fraction", DEFAULT_MIN_CHANGED_FRACTION)?,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_config_with(path, &[])
}

pub fn load_config_with(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_with(&text, &base, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
# case study
event.name = muskogee
event.time = 2020-05-15T14:00:00Z
event.lon = -95.37
event.lat = 35.75
periods.before = 2020-05-01T00:00:00Z/2020-05-15T00:00:00Z
periods.during = 2020-05-15T00:00:00Z/2020-05-16T00:00:00Z
periods.after = 2020-05-16T00:00:00Z/2020-05-23T00:00:00Z
inputs.traces = traces.csv
inputs.manifest = manifest.jsonl
";

    fn dir_with_inputs() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("traces.csv"), "").unwrap();
        std::fs::write(d.path().join("manifest.jsonl"), "").unwrap();
        d
    }

    #[test]
    fn defaults_follow_the_method() {
        let d = dir_with_inputs();
        let c = parse_config(MINIMAL, d.path()).unwrap();
        assert_eq!(c.zone, 15);
        assert_eq!(c.roi_side_m, 1000.0);
        assert_eq!(c.phi, 0.25);
        assert_eq!(c.cloud_max, 0.5);
        assert_eq!(c.z_threshold, 3.0);
        assert_eq!(c.stays.min_duration, Duration::minutes(15));
        assert_eq!(c.stays.max_distance_m, 100.0);
        assert_eq!(c.utility_form, UtilityForm::Calibrated);
        assert_eq!(c.trigger, ImageryTrigger::OnAnomaly);
        assert_eq!(c.baseline_periods, vec![Period::Before]);
        assert!((c.roi().area() - 1e6).abs() < 1e-3);
        assert_eq!(c.output_dir(), d.path().join("out"));
    }

    #[test]
    fn text_round_trip() {
        let d = dir_with_inputs();
        let c = parse_config(MINIMAL, d.path()).unwrap();
        let again = parse_config(&c.to_text(), d.path()).unwrap();
        assert_eq!(again, c);
    }

    fn field_of(text: &str) -> String {
        let d = dir_with_inputs();
        parse_config(text, d.path())
            .unwrap_err()
            .field()
            .unwrap_or("<none>")
            .to_string()
    }

    #[test]
    fn errors_name_the_field() {
        let inverted = MINIMAL
            .replace("periods.before = 2020-05-01T00:00:00Z/2020-05-15T00:00:00Z", "periods.before = 2020-05-16T00:00:00Z/2020-05-20T00:00:00Z")
            .replace("periods.after = 2020-05-16T00:00:00Z/2020-05-23T00:00:00Z", "periods.after = 2020-05-01T00:00:00Z/2020-05-15T00:00:00Z");
        assert_eq!(field_of(&inverted), "periods");
        assert_eq!(field_of(&format!("{MINIMAL}imagery.phi = 0\n")), "imagery.phi");
        assert_eq!(field_of(&format!("{MINIMAL}anomaly.z_threshold = -3\n")), "anomaly.z_threshold");
        assert_eq!(field_of(&format!("{MINIMAL}grid.rows = 0\n")), "grid.rows");
        assert_eq!(field_of(&format!("{MINIMAL}bogus.key = 1\n")), "bogus.key");
        assert_eq!(field_of(&format!("{MINIMAL}imagery.phi = 1\nimagery.phi = 2\n")), "imagery.phi");
        assert_eq!(field_of(&MINIMAL.replace("traces.csv", "absent.csv")), "inputs.traces");
        assert_eq!(field_of(&MINIMAL.replace("event.name = muskogee\n", "")), "event.name");
        assert_eq!(field_of(&format!("{MINIMAL}anomaly.baseline_periods = during\n")), "anomaly.baseline_periods");
        assert_eq!(field_of(&format!("{MINIMAL}imagery.utility_form = fancy\n")), "imagery.utility_form");
        let d = dir_with_inputs();
        let e = parse_config("no equals sign\n", d.path()).unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
    }

    #[test]
    fn overrides_replace_keys() {
        let d = dir_with_inputs();
        let o = vec![("imagery.cloud_max".to_string(), "0".to_string())];
        let c = parse_config_with(MINIMAL, d.path(), &o).unwrap();
        assert_eq!(c.cloud_max, 0.0);
        let bad = vec![("nope".to_string(), "1".to_string())];
        let e = parse_config_with(MINIMAL, d.path(), &bad).unwrap_err();
        assert_eq!(e.field(), Some("nope"));
    }

    #[test]
    fn zone_from_longitude() {
        assert_eq!(zone_for_lon(-95.37), 15);
        assert_eq!(zone_for_lon(-180.0), 1);
        assert_eq!(zone_for_lon(179.9), 60);
        assert_eq!(zone_for_lon(3.0), 31);
    }
}

//! Synthetic tornado scenario.
//!
//! A handful of residents live inside a 1 km ROI and show up in their home
//! grid cell during daytime hours with a fixed probability. On the event day
//! passers-by arrive at the spike hours, so visits per hour jump by roughly
//! `(multiplier - 1)` times the usual count. Two before and four after
//! images cover the ROI; the after images carry a damaged patch where
//! vegetation turned into bare ground and debris.
//!
//! Trace noise: GPS teleport glitches (600 m in 2 s), low-precision extra
//! pings, devices living outside the ROI and a few malformed rows. All
//! randomness comes from the seed; the same parameters give the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::anomaly::BaselineMode;
use crate::config::{ImageryTrigger, RunConfig};
use crate::geo::{inverse_utm, project_to_utm, BoundingBox, GeoPoint, Hemisphere, ProjPoint};
use crate::imagery::{write_manifest, ImageRecord, ImageryError, UtilityForm};
use crate::metrics::StayParams;
use crate::raster::geotiff::{write_geotiff_file, SampleType, WriteOptions};
use crate::raster::{Band, RasterError, RasterGrid};
use crate::trace::{write_traces, PeriodPartition, TimeInterval, TracePoint, TraceError};

pub const EVENT_NAME: &str = "muskogee-tornado";
pub const CENTROID_LON: f64 = -95.37;
pub const CENTROID_LAT: f64 = 35.75;
pub const ZONE: u8 = 15;
pub const ROI_SIDE_M: f64 = 1000.0;
pub const GRID_CELLS: usize = 10;
pub const PIXEL_SIZE_M: f64 = 10.0;
/// Raster margin around the ROI, pixels.
const MARGIN_PX: usize = 10;

const VEGETATION: [f64; 4] = [40.0, 80.0, 30.0, 180.0];
const DAMAGE: [f64; 4] = [120.0, 110.0, 100.0, 90.0];
const BANDS: [&str; 4] = ["R", "G", "B", "NIR"];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    pub seed: u64,
    /// Event-day visit multiplier at `spike_hours`; 1 means no event.
    pub spike_multiplier: f64,
    pub spike_hours: Vec<u32>,
    pub residents: usize,
    /// Chance that a resident is seen in a given active hour.
    pub presence: f64,
    /// First and last active hour of day, inclusive.
    pub active_hours: (u32, u32),
    /// Mean pings per present hour.
    pub pings_per_hour: f64,
    /// Chance per present hour of a teleport glitch.
    pub glitch_rate: f64,
    /// Chance per present hour of an extra low-precision ping.
    pub low_precision_rate: f64,
    pub outsiders: usize,
    /// Share of the ROI area damaged in the after images.
    pub changed_fraction: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            seed: 42,
            spike_multiplier: 5.0,
            spike_hours: vec![14, 18],
            residents: 3,
            presence: 0.5,
            active_hours: (7, 21),
            pings_per_hour: 3.0,
            glitch_rate: 0.05,
            low_precision_rate: 0.05,
            outsiders: 2,
            changed_fraction: 0.16,
        }
    }
}

impl FixtureParams {
    /// Same scenario without the event: no spike and no damage.
    pub fn no_event(seed: u64) -> Self {
        Self {
            seed,
            spike_multiplier: 1.0,
            changed_fraction: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), FixtureError> {
        let bad = |m: &str| Err(FixtureError::Invalid(m.into()));
        if !(self.spike_multiplier >= 1.0) || !self.spike_multiplier.is_finite() {
            return bad("spike multiplier must be at least 1");
        }
        if self.spike_hours.iter().any(|h| *h > 23) {
            return bad("spike hours must lie in 0..=23");
        }
        if !(0.0..=1.0).contains(&self.presence)
            || !(0.0..=1.0).contains(&self.glitch_rate)
            || !(0.0..=1.0).contains(&self.low_precision_rate)
        {
            return bad("rates must lie in [0, 1]");
        }
        if !(0.0..=0.81).contains(&self.changed_fraction) {
            return bad("changed fraction must lie in [0, 0.81]");
        }
        if self.active_hours.0 > self.active_hours.1 || self.active_hours.1 > 23 {
            return bad("active hours must be an ordered pair within 0..=23");
        }
        if !(self.pings_per_hour > 0.0) {
            return bad("pings per hour must be positive");
        }
        Ok(())
    }
}

fn at(y: i32, m: u32, d: u32, h: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, h, 0, 0).single().expect("valid date")
}

pub fn event_time() -> DateTime<Utc> {
    at(2020, 5, 15, 14)
}

pub fn periods() -> PeriodPartition {
    let iv = |a, b| TimeInterval::new(a, b).expect("ordered");
    PeriodPartition::new(
        iv(at(2020, 4, 17, 0), at(2020, 5, 15, 0)),
        iv(at(2020, 5, 15, 0), at(2020, 5, 16, 0)),
        iv(at(2020, 5, 16, 0), at(2020, 5, 23, 0)),
    )
    .expect("ordered periods")
}

pub fn roi() -> BoundingBox {
    let c = project_to_utm(GeoPoint::new(CENTROID_LON, CENTROID_LAT).expect("valid"), ZONE)
        .expect("in zone");
    crate::geo::bbox_from_centroid(c, ROI_SIDE_M).expect("positive side")
}

/// Run configuration of the scenario, paths relative to `base_dir`.
pub fn scenario_config(base_dir: &Path) -> RunConfig {
    RunConfig {
        base_dir: base_dir.to_path_buf(),
        event_name: EVENT_NAME.into(),
        event_time: event_time(),
        centroid: GeoPoint::new(CENTROID_LON, CENTROID_LAT).expect("valid"),
        roi_side_m: ROI_SIDE_M,
        zone: ZONE,
        periods: periods(),
        traces: vec![PathBuf::from("traces.csv")],
        manifest: PathBuf::from("imagery/manifest.jsonl"),
        out_dir: PathBuf::from("out"),
        max_speed_mps: crate::trace::DEFAULT_MAX_SPEED_MPS,
        max_precision_m: Some(100.0),
        stays: StayParams::default(),
        grid_rows: GRID_CELLS,
        grid_cols: GRID_CELLS,
        z_threshold: crate::anomaly::DEFAULT_Z_THRESHOLD,
        baseline_periods: vec![crate::trace::Period::Before],
        baseline_mode: BaselineMode::HourOfDay,
        band_level: crate::fusion::DEFAULT_BAND_LEVEL,
        phi: crate::imagery::DEFAULT_PHI,
        cloud_max: crate::imagery::DEFAULT_CLOUD_MAX,
        utility_form: UtilityForm::Calibrated,
        trigger: ImageryTrigger::OnAnomaly,
        greyscale_threshold: crate::raster::DEFAULT_GREYSCALE_THRESHOLD,
        ndvi_threshold: crate::raster::DEFAULT_NDVI_THRESHOLD,
        min_changed_fraction: crate::fusion::DEFAULT_MIN_CHANGED_FRACTION,
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn point(device: &str, t: DateTime<Utc>, e: f64, n: f64, precision_m: f64) -> TracePoint {
    let location = inverse_utm(ProjPoint::new(e, n, ZONE, Hemisphere::North)).expect("in zone");
    TracePoint {
        device_id: device.into(),
        timestamp: t,
        location,
        precision_m,
        projected: None,
    }
}

/// Distinct sorted offsets into an hour, seconds.
fn ping_offsets(rng: &mut ChaCha8Rng, count: usize) -> Vec<i64> {
    let mut s = std::collections::BTreeSet::new();
    while s.len() < count {
        s.insert(rng.random_range(0..3590i64));
    }
    s.into_iter().collect()
}

fn cell_center(roi: &BoundingBox, row: usize, col: usize) -> (f64, f64) {
    let w = roi.width() / GRID_CELLS as f64;
    let h = roi.height() / GRID_CELLS as f64;
    (
        roi.min_e + (col as f64 + 0.5) * w,
        roi.max_n - (row as f64 + 0.5) * h,
    )
}

/// Number of passers-by per spike hour.
pub fn spike_extra(params: &FixtureParams) -> usize {
    ((params.spike_multiplier - 1.0) * params.residents as f64 * params.presence).round() as usize
}

/// All trace points of the scenario in generation order.
pub fn generate_points(params: &FixtureParams) -> Result<Vec<TracePoint>, FixtureError> {
    params.validate()?;
    let mut rng = rng_for(params.seed, 1);
    let roi = roi();
    let span = periods().span();
    let pings = Poisson::new(params.pings_per_hour).map_err(|e| FixtureError::Invalid(e.to_string()))?;
    let mut out = Vec::new();

    let homes: Vec<(f64, f64)> = (0..params.residents)
        .map(|_| {
            let (e, n) = cell_center(
                &roi,
                rng.random_range(0..GRID_CELLS),
                rng.random_range(0..GRID_CELLS),
            );
            (e + rng.random_range(-20.0..20.0), n + rng.random_range(-20.0..20.0))
        })
        .collect();
    let outside: Vec<(f64, f64)> = (0..params.outsiders)
        .map(|i| (roi.max_e + 2000.0 + 300.0 * i as f64, roi.min_n - 1500.0))
        .collect();

    let during = *periods().get(crate::trace::Period::During);
    let hours = (span.end - span.start).num_hours();
    for k in 0..hours {
        let hour_start = span.start + Duration::hours(k);
        let hod = ((hour_start.timestamp() / 3600) % 24) as u32;
        let active = (params.active_hours.0..=params.active_hours.1).contains(&hod);

        let mut devices: Vec<(String, (f64, f64), bool)> = Vec::new();
        for (i, home) in homes.iter().enumerate() {
            if active && rng.random_bool(params.presence) {
                devices.push((format!("res-{i:02}"), *home, true));
            }
        }
        for (i, spot) in outside.iter().enumerate() {
            if active {
                devices.push((format!("out-{i:02}"), *spot, true));
            }
        }
        if during.contains(&hour_start) && params.spike_hours.contains(&hod) {
            for j in 0..spike_extra(params) {
                let (e, n) = cell_center(
                    &roi,
                    rng.random_range(0..GRID_CELLS),
                    rng.random_range(0..GRID_CELLS),
                );
                let spot = (e + rng.random_range(-20.0..20.0), n + rng.random_range(-20.0..20.0));
                devices.push((format!("pass-{hod:02}-{j:02}"), spot, false));
            }
        }

        for (id, (e, n), noisy) in devices {
            let count = (pings.sample(&mut rng) as usize).clamp(1, 12);
            let offsets = ping_offsets(&mut rng, count);
            for (idx, off) in offsets.iter().enumerate() {
                let t = hour_start + Duration::seconds(*off);
                let pe = e + rng.random_range(-2.0..2.0);
                let pn = n + rng.random_range(-2.0..2.0);
                out.push(point(&id, t, pe, pn, rng.random_range(5.0..30.0)));
                if noisy && idx == 0 && rng.random_bool(params.glitch_rate) {
                    out.push(point(&id, t + Duration::seconds(2), pe + 600.0, pn, 15.0));
                }
            }
            if noisy && rng.random_bool(params.low_precision_rate) {
                let t = hour_start + Duration::seconds(rng.random_range(0..3590i64));
                out.push(point(&id, t, e + 250.0, n - 250.0, 250.0));
            }
        }
    }
    Ok(out)
}

/// Malformed rows appended to the trace file.
const BAD_ROWS: &str = "\
res-00,2020-05-03T25:00:00Z,35.75,-95.37,10
res-01,2020-05-03T12:00:00Z,95.75,-95.37,10
,2020-05-03T12:00:00Z,35.75,-95.37,10
";

struct ImageSpec {
    id: &'static str,
    capture: DateTime<Utc>,
    cloud: f64,
    /// Share of the ROI width covered, from the west edge.
    width_share: f64,
    damaged: bool,
}

fn image_specs() -> Vec<ImageSpec> {
    let cap = |d| Utc.with_ymd_and_hms(2020, 5, d, 17, 0, 0).single().expect("valid");
    let spec = |id, d, cloud, width_share, damaged| ImageSpec {
        id,
        capture: cap(d),
        cloud,
        width_share,
        damaged,
    };
    vec![
        spec("S2-20200501", 1, 0.0, 1.0, false),
        spec("S2-20200509", 9, 0.05, 1.0, false),
        spec("S2-20200513", 13, 0.6, 1.0, false),
        spec("S2-20200516", 16, 0.8, 1.0, true),
        spec("S2-20200517", 17, 0.05, 0.4, true),
        spec("S2-20200518", 18, 0.05, 1.0, true),
    ]
}

/// Four-band 8-bit raster over the ROI plus a margin.
fn synth_raster(params: &FixtureParams, index: u64, spec: &ImageSpec) -> Result<RasterGrid, FixtureError> {
    let mut rng = rng_for(params.seed, 100 + index);
    let roi = roi();
    let roi_px = (ROI_SIDE_M / PIXEL_SIZE_M).round() as usize;
    let height = roi_px + 2 * MARGIN_PX;
    let width = if spec.width_share >= 1.0 {
        height
    } else {
        MARGIN_PX + (spec.width_share * roi_px as f64).round() as usize
    };
    let margin_m = MARGIN_PX as f64 * PIXEL_SIZE_M;
    let origin = ProjPoint::new(roi.min_e - margin_m, roi.max_n + margin_m, ZONE, Hemisphere::North);

    let side = (params.changed_fraction.sqrt() * roi_px as f64).round() as usize;
    let first = MARGIN_PX + (roi_px - side.min(roi_px)) / 2;
    let in_patch = |r: usize, c: usize| {
        spec.damaged && side > 0 && (first..first + side).contains(&r) && (first..first + side).contains(&c)
    };

    let mut data = vec![Vec::with_capacity(width * height); 4];
    for r in 0..height {
        for c in 0..width {
            let base = if in_patch(r, c) { DAMAGE } else { VEGETATION };
            for (b, v) in base.iter().enumerate() {
                let noise = rng.random_range(-3i32..=3) as f64;
                data[b].push((v + noise).clamp(0.0, 255.0));
            }
        }
    }
    let bands = BANDS
        .iter()
        .zip(data)
        .map(|(name, data)| Band {
            name: name.to_string(),
            data,
        })
        .collect();
    Ok(RasterGrid::new(width, height, origin, PIXEL_SIZE_M, None, bands)?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FixtureError> {
    let io = |source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

/// Writes `traces.csv`, `imagery/*.tif`, `imagery/manifest.jsonl` and
/// `config.txt` under `out_dir`. Returns the config path.
pub fn write_fixture(params: &FixtureParams, out_dir: &Path) -> Result<PathBuf, FixtureError> {
    let points = generate_points(params)?;
    let mut csv = Vec::new();
    write_traces(&mut csv, &points)?;
    csv.extend_from_slice(BAD_ROWS.as_bytes());
    write_bytes(&out_dir.join("traces.csv"), &csv)?;

    let imagery = out_dir.join("imagery");
    fs::create_dir_all(&imagery).map_err(|source| FixtureError::Io {
        path: imagery.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, spec) in image_specs().iter().enumerate() {
        let grid = synth_raster(params, i as u64, spec)?;
        let file = format!("{}.tif", spec.id);
        write_geotiff_file(&imagery.join(&file), &grid, &WriteOptions::new(SampleType::U8))?;
        records.push(ImageRecord {
            image_id: spec.id.into(),
            capture_time: spec.capture,
            footprint: grid.footprint()?,
            cloud_fraction: spec.cloud,
            band_layout: BANDS.iter().map(|s| s.to_string()).collect(),
            pixel_size_m: PIXEL_SIZE_M,
            file_path: PathBuf::from(file),
        });
    }
    let mut manifest = Vec::new();
    write_manifest(&mut manifest, &records)?;
    write_bytes(&imagery.join("manifest.jsonl"), &manifest)?;

    let config = out_dir.join("config.txt");
    let text = format!(
        "# synthetic scenario, seed {}, spike x{} at hours {:?}\n{}",
        params.seed,
        params.spike_multiplier,
        params.spike_hours,
        scenario_config(out_dir).to_text()
    );
    write_bytes(&config, text.as_bytes())?;
    Ok(config)
}

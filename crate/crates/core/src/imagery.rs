//! Image catalog and before/after pair selection.
//!
//! Each image is scored by a utility that trades ROI coverage against the
//! time gap to the event. Two forms are available: `Calibrated`
//! (`coverage - phi * days`, so with phi = 0.25 a day of delay costs 25
//! percentage points of coverage) and `Printed` (`coverage - days / phi`).

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{format_timestamp, parse_timestamp};
use crate::geo::{BoundingBox, GeoError};

pub const DEFAULT_PHI: f64 = 0.25;
pub const DEFAULT_CLOUD_MAX: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("no-before-image: no eligible image captured before the event")]
    NoBeforeImage,
    #[error("no-after-image: no eligible image captured at or after the event")]
    NoAfterImage,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("cannot read manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ImageryError {
    pub fn code(&self) -> Option<&'static str> {
        match self {
            ImageryError::NoBeforeImage => Some("no-before-image"),
            ImageryError::NoAfterImage => Some("no-after-image"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub capture_time: DateTime<Utc>,
    pub footprint: BoundingBox,
    pub cloud_fraction: f64,
    pub band_layout: Vec<String>,
    pub pixel_size_m: f64,
    /// Raster path as written in the manifest; relative paths resolve
    /// against the manifest directory.
    pub file_path: PathBuf,
}

impl ImageRecord {
    pub fn has_band(&self, name: &str) -> bool {
        self.band_layout.iter().any(|b| b == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub name: String,
    pub event_time: DateTime<Utc>,
    pub roi: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityForm {
    Calibrated,
    Printed,
}

impl UtilityForm {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "calibrated" => Some(UtilityForm::Calibrated),
            "printed" => Some(UtilityForm::Printed),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            UtilityForm::Calibrated => "calibrated",
            UtilityForm::Printed => "printed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub cloud_max: f64,
    pub phi: f64,
    pub form: UtilityForm,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            cloud_max: DEFAULT_CLOUD_MAX,
            phi: DEFAULT_PHI,
            form: UtilityForm::Calibrated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub before: ImageRecord,
    pub after: ImageRecord,
    pub u_before: f64,
    pub u_after: f64,
    pub candidates_considered: usize,
}

/// Manifest line layout.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    image_id: String,
    capture_time: String,
    min_e: f64,
    min_n: f64,
    max_e: f64,
    max_n: f64,
    zone: u8,
    cloud_fraction: f64,
    bands: Vec<String>,
    pixel_size_m: f64,
    path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestReject {
    /// 1-based manifest line.
    pub line: usize,
    pub image_id: Option<String>,
    pub reason: &'static str,
}

impl fmt::Display for ManifestReject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line={} ", self.line)?;
        if let Some(id) = &self.image_id {
            write!(f, "image_id={id} ")?;
        }
        write!(f, "reason={}", self.reason)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
    pub rejects: Vec<ManifestReject>,
}

impl Catalog {
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.base_dir.join(&record.file_path)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

fn validate_entry(entry: ManifestEntry, base_dir: &Path) -> Result<ImageRecord, &'static str> {
    if entry.image_id.trim().is_empty() {
        return Err("bad-image-id");
    }
    let capture_time = parse_timestamp(&entry.capture_time).ok_or("bad-timestamp")?;
    let footprint = BoundingBox::new(entry.min_e, entry.min_n, entry.max_e, entry.max_n, entry.zone)
        .map_err(|_| "bad-footprint")?;
    if !(0.0..=1.0).contains(&entry.cloud_fraction) {
        return Err("bad-cloud-fraction");
    }
    if entry.bands.is_empty() || entry.bands.iter().any(|b| b.trim().is_empty()) {
        return Err("bad-bands");
    }
    if !(entry.pixel_size_m > 0.0) || !entry.pixel_size_m.is_finite() {
        return Err("bad-pixel-size");
    }
    let file_path = PathBuf::from(&entry.path);
    if !base_dir.join(&file_path).is_file() {
        return Err("missing-file");
    }
    Ok(ImageRecord {
        image_id: entry.image_id,
        capture_time,
        footprint,
        cloud_fraction: entry.cloud_fraction,
        band_layout: entry.bands,
        pixel_size_m: entry.pixel_size_m,
        file_path,
    })
}

/// Loads a manifest of one JSON object per line. Blank lines and lines
/// starting with `#` are skipped; invalid entries are rejected with a reason
/// code instead of failing the whole load.
pub fn load_manifest(path: &Path) -> Result<Catalog, ImageryError> {
    let text = std::fs::read_to_string(path).map_err(|source| ImageryError::Manifest {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records: Vec<ImageRecord> = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let entry: ManifestEntry = match serde_json::from_str(trimmed) {
            Ok(e) => e,
            Err(_) => {
                rejects.push(ManifestReject {
                    line: line_no,
                    image_id: None,
                    reason: "malformed",
                });
                continue;
            }
        };
        let image_id = entry.image_id.clone();
        if records.iter().any(|r| r.image_id == image_id) {
            rejects.push(ManifestReject {
                line: line_no,
                image_id: Some(image_id),
                reason: "duplicate-id",
            });
            continue;
        }
        match validate_entry(entry, &base_dir) {
            Ok(r) => records.push(r),
            Err(reason) => rejects.push(ManifestReject {
                line: line_no,
                image_id: Some(image_id),
                reason,
            }),
        }
    }
    Ok(Catalog {
        base_dir,
        records,
        rejects,
    })
}

/// Writes records in the manifest format read by [`load_manifest`].
pub fn write_manifest<W: Write>(mut out: W, records: &[ImageRecord]) -> Result<(), ImageryError> {
    for r in records {
        let entry = ManifestEntry {
            image_id: r.image_id.clone(),
            capture_time: format_timestamp(&r.capture_time),
            min_e: r.footprint.min_e,
            min_n: r.footprint.min_n,
            max_e: r.footprint.max_e,
            max_n: r.footprint.max_n,
            zone: r.footprint.zone,
            cloud_fraction: r.cloud_fraction,
            bands: r.band_layout.clone(),
            pixel_size_m: r.pixel_size_m,
            path: r.file_path.to_string_lossy().into_owned(),
        };
        let line = serde_json::to_string(&entry).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Fraction of the ROI covered by the image footprint.
pub fn coverage_fraction(img: &ImageRecord, roi: &BoundingBox) -> Result<f64, ImageryError> {
    let overlap = img.footprint.intersection(roi)?;
    Ok(overlap.map_or(0.0, |b| (b.area() / roi.area()).clamp(0.0, 1.0)))
}

/// Absolute time gap in fractional days.
pub fn days_between(a: &DateTime<Utc>, b: &DateTime<Utc>) -> f64 {
    (*a - *b).num_milliseconds().abs() as f64 / 86_400_000.0
}

pub fn utility(
    img: &ImageRecord,
    evt: &EventSpec,
    phi: f64,
    form: UtilityForm,
) -> Result<f64, ImageryError> {
    if !(phi > 0.0) {
        return Err(ImageryError::InvalidInput(format!(
            "phi must be positive, got {phi}"
        )));
    }
    let coverage = coverage_fraction(img, &evt.roi)?;
    Ok(utility_from_parts(
        coverage,
        days_between(&img.capture_time, &evt.event_time),
        phi,
        form,
    ))
}

pub fn utility_from_parts(coverage: f64, days: f64, phi: f64, form: UtilityForm) -> f64 {
    match form {
        UtilityForm::Calibrated => coverage - phi * days,
        UtilityForm::Printed => coverage - days / phi,
    }
}

struct Scored<'a> {
    record: &'a ImageRecord,
    u: f64,
    days: f64,
}

/// Higher utility first, then the smaller time gap, then the smaller id.
fn rank(a: &Scored, b: &Scored) -> Ordering {
    b.u.total_cmp(&a.u)
        .then(a.days.total_cmp(&b.days))
        .then_with(|| a.record.image_id.cmp(&b.record.image_id))
}

/// Picks the best image strictly before the event and the best one at or
/// after it, among images with `cloud_fraction < cloud_max` that overlap the
/// ROI.
pub fn select_image_pair(
    catalog: &[ImageRecord],
    evt: &EventSpec,
    params: &SelectionParams,
) -> Result<SelectionResult, ImageryError> {
    let mut before: Option<Scored> = None;
    let mut after: Option<Scored> = None;
    let mut considered = 0;
    for record in catalog {
        if record.cloud_fraction >= params.cloud_max {
            continue;
        }
        let coverage = coverage_fraction(record, &evt.roi)?;
        if coverage <= 0.0 {
            continue;
        }
        considered += 1;
        let days = days_between(&record.capture_time, &evt.event_time);
        let cand = Scored {
            record,
            u: utility_from_parts(coverage, days, params.phi, params.form),
            days,
        };
        let slot = if record.capture_time < evt.event_time {
            &mut before
        } else {
            &mut after
        };
        if slot
            .as_ref()
            .is_none_or(|best| rank(&cand, best) == Ordering::Less)
        {
            *slot = Some(cand);
        }
    }
    let before = before.ok_or(ImageryError::NoBeforeImage)?;
    let after = after.ok_or(ImageryError::NoAfterImage)?;
    Ok(SelectionResult {
        before: before.record.clone(),
        after: after.record.clone(),
        u_before: before.u,
        u_after: after.u,
        candidates_considered: considered,
    })
}

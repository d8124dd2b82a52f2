//! Georeferenced rasters, before/after alignment and change maps.
//!
//! Derived products (greyscale, NDVI, deltas) mark missing pixels with NaN.

pub mod geotiff;
pub mod text;

use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::geo::{BoundingBox, GeoError, Hemisphere, ProjPoint};

pub const DEFAULT_NDVI_THRESHOLD: f64 = 0.2;
pub const DEFAULT_GREYSCALE_THRESHOLD: f64 = 10.0;

const GREY_WEIGHTS: [(&str, f64); 3] = [("R", 0.299), ("G", 0.587), ("B", 0.114)];
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("unsupported-raster: {0}")]
    Unsupported(String),
    #[error("no-georef: {0}")]
    NoGeoref(String),
    #[error("no-overlap: rasters and region of interest do not intersect")]
    NoOverlap,
    #[error("missing-band: {0}")]
    MissingBand(String),
    #[error("empty-changemap: every pixel is nodata")]
    EmptyChangeMap,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RasterError {
    pub fn code(&self) -> Option<&'static str> {
        match self {
            RasterError::Unsupported(_) => Some("unsupported-raster"),
            RasterError::NoGeoref(_) => Some("no-georef"),
            RasterError::NoOverlap => Some("no-overlap"),
            RasterError::MissingBand(_) => Some("missing-band"),
            RasterError::EmptyChangeMap => Some("empty-changemap"),
            _ => None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> RasterError {
    RasterError::InvalidInput(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    /// Row-major, top row first.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    origin: ProjPoint,
    pixel_size_m: f64,
    nodata: Option<f64>,
    bands: Vec<Band>,
}

impl RasterGrid {
    /// `origin` is the top-left corner of the top-left pixel.
    pub fn new(
        width: usize,
        height: usize,
        origin: ProjPoint,
        pixel_size_m: f64,
        nodata: Option<f64>,
        bands: Vec<Band>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty raster {width}x{height}")));
        }
        if !(pixel_size_m > 0.0) || !pixel_size_m.is_finite() {
            return Err(invalid(format!("pixel size must be positive, got {pixel_size_m}")));
        }
        if !origin.easting.is_finite() || !origin.northing.is_finite() {
            return Err(invalid("non-finite raster origin"));
        }
        if bands.is_empty() {
            return Err(invalid("raster has no bands"));
        }
        let grid = Self {
            width,
            height,
            origin,
            pixel_size_m,
            nodata,
            bands,
        };
        for (i, b) in grid.bands.iter().enumerate() {
            if b.data.len() != width * height {
                return Err(invalid(format!(
                    "band {} has {} values, expected {}",
                    b.name,
                    b.data.len(),
                    width * height
                )));
            }
            if grid.bands[..i].iter().any(|o| o.name == b.name) {
                return Err(invalid(format!("duplicate band {}", b.name)));
            }
            if let Some(v) = b.data.iter().find(|v| !v.is_finite() && !grid.is_nodata(**v)) {
                return Err(invalid(format!("band {} holds non-finite value {v}", b.name)));
            }
        }
        Ok(grid)
    }

    pub fn single(
        name: &str,
        width: usize,
        height: usize,
        origin: ProjPoint,
        pixel_size_m: f64,
        nodata: Option<f64>,
        data: Vec<f64>,
    ) -> Result<Self, RasterError> {
        Self::new(
            width,
            height,
            origin,
            pixel_size_m,
            nodata,
            vec![Band {
                name: name.to_string(),
                data,
            }],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn origin(&self) -> ProjPoint {
        self.origin
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.pixel_size_m
    }

    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band_names(&self) -> Vec<&str> {
        self.bands.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn band(&self, name: &str) -> Option<&[f64]> {
        self.bands
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.data.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f64], RasterError> {
        self.band(name)
            .ok_or_else(|| RasterError::MissingBand(format!("band {name} not present")))
    }

    /// First band; derived products carry exactly one.
    pub fn values(&self) -> &[f64] {
        &self.bands[0].data
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || self.nodata == Some(v)
    }

    pub fn footprint(&self) -> Result<BoundingBox, RasterError> {
        Ok(BoundingBox::new(
            self.origin.easting,
            self.origin.northing - self.height as f64 * self.pixel_size_m,
            self.origin.easting + self.width as f64 * self.pixel_size_m,
            self.origin.northing,
            self.origin.zone,
        )?)
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.easting + (col as f64 + 0.5) * self.pixel_size_m,
            self.origin.northing - (row as f64 + 0.5) * self.pixel_size_m,
        )
    }

    pub fn same_grid(&self, other: &RasterGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.origin == other.origin
            && self.pixel_size_m == other.pixel_size_m
    }

    fn same_crs(&self, other: &RasterGrid) -> bool {
        self.origin.zone == other.origin.zone && self.origin.hemisphere == other.origin.hemisphere
    }

    /// Nearest source pixel to a point; exact ties go to the upper-left.
    fn nearest_index(&self, e: f64, n: f64) -> Option<usize> {
        let col = nearest_center((e - self.origin.easting) / self.pixel_size_m, self.width)?;
        let row = nearest_center((self.origin.northing - n) / self.pixel_size_m, self.height)?;
        Some(row * self.width + col)
    }
}

/// Index of the nearest pixel center given a position in pixel units
/// measured from the grid edge (centers sit at k + 0.5).
fn nearest_center(pos: f64, len: usize) -> Option<usize> {
    if pos < -SNAP_EPS || pos > len as f64 + SNAP_EPS {
        return None;
    }
    let t = pos - 1.0;
    let k = if (t - t.round()).abs() < SNAP_EPS {
        t.round()
    } else {
        t.ceil()
    };
    Some((k.max(0.0) as usize).min(len - 1))
}

/// Loads a raster, naming bands after the manifest band layout. `.tif` and
/// `.tiff` files are read as GeoTIFF, anything else as the text grid format.
pub fn load_raster(path: &Path, band_layout: &[String]) -> Result<RasterGrid, RasterError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let grid = match ext.as_deref() {
        Some("tif") | Some("tiff") => {
            let f = std::io::BufReader::new(std::fs::File::open(path)?);
            geotiff::read_geotiff(f)?
        }
        _ => text::read_text_grid(std::io::BufReader::new(std::fs::File::open(path)?))?,
    };
    rename_bands(grid, band_layout)
}

pub fn rename_bands(mut grid: RasterGrid, names: &[String]) -> Result<RasterGrid, RasterError> {
    if names.is_empty() {
        return Ok(grid);
    }
    if names.len() != grid.bands.len() {
        return Err(invalid(format!(
            "band layout lists {} bands but the raster has {}",
            names.len(),
            grid.bands.len()
        )));
    }
    for (b, n) in grid.bands.iter_mut().zip(names) {
        b.name = n.clone();
    }
    let bands = std::mem::take(&mut grid.bands);
    RasterGrid::new(grid.width, grid.height, grid.origin, grid.pixel_size_m, grid.nodata, bands)
}

/// Crops both rasters to `roi` intersected with their footprints, on the
/// pixel grid of the coarser raster. The finer raster is resampled by
/// nearest neighbour. Output pixels are those whose centers fall inside the
/// common region.
pub fn align(
    a: &RasterGrid,
    b: &RasterGrid,
    roi: &BoundingBox,
) -> Result<(RasterGrid, RasterGrid), RasterError> {
    if !a.same_crs(b) {
        return Err(invalid("rasters are in different UTM zones or hemispheres"));
    }
    let region = a
        .footprint()?
        .intersection(&b.footprint()?)?
        .map(|r| r.intersection(roi))
        .transpose()?
        .flatten()
        .ok_or(RasterError::NoOverlap)?;
    let coarse = if b.pixel_size_m > a.pixel_size_m { b } else { a };
    let p = coarse.pixel_size_m;
    let first = |d: f64| (d / p - 0.5 - SNAP_EPS).ceil().max(0.0) as usize;
    let c0 = first(region.min_e - coarse.origin.easting);
    let c1 = first(region.max_e - coarse.origin.easting).min(coarse.width);
    let r0 = first(coarse.origin.northing - region.max_n);
    let r1 = first(coarse.origin.northing - region.min_n).min(coarse.height);
    if c0 >= c1 || r0 >= r1 {
        return Err(RasterError::NoOverlap);
    }
    let origin = ProjPoint::new(
        coarse.origin.easting + c0 as f64 * p,
        coarse.origin.northing - r0 as f64 * p,
        coarse.origin.zone,
        coarse.origin.hemisphere,
    );
    let (w, h) = (c1 - c0, r1 - r0);
    let frame = RasterGrid {
        width: w,
        height: h,
        origin,
        pixel_size_m: p,
        nodata: None,
        bands: Vec::new(),
    };
    Ok((resample(a, &frame)?, resample(b, &frame)?))
}

fn resample(src: &RasterGrid, frame: &RasterGrid) -> Result<RasterGrid, RasterError> {
    let n = frame.width * frame.height;
    let index: Vec<Option<usize>> = (0..n)
        .map(|i| {
            let (e, nn) = frame.pixel_center(i / frame.width, i % frame.width);
            src.nearest_index(e, nn)
        })
        .collect();
    let mut nodata = src.nodata;
    if index.iter().any(Option::is_none) && nodata.is_none() {
        nodata = Some(f64::NAN);
    }
    let fill = nodata.unwrap_or(f64::NAN);
    let bands = src
        .bands
        .iter()
        .map(|b| Band {
            name: b.name.clone(),
            data: index.iter().map(|ix| ix.map_or(fill, |k| b.data[k])).collect(),
        })
        .collect();
    RasterGrid::new(frame.width, frame.height, frame.origin, frame.pixel_size_m, nodata, bands)
}

fn derive(
    src: &RasterGrid,
    name: &str,
    inputs: &[&[f64]],
    f: impl Fn(&[f64]) -> f64,
) -> Result<RasterGrid, RasterError> {
    let mut buf = vec![0.0; inputs.len()];
    let data = (0..src.width * src.height)
        .map(|i| {
            for (slot, band) in buf.iter_mut().zip(inputs) {
                *slot = band[i];
            }
            if buf.iter().any(|v| src.is_nodata(*v)) {
                f64::NAN
            } else {
                f(&buf)
            }
        })
        .collect::<Vec<_>>();
    let nodata = data.iter().any(|v| v.is_nan()).then_some(f64::NAN);
    RasterGrid::single(name, src.width, src.height, src.origin, src.pixel_size_m, nodata, data)
}

/// Luminosity `0.299 R + 0.587 G + 0.114 B`.
pub fn greyscale(r: &RasterGrid) -> Result<RasterGrid, RasterError> {
    let inputs = GREY_WEIGHTS
        .iter()
        .map(|(name, _)| r.require(name))
        .collect::<Result<Vec<_>, _>>()?;
    derive(r, "GS", &inputs, |v| {
        GREY_WEIGHTS.iter().zip(v).map(|((_, w), x)| w * x).sum()
    })
}

/// `(NIR - R) / (NIR + R)`, zero where the sum is zero.
pub fn ndvi(r: &RasterGrid) -> Result<RasterGrid, RasterError> {
    let nir = r.require("NIR")?;
    let red = r.require("R")?;
    derive(r, "NDVI", &[nir, red], |v| ndvi_value(v[0], v[1]))
}

pub fn ndvi_value(nir: f64, red: f64) -> f64 {
    let sum = nir + red;
    if sum == 0.0 {
        0.0
    } else {
        ((nir - red) / sum).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChangeKind {
    Greyscale,
    Ndvi,
}

impl ChangeKind {
    pub fn label(&self) -> &'static str {
        match self {
            ChangeKind::Greyscale => "greyscale",
            ChangeKind::Ndvi => "ndvi",
        }
    }

    pub fn default_threshold(&self) -> f64 {
        match self {
            ChangeKind::Greyscale => DEFAULT_GREYSCALE_THRESHOLD,
            ChangeKind::Ndvi => DEFAULT_NDVI_THRESHOLD,
        }
    }
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    pub kind: ChangeKind,
    /// Single band holding `after - before`.
    pub delta: RasterGrid,
}

/// Per-pixel `after - before` on two single-band rasters sharing a grid.
pub fn diff(
    before: &RasterGrid,
    after: &RasterGrid,
    kind: ChangeKind,
) -> Result<ChangeMap, RasterError> {
    if !before.same_grid(after) || !before.same_crs(after) {
        return Err(invalid("diff needs rasters on the same grid; align them first"));
    }
    let (bv, av) = (before.values(), after.values());
    let data: Vec<f64> = bv
        .iter()
        .zip(av)
        .map(|(b, a)| {
            if before.is_nodata(*b) || after.is_nodata(*a) {
                f64::NAN
            } else {
                a - b
            }
        })
        .collect();
    let nodata = data.iter().any(|v| v.is_nan()).then_some(f64::NAN);
    let delta = RasterGrid::single(
        "delta",
        before.width,
        before.height,
        before.origin,
        before.pixel_size_m,
        nodata,
        data,
    )?;
    Ok(ChangeMap { kind, delta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeStats {
    pub kind: ChangeKind,
    pub threshold: f64,
    pub mean_abs_delta: f64,
    pub mean_delta: f64,
    /// Valid (non-nodata) pixels.
    pub pixel_count: usize,
    /// Pixels with `|delta| > threshold`.
    pub changed_count: usize,
    pub changed_fraction: f64,
    pub changed_area_m2: f64,
}

pub fn change_stats(m: &ChangeMap, threshold: f64) -> Result<ChangeStats, RasterError> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(invalid(format!("change threshold must be positive, got {threshold}")));
    }
    let valid: Vec<f64> = m
        .delta
        .values()
        .iter()
        .copied()
        .filter(|v| !m.delta.is_nodata(*v))
        .collect();
    if valid.is_empty() {
        return Err(RasterError::EmptyChangeMap);
    }
    let n = valid.len() as f64;
    let changed_count = valid.iter().filter(|v| v.abs() > threshold).count();
    let ps = m.delta.pixel_size_m;
    Ok(ChangeStats {
        kind: m.kind,
        threshold,
        mean_abs_delta: valid.iter().map(|v| v.abs()).sum::<f64>() / n,
        mean_delta: valid.iter().sum::<f64>() / n,
        pixel_count: valid.len(),
        changed_count,
        changed_fraction: changed_count as f64 / n,
        changed_area_m2: changed_count as f64 * ps * ps,
    })
}

/// Linear min-max stretch used for a PGM preview.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmStretch {
    pub min: f64,
    pub max: f64,
}

impl PgmStretch {
    pub fn sidecar(&self) -> String {
        format!(
            "stretch linear\nmin {}\nmax {}\nnodata_grey 0\n",
            self.min, self.max
        )
    }
}

/// Writes the first band as a binary 8-bit PGM. Valid pixels map linearly
/// from `[min, max]` onto `[1, 255]`; nodata pixels are 0.
pub fn write_pgm<W: Write>(mut out: W, grid: &RasterGrid) -> Result<PgmStretch, RasterError> {
    let values = grid.values();
    let valid = values.iter().copied().filter(|v| !grid.is_nodata(*v));
    let (min, max) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let stretch = if min.is_finite() {
        PgmStretch { min, max }
    } else {
        PgmStretch { min: 0.0, max: 0.0 }
    };
    let span = stretch.max - stretch.min;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| {
            if grid.is_nodata(*v) {
                0
            } else if span > 0.0 {
                (1.0 + ((v - stretch.min) / span) * 254.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    write!(out, "P5\n{} {}\n255\n", grid.width, grid.height)?;
    out.write_all(&bytes)?;
    Ok(stretch)
}

/// Northern-hemisphere origin shorthand.
pub fn origin_point(easting: f64, northing: f64, zone: u8) -> ProjPoint {
    ProjPoint::new(easting, northing, zone, Hemisphere::North)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(bands: &[(&str, Vec<f64>)], w: usize, h: usize, ps: f64) -> RasterGrid {
        RasterGrid::new(
            w,
            h,
            origin_point(500_000.0, 4_000_000.0, 15),
            ps,
            None,
            bands
                .iter()
                .map(|(n, d)| Band {
                    name: n.to_string(),
                    data: d.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn rgb(r: f64, g: f64, b: f64) -> RasterGrid {
        grid(&[("R", vec![r]), ("G", vec![g]), ("B", vec![b])], 1, 1, 1.0)
    }

    #[test]
    fn greyscale_values() {
        assert!((greyscale(&rgb(100.0, 100.0, 100.0)).unwrap().values()[0] - 100.0).abs() < 1e-12);
        assert!((greyscale(&rgb(255.0, 0.0, 0.0)).unwrap().values()[0] - 76.245).abs() < 1e-12);
        let no_b = grid(&[("R", vec![1.0]), ("G", vec![1.0])], 1, 1, 1.0);
        assert_eq!(greyscale(&no_b).unwrap_err().code(), Some("missing-band"));
    }

    #[test]
    fn nodata_propagates() {
        let g = RasterGrid::new(
            2,
            1,
            origin_point(0.0, 0.0, 15),
            1.0,
            Some(0.0),
            ["R", "G", "B", "NIR"]
                .iter()
                .map(|n| Band {
                    name: n.to_string(),
                    data: vec![0.0, 0.0],
                })
                .collect(),
        )
        .unwrap();
        assert!(greyscale(&g).unwrap().values().iter().all(|v| v.is_nan()));
        assert!(ndvi(&g).unwrap().values().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn ndvi_values() {
        let g = grid(
            &[("NIR", vec![0.5, 0.8, 0.0]), ("R", vec![0.5, 0.2, 0.0])],
            3,
            1,
            1.0,
        );
        let v = ndvi(&g).unwrap();
        assert_eq!(v.values()[0], 0.0);
        assert!((v.values()[1] - 0.6).abs() < 1e-12);
        assert_eq!(v.values()[2], 0.0);
        let no_nir = rgb(1.0, 1.0, 1.0);
        assert_eq!(ndvi(&no_nir).unwrap_err().code(), Some("missing-band"));
    }

    #[test]
    fn diff_and_stats() {
        let b = grid(&[("GS", vec![10.0; 4])], 2, 2, 1.0);
        let a = grid(&[("GS", vec![12.0; 4])], 2, 2, 1.0);
        let d = diff(&b, &a, ChangeKind::Greyscale).unwrap();
        assert_eq!(d.delta.values(), &[2.0; 4]);
        let same = diff(&b, &b, ChangeKind::Greyscale).unwrap();
        let s = change_stats(&same, 10.0).unwrap();
        assert_eq!((s.mean_abs_delta, s.changed_fraction), (0.0, 0.0));
        let other = grid(&[("GS", vec![0.0; 6])], 3, 2, 1.0);
        assert!(diff(&b, &other, ChangeKind::Greyscale).is_err());
    }

    #[test]
    fn seven_percent_changed() {
        let mut data = vec![0.0; 100];
        for v in data.iter_mut().step_by(13).take(7) {
            *v = 0.5;
        }
        let m = ChangeMap {
            kind: ChangeKind::Ndvi,
            delta: grid(&[("delta", data)], 10, 10, 3.0),
        };
        let s = change_stats(&m, 0.2).unwrap();
        assert_eq!(s.changed_count, 7);
        assert_eq!(s.changed_fraction, 0.07);
        assert_eq!(s.changed_area_m2, 63.0);
        assert!(change_stats(&m, 0.0).is_err());
    }

    #[test]
    fn all_nodata_changemap() {
        let m = ChangeMap {
            kind: ChangeKind::Ndvi,
            delta: RasterGrid::single("delta", 2, 1, origin_point(0.0, 0.0, 15), 1.0, Some(f64::NAN), vec![f64::NAN; 2])
                .unwrap(),
        };
        assert_eq!(change_stats(&m, 0.2).unwrap_err().code(), Some("empty-changemap"));
    }

    #[test]
    fn align_identical_grids_crops_only() {
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let a = grid(&[("GS", data.clone())], 4, 4, 1.0);
        let roi = BoundingBox::new(500_001.0, 3_999_997.0, 500_003.0, 3_999_999.0, 15).unwrap();
        let (x, y) = align(&a, &a, &roi).unwrap();
        assert_eq!(x, y);
        assert_eq!((x.width(), x.height()), (2, 2));
        assert_eq!(x.values(), &[5.0, 6.0, 9.0, 10.0]);
        assert_eq!(x.origin().easting, 500_001.0);
        assert_eq!(x.origin().northing, 3_999_999.0);
    }

    #[test]
    fn align_fine_to_coarse() {
        // 4x4 at 1 m against 2x2 at 2 m over the same 4 m square. Each coarse
        // center sits on a fine pixel corner; the tie goes to the upper-left
        // fine pixel, i.e. fine (0,0), (0,2), (2,0), (2,2).
        let fine = grid(&[("GS", (0..16).map(f64::from).collect())], 4, 4, 1.0);
        let coarse = grid(&[("GS", vec![100.0, 101.0, 102.0, 103.0])], 2, 2, 2.0);
        let roi = fine.footprint().unwrap();
        let (f, c) = align(&fine, &coarse, &roi).unwrap();
        assert_eq!(f.pixel_size_m(), 2.0);
        assert_eq!(f.values(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(c.values(), coarse.values());
        assert!(f.same_grid(&c));
    }

    #[test]
    fn align_disjoint() {
        let a = grid(&[("GS", vec![1.0; 4])], 2, 2, 1.0);
        let mut b = a.clone();
        b.origin.easting += 100.0;
        let roi = a.footprint().unwrap();
        assert_eq!(align(&a, &b, &roi).unwrap_err().code(), Some("no-overlap"));
    }

    #[test]
    fn pgm_stretch() {
        let g = RasterGrid::single("d", 3, 1, origin_point(0.0, 0.0, 15), 1.0, Some(f64::NAN), vec![-1.0, 1.0, f64::NAN])
            .unwrap();
        let mut out = Vec::new();
        let s = write_pgm(&mut out, &g).unwrap();
        assert_eq!(s, PgmStretch { min: -1.0, max: 1.0 });
        assert_eq!(&out[..11], b"P5\n3 1\n255\n");
        assert_eq!(&out[11..], &[1, 255, 0]);
    }

    proptest! {
        #[test]
        fn ndvi_bounded(nir in 0.0f64..1e4, red in 0.0f64..1e4) {
            let v = ndvi_value(nir, red);
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn greyscale_scales(r in 0.0f64..255.0, g in 0.0f64..255.0, b in 0.0f64..255.0, k in 0.01f64..100.0) {
            let base = greyscale(&rgb(r, g, b)).unwrap().values()[0];
            let scaled = greyscale(&rgb(k * r, k * g, k * b)).unwrap().values()[0];
            prop_assert!((scaled - k * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }

        #[test]
        fn diff_antisymmetric(vals in proptest::collection::vec((0.0f64..255.0, 0.0f64..255.0), 6)) {
            let a = grid(&[("GS", vals.iter().map(|v| v.0).collect())], 3, 2, 1.0);
            let b = grid(&[("GS", vals.iter().map(|v| v.1).collect())], 3, 2, 1.0);
            let ab = diff(&a, &b, ChangeKind::Greyscale).unwrap();
            let ba = diff(&b, &a, ChangeKind::Greyscale).unwrap();
            for (x, y) in ab.delta.values().iter().zip(ba.delta.values()) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn changed_fraction_monotone(vals in proptest::collection::vec(-1.0f64..1.0, 20), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let m = ChangeMap { kind: ChangeKind::Ndvi, delta: grid(&[("delta", vals)], 5, 4, 1.0) };
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let s_lo = change_stats(&m, lo).unwrap();
            let s_hi = change_stats(&m, hi).unwrap();
            prop_assert!(s_hi.changed_fraction <= s_lo.changed_fraction);
            prop_assert_eq!(s_lo.changed_fraction * s_lo.pixel_count as f64, s_lo.changed_count as f64);
        }

        #[test]
        fn align_idempotent(
            ps_a in 1u32..4, ps_b in 1u32..4,
            off_e in -20i32..20, off_n in -20i32..20,
            roi_off in 0u32..10, roi_side in 5u32..40,
        ) {
            let mk = |ps: f64, e: f64, n: f64, w: usize, h: usize| {
                RasterGrid::single(
                    "GS", w, h, origin_point(e, n, 15), ps, None,
                    (0..w * h).map(|i| i as f64).collect(),
                ).unwrap()
            };
            let a = mk(ps_a as f64, 0.0, 100.0, 40, 40);
            let b = mk(ps_b as f64, off_e as f64, 100.0 + off_n as f64, 30, 30);
            let roi = BoundingBox::new(
                roi_off as f64, 100.0 - roi_off as f64 - roi_side as f64,
                roi_off as f64 + roi_side as f64, 100.0 - roi_off as f64, 15,
            ).unwrap();
            if let Ok((x, y)) = align(&a, &b, &roi) {
                prop_assert!(x.same_grid(&y));
                let (x2, y2) = align(&x, &y, &roi).unwrap();
                prop_assert_eq!(&x2, &x);
                prop_assert_eq!(&y2, &y);
            }
        }
    }
}

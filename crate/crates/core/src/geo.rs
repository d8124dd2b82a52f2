//! Geodesy primitives: WGS84 <-> UTM, great-circle distance and projected
//! bounding boxes.
//!
//! The transverse Mercator mapping uses the Krüger series in the third
//! flattening `n`, truncated after the sixth-order terms. Within a UTM zone
//! this is accurate to well below a millimetre, so there is no need for a
//! full geodesy dependency.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const UTM_K0: f64 = 0.9996;
const UTM_FALSE_EASTING: f64 = 500_000.0;
const UTM_FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn invalid(msg: impl Into<String>) -> GeoError {
    GeoError::InvalidInput(msg.into())
}

/// A WGS84 geographic position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(invalid(format!("non-finite coordinate ({lon}, {lat})")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(invalid(format!("longitude {lon} outside [-180, 180]")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(invalid(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(Self { lon, lat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hemisphere {
    North,
    South,
}

/// A position in UTM coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjPoint {
    pub easting: f64,
    pub northing: f64,
    pub zone: u8,
    pub hemisphere: Hemisphere,
}

impl ProjPoint {
    pub fn new(easting: f64, northing: f64, zone: u8, hemisphere: Hemisphere) -> Self {
        Self {
            easting,
            northing,
            zone,
            hemisphere,
        }
    }

    /// Euclidean distance in the projected plane. Both points are assumed to
    /// share a zone.
    pub fn distance(&self, other: &ProjPoint) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// Central meridian of a UTM zone, in degrees.
pub fn central_meridian(zone: u8) -> f64 {
    f64::from(zone) * 6.0 - 183.0
}

/// Krüger series coefficients for one ellipsoid.
struct TmSeries {
    /// Rectifying radius.
    big_a: f64,
    e: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

fn wgs84_series() -> TmSeries {
    let f = WGS84_F;
    let n = f / (2.0 - f);
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n3 * n;
    let n5 = n4 * n;
    let n6 = n5 * n;
    let big_a = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let alpha = [
        n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
            + 7891.0 * n6 / 37800.0,
        13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
            - 1_983_433.0 * n6 / 1_935_360.0,
        61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0
            + 167_603.0 * n6 / 181_440.0,
        49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
        34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
        212_378_941.0 * n6 / 319_334_400.0,
    ];
    let beta = [
        n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
            + 96199.0 * n6 / 604_800.0,
        n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
            - 1_118_711.0 * n6 / 3_870_720.0,
        17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
        4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
        4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
        20_648_693.0 * n6 / 638_668_800.0,
    ];
    TmSeries {
        big_a,
        e: (f * (2.0 - f)).sqrt(),
        alpha,
        beta,
    }
}

fn check_zone(zone: u8) -> Result<(), GeoError> {
    if (1..=60).contains(&zone) {
        Ok(())
    } else {
        Err(invalid(format!("UTM zone {zone} outside [1, 60]")))
    }
}

/// Projects a geographic point into the given UTM zone (WGS84).
///
/// Latitude must lie strictly inside (-84, 84). The hemisphere follows the
/// sign of the latitude; southern points get the 10,000 km false northing.
pub fn project_to_utm(p: GeoPoint, zone: u8) -> Result<ProjPoint, GeoError> {
    check_zone(zone)?;
    if !p.lat.is_finite() || !p.lon.is_finite() {
        return Err(invalid("non-finite coordinate"));
    }
    if p.lat <= -84.0 || p.lat >= 84.0 {
        return Err(invalid(format!("latitude {} outside (-84, 84)", p.lat)));
    }
    let s = wgs84_series();
    let phi = p.lat.to_radians();
    let mut dlon = p.lon - central_meridian(zone);
    // keep the longitude difference in (-180, 180]
    dlon = (dlon + 540.0).rem_euclid(360.0) - 180.0;
    let lam = dlon.to_radians();

    let sin_phi = phi.sin();
    let t = (sin_phi.atanh() - s.e * (s.e * sin_phi).atanh()).sinh();
    let xi_p = t.atan2(lam.cos());
    let eta_p = (lam.sin() / (1.0 + t * t).sqrt()).atanh();

    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }

    let easting = UTM_FALSE_EASTING + UTM_K0 * s.big_a * eta;
    let mut northing = UTM_K0 * s.big_a * xi;
    let hemisphere = if p.lat < 0.0 {
        northing += UTM_FALSE_NORTHING_SOUTH;
        Hemisphere::South
    } else {
        Hemisphere::North
    };
    Ok(ProjPoint {
        easting,
        northing,
        zone,
        hemisphere,
    })
}

/// Inverse of [`project_to_utm`].
pub fn inverse_utm(p: ProjPoint) -> Result<GeoPoint, GeoError> {
    check_zone(p.zone)?;
    if !p.easting.is_finite() || !p.northing.is_finite() {
        return Err(invalid("non-finite projected coordinate"));
    }
    let s = wgs84_series();
    let northing = match p.hemisphere {
        Hemisphere::North => p.northing,
        Hemisphere::South => p.northing - UTM_FALSE_NORTHING_SOUTH,
    };
    let xi = northing / (UTM_K0 * s.big_a);
    let eta = (p.easting - UTM_FALSE_EASTING) / (UTM_K0 * s.big_a);

    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }

    let sinh_eta = eta_p.sinh();
    let cos_xi = xi_p.cos();
    let tau_p = xi_p.sin() / (sinh_eta * sinh_eta + cos_xi * cos_xi).sqrt();
    let lam = sinh_eta.atan2(cos_xi);

    // Newton iteration for tan(phi) from the conformal tan(phi').
    let e = s.e;
    let e2m = 1.0 - e * e;
    let mut tau = tau_p;
    for _ in 0..8 {
        let tau1 = (1.0 + tau * tau).sqrt();
        let sigma = (e * (e * tau / tau1).atanh()).sinh();
        let tau_i = tau * (1.0 + sigma * sigma).sqrt() - sigma * tau1;
        let tau_i1 = (1.0 + tau_i * tau_i).sqrt();
        let step = (tau_p - tau_i) / tau_i1 * (1.0 + e2m * tau * tau) / (e2m * tau1);
        tau += step;
        if step.abs() < 1e-14 * tau.abs().max(1.0) {
            break;
        }
    }

    let lat = tau.atan() * 180.0 / PI;
    let mut lon = central_meridian(p.zone) + lam * 180.0 / PI;
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint::new(lon, lat)
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlam = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Axis-aligned rectangle in a UTM zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_e: f64,
    pub min_n: f64,
    pub max_e: f64,
    pub max_n: f64,
    pub zone: u8,
}

impl BoundingBox {
    pub fn new(min_e: f64, min_n: f64, max_e: f64, max_n: f64, zone: u8) -> Result<Self, GeoError> {
        check_zone(zone)?;
        if ![min_e, min_n, max_e, max_n].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite bounding box"));
        }
        if min_e >= max_e || min_n >= max_n {
            return Err(invalid(format!(
                "degenerate bounding box [{min_e}, {max_e}] x [{min_n}, {max_n}]"
            )));
        }
        Ok(Self {
            min_e,
            min_n,
            max_e,
            max_n,
            zone,
        })
    }

    pub fn width(&self) -> f64 {
        self.max_e - self.min_e
    }

    pub fn height(&self) -> f64 {
        self.max_n - self.min_n
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed containment test; the zone must match.
    pub fn contains(&self, p: &ProjPoint) -> bool {
        p.zone == self.zone
            && p.easting >= self.min_e
            && p.easting <= self.max_e
            && p.northing >= self.min_n
            && p.northing <= self.max_n
    }

    /// Intersection with positive area, if any.
    pub fn intersection(&self, other: &BoundingBox) -> Result<Option<BoundingBox>, GeoError> {
        if self.zone != other.zone {
            return Err(invalid(format!(
                "zone mismatch: {} vs {}",
                self.zone, other.zone
            )));
        }
        let min_e = self.min_e.max(other.min_e);
        let min_n = self.min_n.max(other.min_n);
        let max_e = self.max_e.min(other.max_e);
        let max_n = self.max_n.min(other.max_n);
        if min_e < max_e && min_n < max_n {
            Ok(Some(BoundingBox {
                min_e,
                min_n,
                max_e,
                max_n,
                zone: self.zone,
            }))
        } else {
            Ok(None)
        }
    }
}

/// Square box of side `side_m` centred on `center`.
pub fn bbox_from_centroid(center: ProjPoint, side_m: f64) -> Result<BoundingBox, GeoError> {
    if !(side_m > 0.0) || !side_m.is_finite() {
        return Err(invalid(format!("box side must be positive, got {side_m}")));
    }
    let half = side_m / 2.0;
    BoundingBox::new(
        center.easting - half,
        center.northing - half,
        center.easting + half,
        center.northing + half,
        center.zone,
    )
}

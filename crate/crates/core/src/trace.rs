//! GPS trace ingestion and preprocessing: parsing, spatial clipping,
//! projection, segment-velocity filtering and period partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, Duration, TimeZone, Utc};
use thiserror::Error;

use crate::format::{format_timestamp, parse_timestamp};
use crate::geo::{haversine_m, project_to_utm, BoundingBox, GeoError, GeoPoint, ProjPoint};

/// Default segment-speed ceiling: 500 km/h.
pub const DEFAULT_MAX_SPEED_MPS: f64 = 500.0 / 3.6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One GPS observation of a device.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub device_id: String,
    pub timestamp: DateTime<Utc>,
    pub location: GeoPoint,
    /// Radius of the 95% confidence region, metres.
    pub precision_m: f64,
    pub projected: Option<ProjPoint>,
}

impl TracePoint {
    pub fn projected(&self) -> Result<ProjPoint, TraceError> {
        self.projected.ok_or_else(|| {
            TraceError::InvalidInput(format!(
                "point of device `{}` at {} is not projected",
                self.device_id,
                format_timestamp(&self.timestamp)
            ))
        })
    }
}

/// Time-ordered observations of a single device.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    device_id: String,
    points: Vec<TracePoint>,
}

impl Trajectory {
    pub fn new(device_id: impl Into<String>, points: Vec<TracePoint>) -> Result<Self, TraceError> {
        let device_id = device_id.into();
        if let Some(p) = points.iter().find(|p| p.device_id != device_id) {
            return Err(TraceError::InvalidInput(format!(
                "trajectory of `{device_id}` contains a point of `{}`",
                p.device_id
            )));
        }
        if points.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(TraceError::InvalidInput(format!(
                "trajectory of `{device_id}` is not time-ordered"
            )));
        }
        Ok(Self { device_id, points })
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<TracePoint> {
        self.points
    }
}

/// Groups points into per-device trajectories, ordered by device id. Points
/// of a device are sorted by timestamp; input order breaks ties.
pub fn group_by_device(points: Vec<TracePoint>) -> Vec<Trajectory> {
    let mut by_device: BTreeMap<String, Vec<TracePoint>> = BTreeMap::new();
    for p in points {
        by_device.entry(p.device_id.clone()).or_default().push(p);
    }
    by_device
        .into_iter()
        .map(|(device_id, mut pts)| {
            pts.sort_by_key(|p| p.timestamp);
            Trajectory {
                device_id,
                points: pts,
            }
        })
        .collect()
}

/// Half-open `[start, end)` time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeInterval {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeInterval {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, TraceError> {
        if start >= end {
            return Err(TraceError::InvalidInput(format!(
                "empty interval [{}, {})",
                format_timestamp(&start),
                format_timestamp(&end)
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        *t >= self.start && *t < self.end
    }

    pub fn overlaps(&self, other: &TimeInterval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn duration(&self) -> Duration {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Period {
    Before,
    During,
    After,
}

impl Period {
    pub const ALL: [Period; 3] = [Period::Before, Period::During, Period::After];

    pub fn label(&self) -> &'static str {
        match self {
            Period::Before => "before",
            Period::During => "during",
            Period::After => "after",
        }
    }

    pub fn from_label(s: &str) -> Option<Period> {
        match s.trim() {
            "before" => Some(Period::Before),
            "during" => Some(Period::During),
            "after" => Some(Period::After),
            _ => None,
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Before / during / after segmentation of the analysis window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodPartition {
    before: TimeInterval,
    during: TimeInterval,
    after: TimeInterval,
}

impl PeriodPartition {
    pub fn new(
        before: TimeInterval,
        during: TimeInterval,
        after: TimeInterval,
    ) -> Result<Self, TraceError> {
        let ordered = before.end <= during.start && during.end <= after.start;
        if !ordered || before.overlaps(&during) || during.overlaps(&after) {
            return Err(TraceError::InvalidInput(
                "periods must be non-overlapping and ordered before < during < after".into(),
            ));
        }
        Ok(Self {
            before,
            during,
            after,
        })
    }

    pub fn get(&self, period: Period) -> &TimeInterval {
        match period {
            Period::Before => &self.before,
            Period::During => &self.during,
            Period::After => &self.after,
        }
    }

    pub fn classify(&self, t: &DateTime<Utc>) -> Option<Period> {
        Period::ALL.into_iter().find(|p| self.get(*p).contains(t))
    }

    /// Smallest interval covering all three periods.
    pub fn span(&self) -> TimeInterval {
        TimeInterval {
            start: self.before.start,
            end: self.after.end,
        }
    }
}

/// Column names and validity bounds for trace parsing.
#[derive(Debug, Clone)]
pub struct SchemaConfig {
    pub device_id: String,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
    pub precision_m: String,
    pub earliest: DateTime<Utc>,
    pub latest: DateTime<Utc>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            device_id: "device_id".into(),
            timestamp: "timestamp".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            precision_m: "precision_m".into(),
            earliest: Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap(),
            latest: Utc::now() + Duration::days(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    MissingField,
    BadEncoding,
    EmptyDeviceId,
    BadTimestamp,
    TimestampOutOfRange,
    BadLatitude,
    LatitudeOutOfRange,
    BadLongitude,
    LongitudeOutOfRange,
    BadPrecision,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::MissingField => "missing-field",
            RejectReason::BadEncoding => "bad-encoding",
            RejectReason::EmptyDeviceId => "empty-device-id",
            RejectReason::BadTimestamp => "bad-timestamp",
            RejectReason::TimestampOutOfRange => "timestamp-out-of-range",
            RejectReason::BadLatitude => "bad-lat",
            RejectReason::LatitudeOutOfRange => "lat-out-of-range",
            RejectReason::BadLongitude => "bad-lon",
            RejectReason::LongitudeOutOfRange => "lon-out-of-range",
            RejectReason::BadPrecision => "bad-precision",
        }
    }
}

/// A data row that could not be turned into a [`TracePoint`]. `row` counts
/// data rows from 1, excluding the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejection {
    pub row: usize,
    pub reason: RejectReason,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row={} reason={}", self.row, self.reason.code())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub points: Vec<TracePoint>,
    pub rejects: Vec<Rejection>,
    pub rows_read: usize,
    pub warnings: Vec<String>,
}

struct ColumnIndex {
    device_id: usize,
    timestamp: usize,
    lat: usize,
    lon: usize,
    precision_m: usize,
}

fn column(headers: &csv::ByteRecord, name: &str) -> Result<usize, TraceError> {
    headers
        .iter()
        .position(|h| std::str::from_utf8(h).map(str::trim) == Ok(name))
        .ok_or_else(|| TraceError::MissingColumn(name.to_string()))
}

fn parse_row(
    record: &csv::ByteRecord,
    idx: &ColumnIndex,
    schema: &SchemaConfig,
) -> Result<TracePoint, RejectReason> {
    let field = |i: usize| -> Result<&str, RejectReason> {
        let raw = record.get(i).ok_or(RejectReason::MissingField)?;
        std::str::from_utf8(raw)
            .map(str::trim)
            .map_err(|_| RejectReason::BadEncoding)
    };
    let device_id = field(idx.device_id)?;
    if device_id.is_empty() {
        return Err(RejectReason::EmptyDeviceId);
    }
    let timestamp = parse_timestamp(field(idx.timestamp)?).ok_or(RejectReason::BadTimestamp)?;
    if timestamp < schema.earliest || timestamp > schema.latest {
        return Err(RejectReason::TimestampOutOfRange);
    }
    let lat: f64 = field(idx.lat)?
        .parse()
        .map_err(|_| RejectReason::BadLatitude)?;
    if !lat.is_finite() {
        return Err(RejectReason::BadLatitude);
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(RejectReason::LatitudeOutOfRange);
    }
    let lon: f64 = field(idx.lon)?
        .parse()
        .map_err(|_| RejectReason::BadLongitude)?;
    if !lon.is_finite() {
        return Err(RejectReason::BadLongitude);
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(RejectReason::LongitudeOutOfRange);
    }
    let precision_m: f64 = field(idx.precision_m)?
        .parse()
        .map_err(|_| RejectReason::BadPrecision)?;
    if !precision_m.is_finite() || precision_m < 0.0 {
        return Err(RejectReason::BadPrecision);
    }
    Ok(TracePoint {
        device_id: device_id.to_string(),
        timestamp,
        location: GeoPoint { lon, lat },
        precision_m,
        projected: None,
    })
}

/// Parses comma-separated trace rows with a header line. Extra columns are
/// ignored. Rows that fail validation are returned as rejections rather
/// than dropped, so `rows_read == points.len() + rejects.len()`.
pub fn parse_traces<R: Read>(input: R, schema: &SchemaConfig) -> Result<ParseOutcome, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader.byte_headers()?.clone();
    let mut out = ParseOutcome::default();
    if headers.is_empty() {
        out.warnings.push("empty trace input".into());
        return Ok(out);
    }
    let idx = ColumnIndex {
        device_id: column(&headers, &schema.device_id)?,
        timestamp: column(&headers, &schema.timestamp)?,
        lat: column(&headers, &schema.lat)?,
        lon: column(&headers, &schema.lon)?,
        precision_m: column(&headers, &schema.precision_m)?,
    };
    let mut record = csv::ByteRecord::new();
    loop {
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                out.rows_read += 1;
                match parse_row(&record, &idx, schema) {
                    Ok(p) => out.points.push(p),
                    Err(reason) => out.rejects.push(Rejection {
                        row: out.rows_read,
                        reason,
                    }),
                }
            }
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                out.rows_read += 1;
                out.rejects.push(Rejection {
                    row: out.rows_read,
                    reason: RejectReason::BadEncoding,
                });
            }
        }
    }
    if out.rows_read == 0 {
        out.warnings.push("trace input has a header but no rows".into());
    }
    Ok(out)
}

/// Writes points in the trace CSV format read by [`parse_traces`].
pub fn write_traces<W: Write>(output: W, points: &[TracePoint]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["device_id", "timestamp", "lat", "lon", "precision_m"])?;
    for p in points {
        w.write_record([
            p.device_id.clone(),
            format_timestamp(&p.timestamp),
            p.location.lat.to_string(),
            p.location.lon.to_string(),
            p.precision_m.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fills in the UTM coordinates of every point.
pub fn project_points(points: &mut [TracePoint], zone: u8) -> Result<(), TraceError> {
    for p in points.iter_mut() {
        p.projected = Some(project_to_utm(p.location, zone)?);
    }
    Ok(())
}

/// Drops points whose confidence radius exceeds `max_precision_m`.
pub fn precision_filter(points: Vec<TracePoint>, max_precision_m: f64) -> Vec<TracePoint> {
    points
        .into_iter()
        .filter(|p| p.precision_m <= max_precision_m)
        .collect()
}

/// Keeps the points whose projected position lies inside the closed box.
pub fn spatial_filter(
    points: &[TracePoint],
    bbox: &BoundingBox,
) -> Result<Vec<TracePoint>, TraceError> {
    let mut kept = Vec::new();
    for p in points {
        let proj = p.projected()?;
        if proj.zone != bbox.zone {
            return Err(TraceError::InvalidInput(format!(
                "point in zone {} but box in zone {}",
                proj.zone, bbox.zone
            )));
        }
        if bbox.contains(&proj) {
            kept.push(p.clone());
        }
    }
    Ok(kept)
}

/// Single forward pass: a point is dropped when the great-circle speed from
/// the last retained point exceeds `max_speed_mps`. The first point is always
/// kept. A zero-duration segment with nonzero displacement counts as
/// infinite speed.
pub fn velocity_filter(traj: &Trajectory, max_speed_mps: f64) -> Result<Trajectory, TraceError> {
    if !(max_speed_mps > 0.0) {
        return Err(TraceError::InvalidInput(format!(
            "max speed must be positive, got {max_speed_mps}"
        )));
    }
    let mut kept: Vec<TracePoint> = Vec::with_capacity(traj.len());
    for p in traj.points() {
        let keep = match kept.last() {
            None => true,
            Some(anchor) => segment_speed(anchor, p) <= max_speed_mps,
        };
        if keep {
            kept.push(p.clone());
        }
    }
    Ok(Trajectory {
        device_id: traj.device_id.clone(),
        points: kept,
    })
}

/// Great-circle speed between two observations, m/s.
pub fn segment_speed(from: &TracePoint, to: &TracePoint) -> f64 {
    let dist = haversine_m(from.location, to.location);
    let dt = (to.timestamp - from.timestamp).num_milliseconds() as f64 / 1000.0;
    if dist == 0.0 {
        0.0
    } else if dt <= 0.0 {
        f64::INFINITY
    } else {
        dist / dt
    }
}

#[derive(Debug, Clone, Default)]
pub struct PartitionedPoints {
    pub before: Vec<TracePoint>,
    pub during: Vec<TracePoint>,
    pub after: Vec<TracePoint>,
    pub discarded: usize,
}

impl PartitionedPoints {
    pub fn get(&self, period: Period) -> &[TracePoint] {
        match period {
            Period::Before => &self.before,
            Period::During => &self.during,
            Period::After => &self.after,
        }
    }
}

/// Assigns each point to the period whose half-open interval contains it.
pub fn partition_by_period(points: &[TracePoint], partition: &PeriodPartition) -> PartitionedPoints {
    let mut out = PartitionedPoints::default();
    for p in points {
        match partition.classify(&p.timestamp) {
            Some(Period::Before) => out.before.push(p.clone()),
            Some(Period::During) => out.during.push(p.clone()),
            Some(Period::After) => out.after.push(p.clone()),
            None => out.discarded += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{bbox_from_centroid, Hemisphere};
    use proptest::prelude::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    fn point(dev: &str, t: DateTime<Utc>, lon: f64, lat: f64) -> TracePoint {
        TracePoint {
            device_id: dev.into(),
            timestamp: t,
            location: GeoPoint::new(lon, lat).unwrap(),
            precision_m: 5.0,
            projected: None,
        }
    }

    fn schema() -> SchemaConfig {
        SchemaConfig {
            latest: ts("2030-01-01T00:00:00Z"),
            ..SchemaConfig::default()
        }
    }

    #[test]
    fn parses_single_row() {
        let csv = "device_id,timestamp,lat,lon,precision_m\nabc,2020-05-15T14:03:22Z,35.75,-95.37,12.5\n";
        let out = parse_traces(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(out.points.len(), 1);
        assert!(out.rejects.is_empty());
        let p = &out.points[0];
        assert_eq!(p.device_id, "abc");
        assert_eq!(p.timestamp, ts("2020-05-15T14:03:22Z"));
        assert_eq!(p.location, GeoPoint { lon: -95.37, lat: 35.75 });
        assert_eq!(p.precision_m, 12.5);
    }

    #[test]
    fn rejects_out_of_range_latitude() {
        let csv = "device_id,timestamp,lat,lon,precision_m\nabc,2020-05-15T14:03:22Z,91.0,-95.37,12.5\n";
        let out = parse_traces(csv.as_bytes(), &schema()).unwrap();
        assert!(out.points.is_empty());
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].to_string(), "row=1 reason=lat-out-of-range");
    }

    #[test]
    fn reject_accounting_and_extra_columns() {
        let csv = "extra,device_id,timestamp,lat,lon,precision_m\n\
                   x,a,2020-05-15T14:03:22Z,35,-95,1\n\
                   x,b,not-a-time,35,-95,1\n\
                   x,c,2020-05-15T14:03:22Z,35,-95\n\
                   x,,2020-05-15T14:03:22Z,35,-95,1\n\
                   x,e,1999-05-15T14:03:22Z,35,-95,1\n\
                   x,f,2020-05-15T14:03:22Z,35,-195,1\n\
                   x,g,2020-05-15T14:03:22Z,35,-95,-1\n";
        let out = parse_traces(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(out.rows_read, 7);
        assert_eq!(out.points.len() + out.rejects.len(), out.rows_read);
        let codes: Vec<_> = out.rejects.iter().map(|r| r.reason.code()).collect();
        assert_eq!(
            codes,
            [
                "bad-timestamp",
                "missing-field",
                "empty-device-id",
                "timestamp-out-of-range",
                "lon-out-of-range",
                "bad-precision"
            ]
        );
        assert_eq!(out.rejects[0].row, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "device_id,timestamp,lat,precision_m\n";
        match parse_traces(csv.as_bytes(), &schema()) {
            Err(TraceError::MissingColumn(c)) => assert_eq!(c, "lon"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_warns() {
        let out = parse_traces("".as_bytes(), &schema()).unwrap();
        assert!(out.points.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    fn projected_box() -> BoundingBox {
        let c = ProjPoint::new(500_000.0, 4_000_000.0, 15, Hemisphere::North);
        bbox_from_centroid(c, 1000.0).unwrap()
    }

    fn with_proj(e: f64, n: f64) -> TracePoint {
        let mut p = point("d", ts("2020-05-15T00:00:00Z"), -93.0, 36.0);
        p.projected = Some(ProjPoint::new(e, n, 15, Hemisphere::North));
        p
    }

    #[test]
    fn spatial_filter_boundaries() {
        let b = projected_box();
        let pts = vec![
            with_proj(500_000.0, 4_000_000.0),
            with_proj(500_501.0, 4_000_000.0),
            with_proj(500_500.0, 4_000_500.0),
        ];
        let kept = spatial_filter(&pts, &b).unwrap();
        assert_eq!(kept, vec![pts[0].clone(), pts[2].clone()]);
        assert_eq!(spatial_filter(&kept, &b).unwrap(), kept);

        let mut wrong_zone = with_proj(500_000.0, 4_000_000.0);
        wrong_zone.projected.as_mut().unwrap().zone = 14;
        assert!(spatial_filter(&[wrong_zone], &b).is_err());
        let unprojected = point("d", ts("2020-05-15T00:00:00Z"), -93.0, 36.0);
        assert!(spatial_filter(&[unprojected], &b).is_err());
    }

    #[test]
    fn velocity_filter_drops_teleport() {
        let t0 = ts("2020-05-15T12:00:00Z");
        let a = point("d", t0, -95.0, 35.0);
        // ~100 km east of A, one minute later
        let b = point("d", t0 + Duration::seconds(60), -93.9, 35.0);
        // ~50 m from A, two minutes after A
        let c = point("d", t0 + Duration::seconds(120), -95.0, 35.00045);
        assert!(haversine_m(a.location, b.location) > 99_000.0);
        assert!(haversine_m(a.location, c.location) < 51.0);
        let traj = Trajectory::new("d", vec![a.clone(), b, c.clone()]).unwrap();
        let out = velocity_filter(&traj, 139.0).unwrap();
        assert_eq!(out.points(), &[a, c]);
        assert_eq!(velocity_filter(&out, 139.0).unwrap(), out);
    }

    #[test]
    fn velocity_filter_zero_duration() {
        let t0 = ts("2020-05-15T12:00:00Z");
        let a = point("d", t0, -95.0, 35.0);
        let same = point("d", t0, -95.0, 35.0);
        let moved = point("d", t0, -95.0, 35.001);
        let traj = Trajectory::new("d", vec![a.clone(), same.clone(), moved]).unwrap();
        let out = velocity_filter(&traj, 10.0).unwrap();
        assert_eq!(out.points(), &[a, same]);
        assert!(velocity_filter(&out, 0.0).is_err());
    }

    #[test]
    fn stationary_device_unchanged() {
        let t0 = ts("2020-05-15T12:00:00Z");
        let pts: Vec<_> = (0..10)
            .map(|i| point("d", t0 + Duration::seconds(i * 30), -95.0, 35.0))
            .collect();
        let traj = Trajectory::new("d", pts).unwrap();
        assert_eq!(velocity_filter(&traj, 1.0).unwrap(), traj);
    }

    fn partition() -> PeriodPartition {
        PeriodPartition::new(
            TimeInterval::new(ts("2020-05-01T00:00:00Z"), ts("2020-05-15T00:00:00Z")).unwrap(),
            TimeInterval::new(ts("2020-05-15T00:00:00Z"), ts("2020-05-16T00:00:00Z")).unwrap(),
            TimeInterval::new(ts("2020-05-16T00:00:00Z"), ts("2020-05-23T00:00:00Z")).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn partition_boundaries() {
        let p = partition();
        let pts = vec![
            point("d", ts("2020-05-15T00:00:00Z"), 0.0, 0.0),
            point("d", ts("2020-05-23T00:00:01Z"), 0.0, 0.0),
            point("d", ts("2020-05-14T23:59:59Z"), 0.0, 0.0),
        ];
        let out = partition_by_period(&pts, &p);
        assert_eq!(out.during, vec![pts[0].clone()]);
        assert_eq!(out.before, vec![pts[2].clone()]);
        assert!(out.after.is_empty());
        assert_eq!(out.discarded, 1);
    }

    #[test]
    fn overlapping_partition_rejected() {
        let before =
            TimeInterval::new(ts("2020-05-01T00:00:00Z"), ts("2020-05-15T12:00:00Z")).unwrap();
        let during =
            TimeInterval::new(ts("2020-05-15T00:00:00Z"), ts("2020-05-16T00:00:00Z")).unwrap();
        let after =
            TimeInterval::new(ts("2020-05-16T00:00:00Z"), ts("2020-05-23T00:00:00Z")).unwrap();
        assert!(PeriodPartition::new(before, during, after).is_err());
        assert!(PeriodPartition::new(after, during, before).is_err());
        assert!(TimeInterval::new(during.end, during.start).is_err());
    }

    #[test]
    fn trajectory_invariants() {
        let t0 = ts("2020-05-15T12:00:00Z");
        let a = point("a", t0, 0.0, 0.0);
        let b = point("b", t0, 0.0, 0.0);
        assert!(Trajectory::new("a", vec![a.clone(), b]).is_err());
        let late = point("a", t0 + Duration::seconds(5), 0.0, 0.0);
        assert!(Trajectory::new("a", vec![late, a]).is_err());
    }

    proptest! {
        #[test]
        fn partition_matches_brute_force(offsets in prop::collection::vec(-86_400i64 * 20..86_400 * 30, 0..200)) {
            let p = partition();
            let base = ts("2020-05-01T00:00:00Z");
            let pts: Vec<_> = offsets.iter()
                .map(|o| point("d", base + Duration::seconds(*o), 0.0, 0.0))
                .collect();
            let out = partition_by_period(&pts, &p);
            let mut expected: [Vec<TracePoint>; 3] = Default::default();
            let mut discarded = 0;
            for pt in &pts {
                let mut hit = false;
                for (k, period) in Period::ALL.iter().enumerate() {
                    let iv = p.get(*period);
                    if pt.timestamp >= iv.start && pt.timestamp < iv.end {
                        expected[k].push(pt.clone());
                        hit = true;
                    }
                }
                if !hit { discarded += 1; }
            }
            prop_assert_eq!(&out.before, &expected[0]);
            prop_assert_eq!(&out.during, &expected[1]);
            prop_assert_eq!(&out.after, &expected[2]);
            prop_assert_eq!(out.discarded, discarded);
        }

        #[test]
        fn velocity_filter_invariants(
            steps in prop::collection::vec((0i64..600, -0.02f64..0.02, -0.02f64..0.02), 1..60),
            max_speed in 1.0f64..200.0,
        ) {
            let mut t = ts("2020-05-15T00:00:00Z");
            let (mut lon, mut lat) = (-95.0, 35.0);
            let mut pts = Vec::new();
            for (dt, dlon, dlat) in steps {
                t += Duration::seconds(dt);
                lon += dlon;
                lat += dlat;
                pts.push(point("d", t, lon, lat));
            }
            let traj = Trajectory::new("d", pts).unwrap();
            let out = velocity_filter(&traj, max_speed).unwrap();
            prop_assert!(out.len() <= traj.len());
            prop_assert_eq!(&out.points()[0], &traj.points()[0]);
            for w in out.points().windows(2) {
                prop_assert!(segment_speed(&w[0], &w[1]) <= max_speed);
            }
            prop_assert_eq!(velocity_filter(&out, max_speed).unwrap(), out);
        }
    }
}

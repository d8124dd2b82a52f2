//! Mobility metrics: radius of gyration, extended stays and visits per time
//! bucket, plus the time-bucketed series they are reported as.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;

use crate::format::{format_timestamp, parse_timestamp, sig6};
use crate::geo::{BoundingBox, ProjPoint};
use crate::trace::{TimeInterval, TraceError, TracePoint, Trajectory};

pub const HOUR_SECONDS: i64 = 3600;
pub const DAY_SECONDS: i64 = 86_400;

pub const METRIC_ROG: &str = "radius_of_gyration_m";
pub const METRIC_STAYS: &str = "stays";
pub const METRIC_VISITS: &str = "visits";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("malformed series csv at line {line}: {reason}")]
    BadSeries { line: usize, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> MetricsError {
    MetricsError::InvalidInput(msg.into())
}

/// Root-mean-square distance of the points from their centre of mass, in
/// projected coordinates.
pub fn radius_of_gyration(traj: &Trajectory) -> Result<f64, MetricsError> {
    radius_of_gyration_points(traj.points())
}

pub fn radius_of_gyration_points(points: &[TracePoint]) -> Result<f64, MetricsError> {
    let coords = points
        .iter()
        .map(|p| p.projected().map(|q| [q.easting, q.northing]))
        .collect::<Result<Vec<_>, _>>()?;
    radius_of_gyration_xy(&coords)
}

pub fn radius_of_gyration_xy(coords: &[[f64; 2]]) -> Result<f64, MetricsError> {
    if coords.is_empty() {
        return Err(invalid("radius of gyration of an empty trajectory"));
    }
    let n = coords.len() as f64;
    let cx = coords.iter().map(|c| c[0]).sum::<f64>() / n;
    let cy = coords.iter().map(|c| c[1]).sum::<f64>() / n;
    let ss: f64 = coords
        .iter()
        .map(|c| (c[0] - cx).powi(2) + (c[1] - cy).powi(2))
        .sum();
    Ok((ss / n).sqrt())
}

/// A cluster of consecutive observations that stayed near its first point.
#[derive(Debug, Clone, PartialEq)]
pub struct Stay {
    pub device_id: String,
    pub anchor: ProjPoint,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub point_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayParams {
    pub min_duration: Duration,
    pub max_distance_m: f64,
}

impl Default for StayParams {
    fn default() -> Self {
        Self {
            min_duration: Duration::minutes(15),
            max_distance_m: 100.0,
        }
    }
}

/// Anchor-based sequential stay detection.
///
/// Starting from an anchor point, the cluster grows while each following
/// point lies within `max_distance_m` of the anchor. A cluster of at least
/// two points spanning `min_duration` or more is emitted as a stay. The scan
/// resumes at the first point that broke the cluster.
pub fn detect_stays(traj: &Trajectory, params: &StayParams) -> Result<Vec<Stay>, MetricsError> {
    if !(params.max_distance_m > 0.0) || params.min_duration <= Duration::zero() {
        return Err(invalid("stay thresholds must be positive"));
    }
    let pts = traj.points();
    let proj = pts
        .iter()
        .map(TracePoint::projected)
        .collect::<Result<Vec<_>, _>>()?;
    let mut stays = Vec::new();
    let mut i = 0;
    while i < pts.len() {
        let anchor = proj[i];
        let mut j = i + 1;
        while j < pts.len() && anchor.distance(&proj[j]) <= params.max_distance_m {
            j += 1;
        }
        let count = j - i;
        let span = pts[j - 1].timestamp - pts[i].timestamp;
        if count >= 2 && span >= params.min_duration {
            stays.push(Stay {
                device_id: traj.device_id().to_string(),
                anchor,
                start: pts[i].timestamp,
                end: pts[j - 1].timestamp,
                point_count: count,
            });
        }
        i = j;
    }
    Ok(stays)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    bbox: BoundingBox,
    rows: usize,
    cols: usize,
}

impl GridSpec {
    pub fn new(bbox: BoundingBox, rows: usize, cols: usize) -> Result<Self, MetricsError> {
        if rows == 0 || cols == 0 {
            return Err(invalid("grid needs at least one row and one column"));
        }
        Ok(Self { bbox, rows, cols })
    }

    pub fn single(bbox: BoundingBox) -> Self {
        Self {
            bbox,
            rows: 1,
            cols: 1,
        }
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major cell index. Points on the max edges belong to the last
    /// row/column.
    pub fn cell_of(&self, p: &ProjPoint) -> Option<usize> {
        if !self.bbox.contains(p) {
            return None;
        }
        let cell_w = self.bbox.width() / self.cols as f64;
        let cell_h = self.bbox.height() / self.rows as f64;
        let col = (((p.easting - self.bbox.min_e) / cell_w) as usize).min(self.cols - 1);
        let row = (((p.northing - self.bbox.min_n) / cell_h) as usize).min(self.rows - 1);
        Some(row * self.cols + col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricBucket {
    pub start: DateTime<Utc>,
    pub value: f64,
}

/// Uniform-duration buckets of one metric over one period.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub metric: String,
    pub bucket_seconds: i64,
    pub period: String,
    pub buckets: Vec<MetricBucket>,
}

impl MetricSeries {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.buckets.iter().map(|b| b.value)
    }

    /// CSV with header `bucket_start,value,metric,period`. `exact` writes
    /// round-trippable values; otherwise six significant digits.
    pub fn write_csv<W: Write>(&self, out: W, exact: bool) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bucket_start", "value", "metric", "period"])?;
        for b in &self.buckets {
            let value = if exact {
                b.value.to_string()
            } else {
                sig6(b.value)
            };
            w.write_record([
                format_timestamp(&b.start),
                value,
                self.metric.clone(),
                self.period.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self, exact: bool) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, exact)
            .expect("writing to memory cannot fail");
        buf
    }

    /// Reads a single series written by [`MetricSeries::write_csv`].
    pub fn read_csv<R: Read>(input: R, bucket_seconds: i64) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let expected = ["bucket_start", "value", "metric", "period"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(MetricsError::BadSeries {
                line: 1,
                reason: format!("expected header {}", expected.join(",")),
            });
        }
        let mut metric = None;
        let mut period = None;
        let mut buckets: Vec<MetricBucket> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let bad = |reason: &str| MetricsError::BadSeries {
                line,
                reason: reason.to_string(),
            };
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let start = parse_timestamp(&rec[0]).ok_or_else(|| bad("bad bucket_start"))?;
            let value: f64 = rec[1].parse().map_err(|_| bad("bad value"))?;
            if metric.get_or_insert_with(|| rec[2].to_string()) != &rec[2]
                || period.get_or_insert_with(|| rec[3].to_string()) != &rec[3]
            {
                return Err(bad("mixed metric or period"));
            }
            if let Some(prev) = buckets.last() {
                let gap = (start - prev.start).num_seconds();
                if gap <= 0 || gap % bucket_seconds != 0 {
                    return Err(bad("buckets not ordered on the bucket grid"));
                }
            }
            buckets.push(MetricBucket { start, value });
        }
        Ok(Self {
            metric: metric.unwrap_or_default(),
            bucket_seconds,
            period: period.unwrap_or_default(),
            buckets,
        })
    }
}

fn floor_to(t: DateTime<Utc>, bucket_seconds: i64) -> DateTime<Utc> {
    let secs = t.timestamp().div_euclid(bucket_seconds) * bucket_seconds;
    DateTime::from_timestamp(secs, 0).expect("bucket start in range")
}

/// Bucket starts on the epoch-aligned grid covering `range`.
pub fn bucket_starts(range: &TimeInterval, bucket_seconds: i64) -> Vec<DateTime<Utc>> {
    let step = Duration::seconds(bucket_seconds);
    let mut t = floor_to(range.start, bucket_seconds);
    let mut out = Vec::new();
    while t < range.end {
        out.push(t);
        t += step;
    }
    out
}

fn bucket_index(t: &DateTime<Utc>, first: &DateTime<Utc>, bucket_seconds: i64) -> usize {
    ((*t - *first).num_seconds().div_euclid(bucket_seconds)) as usize
}

/// Number of stays starting in each UTC day of `range`, summed over devices.
pub fn stays_per_day(stays: &[Stay], range: &TimeInterval, period: &str) -> MetricSeries {
    let starts = bucket_starts(range, DAY_SECONDS);
    let mut counts = vec![0usize; starts.len()];
    for s in stays.iter().filter(|s| range.contains(&s.start)) {
        counts[bucket_index(&s.start, &starts[0], DAY_SECONDS)] += 1;
    }
    MetricSeries {
        metric: METRIC_STAYS.into(),
        bucket_seconds: DAY_SECONDS,
        period: period.into(),
        buckets: starts
            .into_iter()
            .zip(counts)
            .map(|(start, c)| MetricBucket {
                start,
                value: c as f64,
            })
            .collect(),
    }
}

/// Visits per bucket: for every bucket, the number of (device, grid cell)
/// pairs with at least one observation. With a 1x1 grid this is the number
/// of distinct devices present. Buckets without visits are reported as 0.
pub fn visits_per_bucket(
    trajectories: &[Trajectory],
    grid: &GridSpec,
    bucket_seconds: i64,
    range: &TimeInterval,
    period: &str,
) -> Result<MetricSeries, MetricsError> {
    if bucket_seconds <= 0 {
        return Err(invalid("bucket duration must be positive"));
    }
    let starts = bucket_starts(range, bucket_seconds);
    let mut counts = vec![0usize; starts.len()];
    for traj in trajectories {
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for p in traj.points().iter().filter(|p| range.contains(&p.timestamp)) {
            let proj = p.projected()?;
            let cell = grid.cell_of(&proj).ok_or_else(|| {
                invalid(format!(
                    "point of `{}` at ({}, {}) lies outside the grid",
                    p.device_id, proj.easting, proj.northing
                ))
            })?;
            seen.insert((bucket_index(&p.timestamp, &starts[0], bucket_seconds), cell));
        }
        for (bucket, _) in seen {
            counts[bucket] += 1;
        }
    }
    Ok(MetricSeries {
        metric: METRIC_VISITS.into(),
        bucket_seconds,
        period: period.into(),
        buckets: starts
            .into_iter()
            .zip(counts)
            .map(|(start, c)| MetricBucket {
                start,
                value: c as f64,
            })
            .collect(),
    })
}

/// Daily mean, over devices observed that day, of the radius of gyration of
/// each device's points of that day. Days without data are omitted.
pub fn rog_per_day(
    trajectories: &[Trajectory],
    range: &TimeInterval,
    period: &str,
) -> Result<MetricSeries, MetricsError> {
    let mut per_day: BTreeMap<DateTime<Utc>, Vec<f64>> = BTreeMap::new();
    for traj in trajectories {
        let mut days: BTreeMap<DateTime<Utc>, Vec<[f64; 2]>> = BTreeMap::new();
        for p in traj.points().iter().filter(|p| range.contains(&p.timestamp)) {
            let q = p.projected()?;
            days.entry(floor_to(p.timestamp, DAY_SECONDS))
                .or_default()
                .push([q.easting, q.northing]);
        }
        for (day, coords) in days {
            per_day
                .entry(day)
                .or_default()
                .push(radius_of_gyration_xy(&coords)?);
        }
    }
    Ok(MetricSeries {
        metric: METRIC_ROG.into(),
        bucket_seconds: DAY_SECONDS,
        period: period.into(),
        buckets: per_day
            .into_iter()
            .map(|(start, v)| MetricBucket {
                start,
                value: v.iter().sum::<f64>() / v.len() as f64,
            })
            .collect(),
    })
}

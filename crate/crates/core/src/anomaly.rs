//! Hour-of-day baselines and Z-score anomaly flagging.

use std::io::{Read, Write};

use chrono::{DateTime, Timelike, Utc};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::format::{format_timestamp, parse_timestamp, sig6};
use crate::metrics::{MetricSeries, HOUR_SECONDS};
use crate::trace::TimeInterval;

pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed {what} csv at line {line}: {reason}")]
    BadCsv {
        what: &'static str,
        line: usize,
        reason: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// One mean/std per hour of day.
    HourOfDay,
    /// A single mean/std over all baseline buckets.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HourStat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub sample_count: usize,
}

impl HourStat {
    /// At least two samples are needed before an hour can be tested.
    pub fn available(&self) -> bool {
        self.sample_count >= 2
    }

    fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            sample_count: samples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourBaseline {
    pub mode: BaselineMode,
    pub hours: [HourStat; 24],
}

impl HourBaseline {
    pub fn stat(&self, hour: u32) -> &HourStat {
        &self.hours[hour as usize % 24]
    }

    /// CSV `hour,mean,std,samples`.
    pub fn write_csv<W: Write>(&self, out: W, exact: bool) -> Result<(), AnomalyError> {
        let num = |x: f64| if exact { x.to_string() } else { sig6(x) };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["hour", "mean", "std", "samples"])?;
        for (h, s) in self.hours.iter().enumerate() {
            w.write_record([
                h.to_string(),
                num(s.mean),
                num(s.std),
                s.sample_count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, mode: BaselineMode) -> Result<Self, AnomalyError> {
        let mut r = csv::Reader::from_reader(input);
        let mut hours = [HourStat::default(); 24];
        let mut seen = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |reason: &str| AnomalyError::BadCsv {
                what: "baseline",
                line: i + 2,
                reason: reason.into(),
            };
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let h: usize = rec[0].parse().map_err(|_| bad("bad hour"))?;
            if h >= 24 {
                return Err(bad("hour out of range"));
            }
            hours[h] = HourStat {
                mean: rec[1].parse().map_err(|_| bad("bad mean"))?,
                std: rec[2].parse().map_err(|_| bad("bad std"))?,
                sample_count: rec[3].parse().map_err(|_| bad("bad samples"))?,
            };
            seen += 1;
        }
        if seen != 24 {
            return Err(AnomalyError::BadCsv {
                what: "baseline",
                line: seen + 1,
                reason: "expected 24 hours".into(),
            });
        }
        Ok(Self { mode, hours })
    }
}

fn require_hourly(series: &MetricSeries) -> Result<(), AnomalyError> {
    if series.bucket_seconds != HOUR_SECONDS {
        return Err(AnomalyError::InvalidInput(format!(
            "series `{}` has {} s buckets, hourly buckets required",
            series.metric, series.bucket_seconds
        )));
    }
    Ok(())
}

/// Population mean and standard deviation of the hourly buckets that fall in
/// any of `intervals`, per hour of day (or pooled).
pub fn build_baseline(
    series: &[&MetricSeries],
    intervals: &[TimeInterval],
    mode: BaselineMode,
) -> Result<HourBaseline, AnomalyError> {
    let mut samples: [Vec<f64>; 24] = Default::default();
    for s in series {
        require_hourly(s)?;
        for b in &s.buckets {
            if intervals.iter().any(|iv| iv.contains(&b.start)) {
                samples[b.start.hour() as usize].push(b.value);
            }
        }
    }
    let hours = match mode {
        BaselineMode::HourOfDay => {
            std::array::from_fn(|h| HourStat::from_samples(&samples[h]))
        }
        BaselineMode::Pooled => {
            let all: Vec<f64> = samples.iter().flatten().copied().collect();
            [HourStat::from_samples(&all); 24]
        }
    };
    Ok(HourBaseline { mode, hours })
}

/// Standard score. A zero spread yields 0 when `x` equals the mean and a
/// signed infinity otherwise.
pub fn z_score(x: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (x - mean) / std
    } else if x == mean {
        0.0
    } else if x > mean {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBucket {
    pub start: DateTime<Utc>,
    pub value: f64,
    /// `None` when the baseline for this hour is unavailable.
    pub z: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub metric: String,
    pub threshold: f64,
    pub baseline_period: String,
    pub test_period: String,
    pub scored: Vec<ScoredBucket>,
}

impl AnomalyReport {
    pub fn flagged(&self) -> impl Iterator<Item = &ScoredBucket> {
        self.scored.iter().filter(|s| s.flagged)
    }

    pub fn flag_count(&self) -> usize {
        self.flagged().count()
    }

    pub fn untestable(&self) -> impl Iterator<Item = &ScoredBucket> {
        self.scored.iter().filter(|s| s.z.is_none())
    }

    /// CSV `bucket_start,value,z,flagged`; untestable buckets carry `z=na`.
    pub fn write_csv<W: Write>(&self, out: W, exact: bool) -> Result<(), AnomalyError> {
        let num = |x: f64| if exact { x.to_string() } else { sig6(x) };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bucket_start", "value", "z", "flagged"])?;
        for s in &self.scored {
            w.write_record([
                format_timestamp(&s.start),
                num(s.value),
                s.z.map(num).unwrap_or_else(|| "na".into()),
                s.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        input: R,
        metric: &str,
        threshold: f64,
        baseline_period: &str,
        test_period: &str,
    ) -> Result<Self, AnomalyError> {
        let mut r = csv::Reader::from_reader(input);
        let mut scored = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |reason: &str| AnomalyError::BadCsv {
                what: "anomaly",
                line: i + 2,
                reason: reason.into(),
            };
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let z = match &rec[2] {
                "na" => None,
                v => Some(v.parse().map_err(|_| bad("bad z"))?),
            };
            scored.push(ScoredBucket {
                start: parse_timestamp(&rec[0]).ok_or_else(|| bad("bad bucket_start"))?,
                value: rec[1].parse().map_err(|_| bad("bad value"))?,
                z,
                flagged: rec[3].parse().map_err(|_| bad("bad flagged"))?,
            });
        }
        Ok(Self {
            metric: metric.into(),
            threshold,
            baseline_period: baseline_period.into(),
            test_period: test_period.into(),
            scored,
        })
    }
}

/// Scores every bucket of an hourly series against the baseline of its hour
/// of day and flags those with `|z| >= threshold`.
pub fn flag_anomalies(
    series: &MetricSeries,
    baseline: &HourBaseline,
    threshold: f64,
    baseline_period: &str,
) -> Result<AnomalyReport, AnomalyError> {
    require_hourly(series)?;
    if !(threshold > 0.0) {
        return Err(AnomalyError::InvalidInput(format!(
            "z threshold must be positive, got {threshold}"
        )));
    }
    let scored = series
        .buckets
        .iter()
        .map(|b| {
            let stat = baseline.stat(b.start.hour());
            let z = stat
                .available()
                .then(|| z_score(b.value, stat.mean, stat.std));
            ScoredBucket {
                start: b.start,
                value: b.value,
                z,
                flagged: z.is_some_and(|z| z.abs() >= threshold),
            }
        })
        .collect();
    Ok(AnomalyReport {
        metric: series.metric.clone(),
        threshold,
        baseline_period: baseline_period.into(),
        test_period: series.period.clone(),
        scored,
    })
}

/// Two-sided normal quantile for a central coverage `level`.
pub fn normal_quantile(level: f64) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    std_normal.inverse_cdf(0.5 + level / 2.0)
}

/// `mean ± q·std` per hour of day, `None` for hours without a usable
/// baseline.
pub fn confidence_band(baseline: &HourBaseline, level: f64) -> [Option<(f64, f64)>; 24] {
    let q = normal_quantile(level);
    std::array::from_fn(|h| {
        let s = &baseline.hours[h];
        s.available()
            .then(|| (s.mean - q * s.std, s.mean + q * s.std))
    })
}

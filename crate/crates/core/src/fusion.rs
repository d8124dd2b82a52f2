//! Evidence fusion and the report bundle.
//!
//! The verdict comes from a two-input rule table: mobility fires when at
//! least one bucket of the tested period is flagged, imagery fires when any
//! change map has `changed_fraction >= min_changed_fraction`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anomaly::{confidence_band, AnomalyError, AnomalyReport, HourBaseline};
use crate::format::{format_timestamp, sig6};
use crate::imagery::{EventSpec, SelectionResult};
use crate::metrics::{MetricSeries, MetricsError};
use crate::raster::geotiff::{write_geotiff, SampleType, WriteOptions};
use crate::raster::{write_pgm, ChangeMap, ChangeStats, RasterError};

pub const DEFAULT_MIN_CHANGED_FRACTION: f64 = 0.05;
pub const DEFAULT_BAND_LEVEL: f64 = 0.95;
pub const REPORT_DIR: &str = "report";
pub const MANIFEST_NAME: &str = "MANIFEST";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report directory {path} is not writable: {source}")]
    Unwritable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    NoEvidence,
    MobilityOnly,
    ImageryOnly,
    CorroboratedEvent,
}

impl Verdict {
    pub fn from_evidence(mobility: bool, imagery: bool) -> Self {
        match (mobility, imagery) {
            (false, false) => Verdict::NoEvidence,
            (true, false) => Verdict::MobilityOnly,
            (false, true) => Verdict::ImageryOnly,
            (true, true) => Verdict::CorroboratedEvent,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::NoEvidence => "NoEvidence",
            Verdict::MobilityOnly => "MobilityOnly",
            Verdict::ImageryOnly => "ImageryOnly",
            Verdict::CorroboratedEvent => "CorroboratedEvent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Verdict::NoEvidence,
            Verdict::MobilityOnly,
            Verdict::ImageryOnly,
            Verdict::CorroboratedEvent,
        ]
        .into_iter()
        .find(|v| v.label() == s)
    }

    /// Position in the evidence order; the two one-sided verdicts share a
    /// rank and are incomparable.
    pub fn rank(&self) -> u8 {
        match self {
            Verdict::NoEvidence => 0,
            Verdict::MobilityOnly | Verdict::ImageryOnly => 1,
            Verdict::CorroboratedEvent => 2,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub const RULE_MOBILITY: &str = "mobility";
pub const RULE_IMAGERY_PREFIX: &str = "imagery.";
pub const RULE_IMAGERY_ANY: &str = "imagery";

#[derive(Debug, Clone, PartialEq)]
pub struct RuleEvaluation {
    pub rule: String,
    pub condition: String,
    pub holds: bool,
}

impl fmt::Display for RuleEvaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} -> {}", self.rule, self.condition, self.holds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventInference {
    pub verdict: Verdict,
    pub mobility_evidence: Option<AnomalyReport>,
    pub imagery_evidence: Vec<ChangeStats>,
    pub min_changed_fraction: f64,
    pub rule_trace: Vec<RuleEvaluation>,
}

pub fn infer_event(
    anoms: Option<&AnomalyReport>,
    stats: &[ChangeStats],
    min_changed_fraction: f64,
) -> EventInference {
    let mut trace = Vec::new();
    let mobility = match anoms {
        Some(a) => {
            let n = a.flag_count();
            trace.push(RuleEvaluation {
                rule: RULE_MOBILITY.into(),
                condition: format!("flagged {} buckets ({n}) >= 1", a.test_period),
                holds: n >= 1,
            });
            n >= 1
        }
        None => {
            trace.push(RuleEvaluation {
                rule: RULE_MOBILITY.into(),
                condition: "no anomaly report".into(),
                holds: false,
            });
            false
        }
    };
    for s in stats {
        trace.push(RuleEvaluation {
            rule: format!("{RULE_IMAGERY_PREFIX}{}", s.kind),
            condition: format!(
                "changed_fraction ({}) >= {}",
                sig6(s.changed_fraction),
                sig6(min_changed_fraction)
            ),
            holds: s.changed_fraction >= min_changed_fraction,
        });
    }
    let imagery = stats.iter().any(|s| s.changed_fraction >= min_changed_fraction);
    trace.push(RuleEvaluation {
        rule: RULE_IMAGERY_ANY.into(),
        condition: if stats.is_empty() {
            "no change statistics".into()
        } else {
            "any imagery rule holds".into()
        },
        holds: imagery,
    });
    EventInference {
        verdict: Verdict::from_evidence(mobility, imagery),
        mobility_evidence: anoms.cloned(),
        imagery_evidence: stats.to_vec(),
        min_changed_fraction,
        rule_trace: trace,
    }
}

/// Recomputes the verdict from a rule trace alone. Returns `None` when the
/// trace is incomplete or internally inconsistent.
pub fn replay_trace(trace: &[RuleEvaluation]) -> Option<Verdict> {
    let find = |name: &str| trace.iter().find(|r| r.rule == name).map(|r| r.holds);
    let mobility = find(RULE_MOBILITY)?;
    let imagery = find(RULE_IMAGERY_ANY)?;
    let any_kind = trace
        .iter()
        .filter(|r| r.rule.starts_with(RULE_IMAGERY_PREFIX))
        .any(|r| r.holds);
    if any_kind != imagery {
        return None;
    }
    Some(Verdict::from_evidence(mobility, imagery))
}

/// Everything the report shows.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub event: &'a EventSpec,
    pub inference: &'a EventInference,
    pub series: &'a [MetricSeries],
    pub baseline: &'a HourBaseline,
    pub band_level: f64,
    pub selection: Option<&'a SelectionResult>,
    pub change_maps: &'a [ChangeMap],
    /// Free-form lines, e.g. why imagery was skipped.
    pub notes: &'a [String],
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), ReportError>) -> Result<Vec<u8>, ReportError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn band_csv(baseline: &HourBaseline, level: f64) -> Vec<u8> {
    let band = confidence_band(baseline, level);
    let mut s = String::from("hour,mean,lower,upper,level\n");
    for (h, b) in band.iter().enumerate() {
        let mean = &baseline.hours[h];
        match b {
            Some((lo, hi)) => writeln!(
                s,
                "{h},{},{},{},{}",
                sig6(mean.mean),
                sig6(*lo),
                sig6(*hi),
                sig6(level)
            ),
            None => writeln!(s, "{h},na,na,na,{}", sig6(level)),
        }
        .expect("string write");
    }
    s.into_bytes()
}

fn summary(inputs: &ReportInputs) -> String {
    let inf = inputs.inference;
    let ev = inputs.event;
    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line("EVENT".into());
    line(format!("name: {}", ev.name));
    line(format!("event_time: {}", format_timestamp(&ev.event_time)));
    line(format!(
        "roi: zone {} e [{}, {}] n [{}, {}]",
        ev.roi.zone,
        sig6(ev.roi.min_e),
        sig6(ev.roi.max_e),
        sig6(ev.roi.min_n),
        sig6(ev.roi.max_n)
    ));
    line(String::new());

    line("VERDICT".into());
    line(format!("verdict: {}", inf.verdict));
    line(String::new());

    line("MOBILITY EVIDENCE".into());
    match &inf.mobility_evidence {
        Some(a) => {
            line(format!("metric: {}", a.metric));
            line(format!("baseline_period: {}", a.baseline_period));
            line(format!("test_period: {}", a.test_period));
            line(format!("z_threshold: {}", sig6(a.threshold)));
            line(format!("buckets_scored: {}", a.scored.len()));
            line(format!("buckets_untestable: {}", a.untestable().count()));
            line(format!("flagged_buckets: {}", a.flag_count()));
            line("bucket_start value z".into());
            for b in a.flagged() {
                line(format!(
                    "{} {} {}",
                    format_timestamp(&b.start),
                    sig6(b.value),
                    b.z.map(sig6).unwrap_or_else(|| "na".into())
                ));
            }
        }
        None => line("no anomaly report".into()),
    }
    line(String::new());

    line("IMAGERY EVIDENCE".into());
    match inputs.selection {
        Some(sel) => {
            for (role, img, u) in [
                ("before", &sel.before, sel.u_before),
                ("after", &sel.after, sel.u_after),
            ] {
                line(format!(
                    "{role}_image: {} captured {} cloud {} utility {}",
                    img.image_id,
                    format_timestamp(&img.capture_time),
                    sig6(img.cloud_fraction),
                    sig6(u)
                ));
            }
            line(format!("candidates_considered: {}", sel.candidates_considered));
        }
        None => line("no image pair selected".into()),
    }
    line(format!("min_changed_fraction: {}", sig6(inf.min_changed_fraction)));
    line("kind threshold mean_abs_delta mean_delta changed_fraction changed_area_m2 pixel_count".into());
    for st in &inf.imagery_evidence {
        line(format!(
            "{} {} {} {} {} {} {}",
            st.kind,
            sig6(st.threshold),
            sig6(st.mean_abs_delta),
            sig6(st.mean_delta),
            sig6(st.changed_fraction),
            sig6(st.changed_area_m2),
            st.pixel_count
        ));
    }
    for n in inputs.notes {
        line(format!("note: {n}"));
    }
    line(String::new());

    line("RULE TRACE".into());
    for (i, r) in inf.rule_trace.iter().enumerate() {
        line(format!("{}. {r}", i + 1));
    }
    line(format!("=> {}", inf.verdict));
    s
}

/// Builds every report file in memory, keyed by path relative to the
/// report directory. The manifest is not included.
pub fn build_report_files(inputs: &ReportInputs) -> Result<BTreeMap<String, Vec<u8>>, ReportError> {
    let mut files = BTreeMap::new();
    for s in inputs.series {
        files.insert(
            format!("metrics/{}_{}.csv", s.metric, s.period),
            s.to_csv_bytes(false),
        );
    }
    if let Some(a) = &inputs.inference.mobility_evidence {
        files.insert(
            "anomalies.csv".to_string(),
            csv_bytes(|b| Ok(a.write_csv(b, false)?))?,
        );
    }
    files.insert(
        "baseline.csv".to_string(),
        csv_bytes(|b| Ok(inputs.baseline.write_csv(b, false)?))?,
    );
    files.insert(
        "confidence_band.csv".to_string(),
        band_csv(inputs.baseline, inputs.band_level),
    );
    for m in inputs.change_maps {
        let stem = format!("changemaps/{}_delta", m.kind);
        let mut tif = Cursor::new(Vec::new());
        write_geotiff(&mut tif, &m.delta, &WriteOptions::new(SampleType::F32))?;
        files.insert(format!("{stem}.tif"), tif.into_inner());
        let mut pgm = Vec::new();
        let stretch = write_pgm(&mut pgm, &m.delta)?;
        files.insert(format!("{stem}.pgm"), pgm);
        files.insert(format!("{stem}.pgm.txt"), stretch.sidecar().into_bytes());
    }
    files.insert("summary.txt".to_string(), summary(inputs).into_bytes());
    Ok(files)
}

pub fn manifest_text(files: &BTreeMap<String, Vec<u8>>) -> String {
    files
        .iter()
        .map(|(path, bytes)| format!("sha256 {} {path}\n", hex::encode(Sha256::digest(bytes))))
        .collect()
}

fn probe_writable(dir: &Path) -> Result<(), ReportError> {
    let unwritable = |source| ReportError::Unwritable {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(unwritable)?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(unwritable)?;
    std::fs::remove_file(&probe).map_err(unwritable)?;
    Ok(())
}

/// Writes the bundle under `<out_dir>/report` and returns the report
/// directory. Nothing is written unless the directory accepts a probe file.
pub fn render_report(inputs: &ReportInputs, out_dir: &Path) -> Result<PathBuf, ReportError> {
    let files = build_report_files(inputs)?;
    let dir = out_dir.join(REPORT_DIR);
    probe_writable(&dir)?;
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest_text(&files))?;
    Ok(dir)
}

/// Checks every manifest line against the file on disk. Returns the number
/// of files verified.
pub fn verify_manifest(report_dir: &Path) -> Result<usize, String> {
    let text = std::fs::read_to_string(report_dir.join(MANIFEST_NAME))
        .map_err(|e| format!("cannot read manifest: {e}"))?;
    let mut n = 0;
    for line in text.lines() {
        let mut parts = line.splitn(3, ' ');
        let (Some("sha256"), Some(hex_digest), Some(rel)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(format!("malformed manifest line: {line}"));
        };
        let bytes = std::fs::read(report_dir.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if hex::encode(Sha256::digest(&bytes)) != hex_digest {
            return Err(format!("{rel}: checksum mismatch"));
        }
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::{BaselineMode, HourStat, ScoredBucket};
    use crate::format::parse_timestamp;
    use crate::geo::BoundingBox;
    use crate::raster::ChangeKind;
    use proptest::prelude::*;

    fn report(flags: &[bool]) -> AnomalyReport {
        let t0 = parse_timestamp("2020-05-15T00:00:00Z").unwrap();
        AnomalyReport {
            metric: "visits".into(),
            threshold: 3.0,
            baseline_period: "before".into(),
            test_period: "during".into(),
            scored: flags
                .iter()
                .enumerate()
                .map(|(h, f)| ScoredBucket {
                    start: t0 + chrono::Duration::hours(h as i64),
                    value: 1.0,
                    z: Some(if *f { 4.0 } else { 0.0 }),
                    flagged: *f,
                })
                .collect(),
        }
    }

    fn stats(kind: ChangeKind, frac: f64) -> ChangeStats {
        ChangeStats {
            kind,
            threshold: kind.default_threshold(),
            mean_abs_delta: frac,
            mean_delta: -frac,
            pixel_count: 100,
            changed_count: (frac * 100.0).round() as usize,
            changed_fraction: frac,
            changed_area_m2: frac * 100.0 * 9.0,
        }
    }

    #[test]
    fn rule_table() {
        let two = report(&[false, true, false, true]);
        let inf = infer_event(Some(&two), &[stats(ChangeKind::Greyscale, 0.15)], 0.05);
        assert_eq!(inf.verdict, Verdict::CorroboratedEvent);
        let quiet = report(&[false; 4]);
        let inf = infer_event(Some(&quiet), &[stats(ChangeKind::Greyscale, 0.0)], 0.05);
        assert_eq!(inf.verdict, Verdict::NoEvidence);
        let one = report(&[true]);
        let inf = infer_event(Some(&one), &[stats(ChangeKind::Ndvi, 0.0)], 0.05);
        assert_eq!(inf.verdict, Verdict::MobilityOnly);
        let inf = infer_event(None, &[stats(ChangeKind::Ndvi, 0.2)], 0.05);
        assert_eq!(inf.verdict, Verdict::ImageryOnly);
        let inf = infer_event(None, &[], 0.05);
        assert_eq!(inf.verdict, Verdict::NoEvidence);
        assert!(inf.rule_trace.iter().any(|r| r.condition == "no anomaly report"));
        assert!(inf.rule_trace.iter().any(|r| r.condition == "no change statistics"));
    }

    #[test]
    fn replay_detects_tampering() {
        let inf = infer_event(Some(&report(&[true])), &[stats(ChangeKind::Ndvi, 0.2)], 0.05);
        let mut trace = inf.rule_trace.clone();
        assert_eq!(replay_trace(&trace), Some(inf.verdict));
        trace.last_mut().unwrap().holds = false;
        assert_eq!(replay_trace(&trace), None);
        assert_eq!(replay_trace(&trace[..1]), None);
    }

    fn event() -> EventSpec {
        EventSpec {
            name: "unit".into(),
            event_time: parse_timestamp("2020-05-15T18:00:00Z").unwrap(),
            roi: BoundingBox::new(0.0, 0.0, 1000.0, 1000.0, 15).unwrap(),
        }
    }

    fn baseline() -> HourBaseline {
        let mut hours = [HourStat::default(); 24];
        hours[14] = HourStat {
            mean: 10.0,
            std: 2.0,
            sample_count: 14,
        };
        HourBaseline {
            mode: BaselineMode::HourOfDay,
            hours,
        }
    }

    #[test]
    fn no_evidence_report_has_sections_and_empty_flag_table() {
        let ev = event();
        let inf = infer_event(Some(&report(&[false, false])), &[], 0.05);
        let b = baseline();
        let notes = vec!["imagery skipped: no mobility anomaly".to_string()];
        let inputs = ReportInputs {
            event: &ev,
            inference: &inf,
            series: &[],
            baseline: &b,
            band_level: DEFAULT_BAND_LEVEL,
            selection: None,
            change_maps: &[],
            notes: &notes,
        };
        let files = build_report_files(&inputs).unwrap();
        let text = String::from_utf8(files["summary.txt"].clone()).unwrap();
        for header in ["VERDICT", "MOBILITY EVIDENCE", "IMAGERY EVIDENCE", "RULE TRACE"] {
            assert!(text.lines().any(|l| l == header), "{header}");
        }
        assert!(text.contains("verdict: NoEvidence"));
        assert!(text.contains("flagged_buckets: 0\nbucket_start value z\n\nIMAGERY"));
        let band = String::from_utf8(files["confidence_band.csv"].clone()).unwrap();
        assert!(band.contains("14,10,6.08007,13.9199,0.95"));
        assert!(band.contains("\n0,na,na,na,0.95\n"));
    }

    #[test]
    fn render_writes_manifest_and_is_repeatable() {
        let ev = event();
        let inf = infer_event(Some(&report(&[true])), &[], 0.05);
        let b = baseline();
        let inputs = ReportInputs {
            event: &ev,
            inference: &inf,
            series: &[],
            baseline: &b,
            band_level: DEFAULT_BAND_LEVEL,
            selection: None,
            change_maps: &[],
            notes: &[],
        };
        let dir = tempfile::tempdir().unwrap();
        let report_dir = render_report(&inputs, dir.path()).unwrap();
        assert_eq!(verify_manifest(&report_dir).unwrap(), 4);
        let first = std::fs::read(report_dir.join(MANIFEST_NAME)).unwrap();
        render_report(&inputs, dir.path()).unwrap();
        assert_eq!(std::fs::read(report_dir.join(MANIFEST_NAME)).unwrap(), first);
        std::fs::write(report_dir.join("summary.txt"), "tampered").unwrap();
        assert!(verify_manifest(&report_dir).is_err());
    }

    #[test]
    fn unwritable_target_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("out");
        std::fs::write(&blocker, b"a file, not a directory").unwrap();
        let ev = event();
        let inf = infer_event(None, &[], 0.05);
        let b = baseline();
        let inputs = ReportInputs {
            event: &ev,
            inference: &inf,
            series: &[],
            baseline: &b,
            band_level: DEFAULT_BAND_LEVEL,
            selection: None,
            change_maps: &[],
            notes: &[],
        };
        let err = render_report(&inputs, &blocker).unwrap_err();
        assert!(matches!(err, ReportError::Unwritable { .. }));
        assert_eq!(std::fs::read(&blocker).unwrap(), b"a file, not a directory");
    }

    proptest! {
        #[test]
        fn verdict_monotone(
            flags in proptest::collection::vec(any::<bool>(), 0..30),
            extra in 0usize..30,
            f1 in 0.0f64..0.3, f2 in 0.0f64..0.3, min in 0.01f64..0.2,
        ) {
            let base = report(&flags);
            let mut more = base.clone();
            if !more.scored.is_empty() {
                let k = extra % more.scored.len();
                more.scored[k].flagged = true;
            }
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = infer_event(Some(&base), &[stats(ChangeKind::Ndvi, lo)], min);
            let b = infer_event(Some(&more), &[stats(ChangeKind::Ndvi, hi)], min);
            prop_assert!(b.verdict.rank() >= a.verdict.rank());
            if a.verdict == Verdict::CorroboratedEvent {
                prop_assert_eq!(b.verdict, Verdict::CorroboratedEvent);
            }
            prop_assert_eq!(replay_trace(&a.rule_trace), Some(a.verdict));
            prop_assert_eq!(replay_trace(&b.rule_trace), Some(b.verdict));
        }
    }
}

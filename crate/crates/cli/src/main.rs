use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mobsat_core::config::{load_config_with, RunConfig};
use mobsat_core::fixture::{write_fixture, FixtureError, FixtureParams};
use mobsat_core::format::sig6;
use mobsat_core::pipeline::{
    cmd_detect, cmd_diff, cmd_metrics, cmd_run, cmd_select, DiffOutcome, DiffOverrides,
    PipelineError, SelectOutcome,
};

#[derive(Parser)]
#[command(name = "mobsat", version, about = "Detect events from GPS traces and before/after satellite imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set anomaly.z_threshold=2.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage: metrics, detect, select, diff.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Ingest and clean traces, write per-period metric series.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_speed_mps: Option<f64>,
        #[arg(long)]
        max_precision_m: Option<f64>,
    },
    /// Build the baseline and flag anomalous hours of the during period.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        z_threshold: Option<f64>,
        /// Comma-separated periods, e.g. `before,after`.
        #[arg(long)]
        baseline_periods: Option<String>,
    },
    /// Choose the before/after image pair.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cloud_max: Option<f64>,
        #[arg(long)]
        phi: Option<f64>,
        /// `calibrated` or `printed`.
        #[arg(long)]
        utility_form: Option<String>,
        /// `on-anomaly` or `always`.
        #[arg(long)]
        trigger: Option<String>,
    },
    /// Difference the selected rasters, fuse the evidence and write the report.
    Diff {
        #[command(flatten)]
        common: Common,
        /// Image id replacing the selected before image.
        #[arg(long)]
        before_image: Option<String>,
        /// Image id replacing the selected after image.
        #[arg(long)]
        after_image: Option<String>,
        #[arg(long)]
        min_changed_fraction: Option<f64>,
    },
    /// Write a synthetic tornado scenario with a matching config.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Visit multiplier at the spike hours of the event day.
        #[arg(long, default_value_t = 5.0)]
        spike: f64,
        #[arg(long, value_delimiter = ',', default_value = "14,18")]
        spike_hours: Vec<u32>,
        /// Share of the ROI damaged in the after images.
        #[arg(long, default_value_t = 0.16)]
        changed_fraction: f64,
        #[arg(long, default_value_t = 3)]
        residents: usize,
        /// No spike and no damage.
        #[arg(long)]
        no_event: bool,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn pipeline_fail(e: PipelineError) -> ExitCode {
    fail(e.exit_code() as u8, e)
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn load(common: &Common, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig, PipelineError> {
    let mut overrides = Vec::new();
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            PipelineError::new(
                mobsat_core::pipeline::Stage::Config,
                mobsat_core::pipeline::FailureKind::Validation,
                format!("--set expects KEY=VALUE, got `{s}`"),
            )
        })?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    if let Some(out) = &common.out {
        overrides.push(("output.dir".into(), absolute(out).to_string_lossy().into_owned()));
    }
    Ok(load_config_with(&common.config, &overrides)?)
}

fn num(x: Option<f64>) -> Option<String> {
    x.map(|v| v.to_string())
}

fn print_diff(d: &DiffOutcome) {
    for s in &d.stats {
        println!(
            "{}: changed_fraction {} over {} pixels",
            s.kind,
            sig6(s.changed_fraction),
            s.pixel_count
        );
    }
    println!("verdict: {}", d.verdict);
    println!("report: {}", d.report_dir.display());
}

fn print_select(s: &SelectOutcome) {
    match s {
        SelectOutcome::Selected(sel) => println!(
            "selected before {} (u {}) and after {} (u {}) from {} candidates",
            sel.before.image_id,
            sig6(sel.u_before),
            sel.after.image_id,
            sig6(sel.u_after),
            sel.candidates_considered
        ),
        SelectOutcome::Skipped(reason) => println!("imagery skipped: {reason}"),
    }
}

fn run(cli: Cli) -> Result<(), ExitCode> {
    match cli.command {
        Command::Run { common } => {
            let cfg = load(&common, vec![]).map_err(pipeline_fail)?;
            let r = cmd_run(&cfg).map_err(pipeline_fail)?;
            println!(
                "kept {} points from {} devices ({} rows, {} rejected)",
                r.metrics.stats.points_kept,
                r.metrics.stats.devices,
                r.metrics.stats.rows_read,
                r.metrics.stats.rejected
            );
            println!("flagged {} {} buckets", r.detect.report.flag_count(), r.detect.report.test_period);
            print_select(&r.select);
            print_diff(&r.diff);
        }
        Command::Metrics {
            common,
            max_speed_mps,
            max_precision_m,
        } => {
            let cfg = load(
                &common,
                vec![
                    ("filter.max_speed_mps", num(max_speed_mps)),
                    ("filter.max_precision_m", num(max_precision_m)),
                ],
            )
            .map_err(pipeline_fail)?;
            let m = cmd_metrics(&cfg).map_err(pipeline_fail)?;
            print!("{}", m.stats.to_text());
            for f in &m.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Detect {
            common,
            z_threshold,
            baseline_periods,
        } => {
            let cfg = load(
                &common,
                vec![
                    ("anomaly.z_threshold", num(z_threshold)),
                    ("anomaly.baseline_periods", baseline_periods),
                ],
            )
            .map_err(pipeline_fail)?;
            let d = cmd_detect(&cfg).map_err(pipeline_fail)?;
            println!("flagged {} {} buckets", d.report.flag_count(), d.report.test_period);
            for b in d.report.flagged() {
                println!(
                    "{} value {} z {}",
                    mobsat_core::format::format_timestamp(&b.start),
                    sig6(b.value),
                    b.z.map(sig6).unwrap_or_else(|| "na".into())
                );
            }
        }
        Command::Select {
            common,
            cloud_max,
            phi,
            utility_form,
            trigger,
        } => {
            let cfg = load(
                &common,
                vec![
                    ("imagery.cloud_max", num(cloud_max)),
                    ("imagery.phi", num(phi)),
                    ("imagery.utility_form", utility_form),
                    ("imagery.trigger", trigger),
                ],
            )
            .map_err(pipeline_fail)?;
            print_select(&cmd_select(&cfg).map_err(pipeline_fail)?);
        }
        Command::Diff {
            common,
            before_image,
            after_image,
            min_changed_fraction,
        } => {
            let cfg = load(
                &common,
                vec![("fusion.min_changed_fraction", num(min_changed_fraction))],
            )
            .map_err(pipeline_fail)?;
            let overrides = DiffOverrides {
                before: before_image,
                after: after_image,
            };
            print_diff(&cmd_diff(&cfg, &overrides).map_err(pipeline_fail)?);
        }
        Command::GenFixture {
            out,
            seed,
            spike,
            spike_hours,
            changed_fraction,
            residents,
            no_event,
        } => {
            let params = if no_event {
                FixtureParams {
                    residents,
                    ..FixtureParams::no_event(seed)
                }
            } else {
                FixtureParams {
                    seed,
                    spike_multiplier: spike,
                    spike_hours,
                    residents,
                    changed_fraction,
                    ..FixtureParams::default()
                }
            };
            let config = write_fixture(&params, &out).map_err(|e| match e {
                FixtureError::Invalid(_) => fail(2, e),
                _ => fail(1, e),
            })?;
            println!("wrote {}", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}

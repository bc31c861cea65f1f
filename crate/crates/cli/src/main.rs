//! `neurotrend` command-line driver.
//!
//! Exit codes: 0 success, 1 some patient produced no trend, 2 invalid input.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::warn;

use neurotrend::pipeline::{run_cohort, write_phantom, Manifest, PhantomJob, PipelineConfig};
use neurotrend::trend::{cohort_trends, trend_csv, TrendOptions, DEFAULT_DEADBAND_ML};
use neurotrend::volumetry::read_volumes_csv;

#[derive(Parser, Debug)]
#[command(name = "neurotrend", version, about = "Longitudinal brain tissue volumetry and trend analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Process a cohort manifest end to end.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        beta_mrf: f64,
        #[arg(long, default_value_t = 0.4)]
        pve_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_DEADBAND_ML)]
        deadband_ml: f64,
        #[arg(long, default_value_t = 20)]
        em_iters: usize,
        /// Patients processed in parallel (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write each visit's aligned brain and pve maps.
        #[arg(long)]
        keep_intermediates: bool,
    },
    /// Generate a phantom, or a longitudinal phantom cohort with a manifest.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run only the trend test on a volumes CSV; writes the trend CSV to stdout.
    Trend {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DEADBAND_ML)]
        deadband_ml: f64,
    },
}

const EXIT_PARTIAL: u8 = 1;
const EXIT_INVALID: u8 = 2;

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run {
            manifest,
            out,
            beta_mrf,
            pve_threshold,
            deadband_ml,
            em_iters,
            workers,
            seed,
            keep_intermediates,
        } => {
            let manifest = Manifest::load(&manifest)?;
            let mut config = PipelineConfig {
                beta_mrf,
                pve_threshold,
                deadband_ml,
                out_dir: out,
                workers: workers.unwrap_or(0),
                seed,
                keep_intermediates,
                ..PipelineConfig::default()
            };
            config.segmentation.iterations = em_iters;
            let report = run_cohort(&manifest, &config)?;
            let failed: Vec<&str> = report
                .patients
                .iter()
                .filter(|p| p.trend_failure.is_some())
                .map(|p| p.patient_id.as_str())
                .collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                warn!("no trend for: {}", failed.join(", "));
                Ok(EXIT_PARTIAL)
            }
        }
        Command::Phantom { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            match PhantomJob::from_json(&text)? {
                PhantomJob::Single(s) => {
                    write_phantom(&s, &out)?;
                }
                PhantomJob::Cohort(c) => {
                    c.write(&out)?;
                }
            }
            Ok(0)
        }
        Command::Trend { csv, deadband_ml } => {
            let file = fs::File::open(&csv).with_context(|| format!("opening {}", csv.display()))?;
            let records = read_volumes_csv(file)?;
            let opts = TrendOptions {
                deadband_ml,
                ..TrendOptions::default()
            };
            let (rows, skipped) = cohort_trends(&records, &opts)?;
            for id in &skipped {
                warn!("{id}: fewer than three visits, skipped");
            }
            std::io::stdout().write_all(trend_csv(&rows)?.as_bytes())?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

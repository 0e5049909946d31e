//! `latentphase` command line: synthetic data generation, training,
//! polarity calibration, phase detection and evaluation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, Preset, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "latentphase", version, about = "Cardiac phase detection from latent motion trajectories")]
struct Cli {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for generation, model initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded execution with a fixed reduction order.
    #[arg(long, global = true)]
    strict_deterministic: bool,

    /// Model size preset.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with ground-truth annotations.
    Generate {
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of videos.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Best-checkpoint path; sidecars are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the last saved state of `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Decide which trajectory extremum marks end-diastole.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Videos with ground-truth ED/ES annotations.
        #[arg(long)]
        calibration_set: Option<PathBuf>,
    },
    /// Predict ED/ES frames and export trajectories.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        videos: Option<PathBuf>,
        /// Calibration file; defaults to the checkpoint's sidecar.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Predictions JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth and write reports.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut base = base;
    if let Command::Generate { count: Some(n), .. } = &cli.command {
        base.generate.count = *n;
    }
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        strict_deterministic: cli.strict_deterministic,
        preset: cli.preset,
    };
    let cfg = base.resolve(&overrides)?;
    let threads = if cfg.train.strict_deterministic { 1 } else { cfg.train.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::Generate { out, .. } => commands::generate(&cfg, out),
        Command::Train { dataset, out, resume } => commands::run_train(&cfg, dataset, out, resume),
        Command::Calibrate {
            checkpoint,
            calibration_set,
        } => commands::run_calibrate(&cfg, checkpoint, calibration_set),
        Command::Detect {
            checkpoint,
            videos,
            calibration,
            out,
        } => commands::run_detect(&cfg, checkpoint, videos, calibration, out),
        Command::Eval {
            predictions,
            dataset,
            out_dir,
        } => commands::run_eval(&cfg, predictions, dataset, out_dir).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

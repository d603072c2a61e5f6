//! Command-line experiment runner: generate, train, evaluate, sweep and the
//! feature-collapse demo.

mod commands;
mod config;
mod demo;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, evaluate_nodes, loss_csv, run_seed, run_setting, table_csv,
    SeedRun, TrainOutcome,
};
pub use config::ExperimentConfig;
pub use demo::{
    cmd_demo_collapse, collapse_toy, latent_csv, train_variant, CollapseToy, DemoReport, DemoVariant, VariantSummary,
    AUDIT_PAIRS, HELD_OUT_CLASS,
};

use crate::error::{Error, Result};

/// Caps the number of worker threads.
pub const THREADS_ENV: &str = "GRAPHDKL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "graphdkl",
    version,
    about = "Uncertainty-aware ITE estimation on networked data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply to missing keys or a missing file argument.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trains without spectral normalization.
    #[arg(long)]
    pub no_spectral_norm: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic networked causal dataset.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a trained model with uncertainty-ordered and random rejection.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory of `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory the model was trained on.
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate, train and evaluate every imbalance setting over several seeds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the two-dimensional feature-collapse demo with and without spectral normalization.
    DemoCollapse {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl CommonArgs {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.no_spectral_norm {
            cfg.spectral_norm = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric, 1
/// anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn worker_threads() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}: expected a positive integer");
            None
        }
    }
}

/// Runs `f` inside a worker pool capped by `GRAPHDKL_THREADS`.
pub fn in_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = worker_threads() {
        match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => return pool.install(f),
            Err(e) => log::warn!("cannot build a {n}-thread pool: {e}"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    if worker_threads().is_some() {
        log::info!("built without the `parallel` feature; {THREADS_ENV} has no effect");
    }
    f()
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    in_worker_pool(|| match &cli.command {
        Command::Generate { common } => cmd_generate(&common.experiment_config()?, &common.out).map(drop),
        Command::Train { common, data, resume } => {
            cmd_train(&common.experiment_config()?, data, &common.out, *resume).map(drop)
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
        } => cmd_evaluate(&common.experiment_config()?, checkpoint, data, &common.out).map(drop),
        Command::Sweep { common } => cmd_sweep(&common.experiment_config()?, &common.out).map(drop),
        Command::DemoCollapse { common } => {
            let cfg = common.experiment_config()?;
            cmd_demo_collapse(cfg.seed, &common.out).map(drop)
        }
    })
}

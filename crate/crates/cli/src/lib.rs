//! Command-line driver for csmil: data synthesis, clustering, training,
//! evaluation protocols and the sparse-recovery experiments.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod gradcheck;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "csmil", version, about = "Cluster-level sparse multi-instance learning")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "csmil-out")]
    pub out: PathBuf,
    /// Dotted-path config override, e.g. `train.gamma=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a planted-cluster dataset.
    Synth,
    /// Fit global k-means and assign every instance.
    Cluster,
    /// Train a model on the whole dataset.
    Train,
    /// Cross-validate, or score a saved checkpoint.
    Eval,
    /// Leave-one-cluster-out ablation.
    Ablate,
    /// Cross-validate across a grid of l1 weights.
    SweepGamma,
    /// Cross-validate across a grid of cluster counts.
    SweepK,
    /// Lasso support-recovery phase transition and design diagnostics.
    Recover,
    /// Finite-difference gradient check on random small models.
    Gradcheck,
}

/// Failure with its process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Bad configuration, arguments or inputs (exit 2).
    Config(String),
    /// Numerical or runtime failure (exit 3).
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<csmil::Error> for Failure {
    fn from(e: csmil::Error) -> Self {
        use csmil::Error as E;
        match e {
            E::InvalidConfig(_) | E::TooFewBags { .. } | E::EmptyDataset | E::Degenerate(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

/// Sets up logging from `CSMIL_LOG` (`error`, `info` or `debug`; default `error`).
pub fn init_logging() -> Result<(), Failure> {
    let level = match std::env::var("CSMIL_LOG") {
        Ok(v) => match v.as_str() {
            "error" | "info" | "debug" => v,
            other => {
                return Err(Failure::Config(format!(
                    "CSMIL_LOG must be error, info or debug, got {other:?}"
                )))
            }
        },
        Err(_) => "error".to_string(),
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .try_init();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Failure::Runtime(format!("cannot start worker pool: {e}")))?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    pool.install(|| commands::dispatch(cli.command, &cfg, &cli.out))
}

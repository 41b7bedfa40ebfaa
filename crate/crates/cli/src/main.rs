//! `soda`: batch RL pipeline driver.
//!
//! simulate -> fit-behavior -> train -> evaluate -> report, each writing
//! into a run directory with a manifest. Exit code 2 flags config or input
//! errors; 1 is everything else.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, missing input, invalid flag value.
    Config(String),
    Other(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "soda", version, about = "Learn and evaluate diverse safe policies from logged trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Output run directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for internal parallelism. 1 keeps runs bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw trajectories from the synthetic ground-truth environment.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Simulator config file (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of trajectories.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the kNN behavior model and precompute per-state annotations.
    FitBehavior {
        #[command(flatten)]
        common: CommonArgs,
        /// Behavior config file (k, epsilon, weights_file).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset (JSON Lines).
        #[arg(long)]
        data: PathBuf,
        /// Drop each transition from its own neighbor list when computing
        /// its behavior distribution.
        #[arg(long)]
        exclude_self: bool,
    },
    /// Train the policy collection.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Train config file (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Behavior model JSON from fit-behavior.
        #[arg(long)]
        behavior: PathBuf,
        /// Precomputed annotations from fit-behavior (recomputed if omitted).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Held-out dataset for per-epoch validation columns.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Resume from a previous run directory's checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Sweep the lambda x epsilon grid instead of a single run.
        #[arg(long)]
        sweep: bool,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Quality loss: ce, symkl or none.
        #[arg(long)]
        quality: Option<String>,
        /// Train without the safety mask (ablation).
        #[arg(long)]
        no_safety: bool,
        /// Train without the diversity term (ablation).
        #[arg(long)]
        no_diversity: bool,
    },
    /// Off-policy evaluation of a trained collection.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Eval config file (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        behavior: PathBuf,
        /// Checkpoint JSON from train.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Average action-probability tables per state filter, plus the states
    /// where the agents disagree most.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        behavior: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Filters: all, fluid-taken, vaso-taken, lactate>2, MAP<55.
        /// Repeat the flag; defaults to all five.
        #[arg(long = "filter")]
        filters: Vec<String>,
        /// How many top-diversity states to dump.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

/// Relative paths that do not exist as given fall back to `$SODA_DATA_DIR`.
pub fn resolve_path(path: &std::path::Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("SODA_DATA_DIR") {
        Some(prefix) => PathBuf::from(prefix).join(path),
        None => path.to_path_buf(),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = match &cli.command {
        Command::Simulate { common, .. }
        | Command::FitBehavior { common, .. }
        | Command::Train { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Report { common, .. } => common.threads,
    };
    if threads == 0 {
        return Err(config_err("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Other(e.into()))?;

    match cli.command {
        Command::Simulate {
            common,
            config,
            n,
            seed,
        } => commands::cmd_simulate(&common.out, config.as_deref(), n, seed),
        Command::FitBehavior {
            common,
            config,
            data,
            exclude_self,
        } => commands::cmd_fit_behavior(&common.out, config.as_deref(), &data, exclude_self),
        Command::Train {
            common,
            config,
            data,
            behavior,
            annotations,
            val_data,
            resume,
            sweep,
            seed,
            lambda,
            epsilon,
            epochs,
            quality,
            no_safety,
            no_diversity,
        } => commands::cmd_train(commands::TrainArgs {
            out: common.out,
            config,
            data,
            behavior,
            annotations,
            val_data,
            resume,
            sweep,
            seed,
            lambda,
            epsilon,
            epochs,
            quality,
            no_safety,
            no_diversity,
        }),
        Command::Evaluate {
            common,
            config,
            data,
            behavior,
            checkpoint,
            annotations,
        } => commands::cmd_evaluate(
            &common.out,
            config.as_deref(),
            &data,
            &behavior,
            &checkpoint,
            annotations.as_deref(),
        ),
        Command::Report {
            common,
            data,
            behavior,
            checkpoint,
            annotations,
            filters,
            top,
        } => commands::cmd_report(
            &common.out,
            &data,
            &behavior,
            &checkpoint,
            annotations.as_deref(),
            &filters,
            top,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

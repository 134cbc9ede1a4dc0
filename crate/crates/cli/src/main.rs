//! `canonport` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    ConfigInvalid(String),
    /// Failure inside the pipeline; exit code 1.
    Failed(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::ConfigInvalid(m) => write!(f, "invalid configuration: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<canonport::Error> for CliError {
    fn from(e: canonport::Error) -> Self {
        match e {
            canonport::Error::Config(c) => CliError::ConfigInvalid(c.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

/// Converts any library error into a [`CliError`].
pub trait Ctx<T> {
    fn ctx(self) -> Result<T, CliError>;
}

impl<T, E: Into<canonport::Error>> Ctx<T> for Result<T, E> {
    fn ctx(self) -> Result<T, CliError> {
        self.map_err(|e| e.into().into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "canonport",
    version,
    about = "Canonical portfolios: backtests, diagnostics and simulations"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Download cache directory.
    #[arg(long, global = true, env = "CANONPORT_CACHE")]
    pub cache_dir: Option<PathBuf>,
    /// Random seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Never touch the network; use cached data only.
    #[arg(long, global = true)]
    pub offline: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dataset name, URL or local file, overriding the config.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Policy, e.g. cp2, pp2, mvo, uni, reg, fi.
    #[arg(long)]
    pub policy: Option<String>,
    /// approx or full.
    #[arg(long)]
    pub policy_mode: Option<String>,
    /// Canonical or principal pairs kept.
    #[arg(long)]
    pub k: Option<usize>,
    /// Risk aversion.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Skip the factor regression.
    #[arg(long)]
    pub no_factors: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one walk-forward backtest.
    Backtest {
        #[command(flatten)]
        run: RunArgs,
        /// Re-run the configuration recorded in a manifest.json.
        #[arg(long, conflicts_with = "config")]
        from_manifest: Option<PathBuf>,
    },
    /// Run every cell of the `sweep.*` axes in a config file.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-date squared canonical correlations, optionally with a permutation null.
    CcaAnalyze {
        #[command(flatten)]
        run: RunArgs,
        /// Permutations for the null distribution at the last rebalance.
        #[arg(long, default_value_t = 0)]
        perms: usize,
    },
    /// Monte Carlo experiments: prop4, isserlis, wachter, bias.
    Simulate(commands::SimulateArgs),
    /// Write the estimated moments at one rebalance date.
    DumpMoments {
        #[command(flatten)]
        run: RunArgs,
        /// Last rebalance on or before this date (default: the final one).
        #[arg(long)]
        date: Option<String>,
    },
    /// Download datasets into the cache, or seed it from a local file.
    Fetch {
        /// Dataset names (default: all built-in datasets and the factor file).
        datasets: Vec<String>,
        /// Store this file as the cached copy of the single named dataset.
        #[arg(long)]
        from_file: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
        {
            eprintln!("warning: {e}");
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

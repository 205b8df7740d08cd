//! `spsc`: command-line front end for the single proxy synthetic control
//! estimator.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags, bad config), 1 on
//! I/O or computation errors. `SPSC_THREADS` caps the worker pool; output
//! does not depend on it.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{context}: {source}")]
    Compute {
        context: &'static str,
        #[source]
        source: spsc_core::SpscError,
    },
}

impl CliError {
    pub fn compute(context: &'static str) -> impl FnOnce(spsc_core::SpscError) -> CliError {
        move |source| CliError::Compute { context, source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spsc", version, about = "Single proxy synthetic control estimation and inference")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the estimator and report weights, effects and their variance as JSON.
    Estimate(EstimateArgs),
    /// Tabulate the leave-one-out MSE over the ridge grid as CSV.
    Loocv(PanelArgs),
    /// Conformal prediction intervals for every post-period time as CSV.
    Conformal(PanelArgs),
    /// Monte Carlo study on the interactive fixed effects design as CSV.
    Simulate(SimulateArgs),
    /// Move the treatment time back to `--new-t0` on pre-period data and estimate.
    Placebo(PlaceboArgs),
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    /// Panel CSV with columns t, y, w1..wN and optionally a (0/1 treatment).
    #[arg(long)]
    pub input: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of pre-treatment periods when the CSV has no treatment column.
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Ridge parameter: a number or `loocv`.
    #[arg(long)]
    pub rho: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    /// HAC kernel: `bartlett` or `qs`.
    #[arg(long)]
    pub kernel: Option<String>,
    /// HAC bandwidth: a number or `auto`.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Use the moving block bootstrap with this many replicates.
    #[arg(long)]
    pub boot_reps: Option<usize>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct PlaceboArgs {
    #[command(flatten)]
    pub estimate: EstimateArgs,
    /// Placebo treatment time; must be below the real T0.
    #[arg(long)]
    pub new_t0: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation spec: {"t0", "t1", "trend", "mu0", "errors", "seed"}.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated list of spsc-dt, spsc-nodt, ols-noreg.
    #[arg(long, default_value = "spsc-dt,spsc-nodt,ols-noreg")]
    pub estimators: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub bandwidth: Option<String>,
    #[arg(long)]
    pub boot_reps: Option<usize>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SPSC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("SPSC_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Estimate(a) => commands::estimate(&a, None),
        Command::Placebo(a) => commands::estimate(&a.estimate, Some(a.new_t0)),
        Command::Loocv(a) => commands::loocv(&a),
        Command::Conformal(a) => commands::conformal(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

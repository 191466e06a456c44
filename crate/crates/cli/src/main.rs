mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Error carrying the process exit code: 1 for bad input, 2 for a numerical
/// failure during fitting or staging.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<gpprog::Error> for Failure {
    fn from(e: gpprog::Error) -> Self {
        let code = match e {
            gpprog::Error::Numerical(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gpprog", version, about = "Monotone GP disease progression models")]
struct Cli {
    /// Flat key=value settings file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any setting, e.g. `--set lambda=1e-3` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// More logging (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a long-format cohort CSV
    Fit(FitArgs),
    /// Write fitted trajectories and slopes on a time grid
    Predict(PredictArgs),
    /// Stage new subjects against a fitted model
    Stage(StageArgs),
    /// Generate a synthetic sigmoid cohort
    Simulate(SimulateArgs),
    /// Time-shift recovery benchmark over (N, Nb, sigma) cells
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Quantile-score every biomarker before fitting
    #[arg(long)]
    pub score: bool,
    /// Comma-separated biomarkers where lower values are abnormal (with --score)
    #[arg(long)]
    pub decreasing: Option<String>,
    #[arg(long)]
    pub max_outer_iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    /// Grid span as lo,hi
    #[arg(long, allow_hyphen_values = true)]
    pub grid_span: Option<String>,
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct StageArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "Nb")]
    pub nb: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// One cell as N=..,Nb=..,sigma=.. (repeatable)
    #[arg(long)]
    pub cell: Vec<String>,
    /// Run the full 16-cell grid
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Zero the seconds column so output is reproducible
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub max_outer_iters: Option<usize>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut settings = config::Settings::load(cli.config.as_deref())?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::input(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        settings.set(k.trim(), v.trim())?;
    }
    settings.flag("seed", cli.seed)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", cli.out.display())))?;
    match cli.command {
        Command::Fit(a) => commands::fit(a, settings, &cli.out),
        Command::Predict(a) => commands::predict(a, settings, &cli.out),
        Command::Stage(a) => commands::stage(a, settings, &cli.out),
        Command::Simulate(a) => commands::simulate(a, settings, &cli.out),
        Command::Benchmark(a) => commands::benchmark(a, settings, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

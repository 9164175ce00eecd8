use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use pasg::config::{parse_config, Mode, Overrides};
use pasg::runner::{run_mode, RunOptions};

/// Parallelized averaged SGD simulator and verification harness.
#[derive(Parser)]
#[command(name = "pasg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicate one configuration and record the errors of both aggregates.
    Run(Flags),
    /// Error curve over an n grid with a log-log rate fit.
    Sweep(Flags),
    /// Empirical covariance of sqrt(n)(m_hat - m) against the sandwich oracle.
    Clt(Flags),
    /// Paired weighted-versus-unweighted aggregate comparison.
    Compare(Flags),
    /// Evaluate the quadratic-mean bound terms for given constants.
    Bound(Flags),
}

#[derive(Args)]
struct Flags {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// median | least_squares | logistic
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    machines: Option<String>,
    #[arg(long)]
    n: Option<String>,
    /// Comma-separated sample sizes (sweep mode).
    #[arg(long = "n-grid")]
    n_grid: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long = "c-gamma")]
    c_gamma: Option<String>,
    /// uniform | pct:v1,...,vp
    #[arg(long)]
    alloc: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Record per-replication wall time in the CSV.
    #[arg(long)]
    timing: bool,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (mode, flags) = match cli.command {
        Command::Run(f) => (Mode::Run, f),
        Command::Sweep(f) => (Mode::Sweep, f),
        Command::Clt(f) => (Mode::Clt, f),
        Command::Compare(f) => (Mode::Compare, f),
        Command::Bound(f) => (Mode::Bound, f),
    };
    let text = match &flags.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let overrides = Overrides {
        mode: Some(mode),
        objective: flags.objective,
        dim: flags.dim,
        machines: flags.machines,
        n: flags.n,
        n_grid: flags.n_grid,
        alpha: flags.alpha,
        c_gamma: flags.c_gamma,
        alloc: flags.alloc,
        reps: flags.reps,
        seed: flags.seed,
        out: flags.out,
    };
    let config = parse_config(&text, &overrides)?;
    let mut options = RunOptions::from_env()?;
    options.timing = flags.timing;
    let summary = run_mode(&config, &options)?;
    println!("{}", serde_json::to_string_pretty(&summary.summary)?);
    eprintln!("wrote {} and {}", summary.csv_path.display(), summary.manifest_path.display());
    Ok(())
}

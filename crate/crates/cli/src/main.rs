//! `pooldev`: simulate pooled tests, estimate prevalence, evaluate rate
//! functions and run the verification suites.
//!
//! Exit codes: 0 success, 1 a check failed or the solver did not converge,
//! 2 invalid usage.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pooldev_core::PoolingMode;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pooldev", version, about = "Pooled-testing simulation and large-deviation checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate pooled tests.
    /// CSV columns: trial_index,I,sigma,n_positive,n_positive_pools,t_hat
    Simulate(SimulateArgs),
    /// Estimate prevalence from the fraction of positive pools (JSON).
    Estimate(EstimateArgs),
    /// Evaluate the prevalence rate function at t (JSON).
    Rate(RateArgs),
    /// Solve the contraction problem (JSON), or a profile over --t-grid.
    /// Profile CSV columns: t,sigma,pool_entropy,value,corollary_rate,discrepancy,kkt_residual,status
    Optimize(OptimizeArgs),
    /// Verification suites.
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Debug, Subcommand)]
enum VerifyCommand {
    /// Exact binomial decay rates against the closed form.
    /// CSV columns: n,finite_n_rate,limit_rate,gap,method,ci_low,ci_high,annotation
    BinomialLdp(BinomialArgs),
    /// Monte Carlo law of (I, sigma) against exhaustive enumeration (JSON).
    PoolOracle(PoolOracleArgs),
    /// Exact conditional pool-type probabilities against the entropy bounds,
    /// vanishing corrections dropped.
    /// CSV columns: n,k,positives,pool_types,exact,central,lower,upper,n_eta1,n_eta2,above_lower,below_upper,within_factor
    Sandwich(SandwichArgs),
    /// Monte Carlo decay rates of set events with 95% Wilson bounds.
    /// CSV columns: n,finite_n_rate,limit_rate,gap,method,ci_low,ci_high,annotation
    McDecay(McDecayArgs),
    /// Mean estimated prevalence against mean true prevalence (JSON).
    TypicalPoint(TypicalPointArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Partition,
    Composition,
}

impl From<Mode> for PoolingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Partition => PoolingMode::Partition,
            Mode::Composition => PoolingMode::Composition,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct RunArgs {
    /// Random seed.
    #[arg(long, env = "POOLDEV_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads; does not change results.
    #[arg(long)]
    #[serde(skip)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct OutArgs {
    /// Output file (stdout when absent). CSV outputs get a `.manifest.json` sidecar.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    n: u32,
    #[arg(long)]
    k: u32,
    #[arg(long)]
    q1: f64,
    #[arg(long, value_enum, default_value_t = Mode::Partition)]
    mode: Mode,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct EstimateArgs {
    /// Fraction of positive pools.
    #[arg(long)]
    sigma: f64,
    /// Pools per individual; derived from --n and --k when --k is given.
    #[arg(long, required_unless_present = "k", conflicts_with = "k")]
    beta: Option<f64>,
    /// Number of individuals; adds `count_hat`.
    #[arg(long)]
    n: Option<u32>,
    #[arg(long, requires = "n")]
    k: Option<u32>,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct RateArgs {
    #[arg(long)]
    t: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    q1: f64,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["t", "t_grid"]))]
struct OptimizeArgs {
    #[arg(long)]
    t: Option<f64>,
    /// Comma-separated t values; emits a CSV profile.
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    /// Fraction of positive pools; defaults to the closed-form typical value at t.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    q1: f64,
    #[arg(long, default_value_t = pooldev_core::optimize::DEFAULT_M_MAX)]
    m_max: u32,
    #[arg(long, default_value_t = pooldev_core::optimize::DEFAULT_TOL)]
    tol: f64,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct BinomialArgs {
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<u32>,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    q1: f64,
    /// Largest accepted |gap| at the largest n.
    #[arg(long, default_value_t = 0.002)]
    max_gap: f64,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct PoolOracleArgs {
    #[arg(long)]
    n: u32,
    #[arg(long)]
    k: u32,
    #[arg(long)]
    q1: f64,
    #[arg(long, value_enum, default_value_t = Mode::Partition)]
    mode: Mode,
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 0.01)]
    max_tv: f64,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct SandwichArgs {
    #[arg(long)]
    n: u32,
    #[arg(long)]
    k: u32,
    #[arg(long, value_enum, default_value_t = Mode::Partition)]
    mode: Mode,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EventKind {
    /// I >= threshold
    Prevalence,
    /// sigma >= threshold
    Sigma,
    /// t_lo <= I <= t_hi and s_lo <= sigma <= s_hi
    Box,
}

#[derive(Debug, Args, Serialize)]
struct McDecayArgs {
    #[arg(long, value_enum)]
    event: EventKind,
    #[arg(long, required_if_eq_any = [("event", "prevalence"), ("event", "sigma")])]
    threshold: Option<f64>,
    #[arg(long, required_if_eq("event", "box"))]
    t_lo: Option<f64>,
    #[arg(long, required_if_eq("event", "box"))]
    t_hi: Option<f64>,
    #[arg(long, required_if_eq("event", "box"))]
    s_lo: Option<f64>,
    #[arg(long, required_if_eq("event", "box"))]
    s_hi: Option<f64>,
    /// Comma-separated sample sizes; k = round(beta n).
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<u32>,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    q1: f64,
    #[arg(long, value_enum, default_value_t = Mode::Partition)]
    mode: Mode,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct TypicalPointArgs {
    #[arg(long)]
    n: u32,
    #[arg(long)]
    k: u32,
    #[arg(long)]
    q1: f64,
    #[arg(long, value_enum, default_value_t = Mode::Partition)]
    mode: Mode,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Rate(a) => commands::rate(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Verify(v) => match v {
            VerifyCommand::BinomialLdp(a) => commands::binomial_ldp(&a),
            VerifyCommand::PoolOracle(a) => commands::pool_oracle(&a),
            VerifyCommand::Sandwich(a) => commands::sandwich(&a),
            VerifyCommand::McDecay(a) => commands::mc_decay(&a),
            VerifyCommand::TypicalPoint(a) => commands::typical_point(&a),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

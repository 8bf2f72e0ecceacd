use serde::Serialize;

use pooldev_core::measures::BinaryMeasure;
use pooldev_core::optimize::{phi_sigma_profile, solve_contraction, ContractionSolution};
use pooldev_core::rates::{corollary_rate, legendre, rate_marginal, sigma_of_t, t_of_sigma};
use pooldev_core::simulate::run_batch;
use pooldev_core::verify::{self, DecayConfig, DecayEvent, OracleComparison, TypicalPointReport};
use pooldev_core::{CgfVariant, ContractionProblem, ExtReal, RateParams, SimConfig, SolveStatus};

use crate::error::CliError;
use crate::output::{write_csv, write_json, RunManifest};
use crate::{
    BinomialArgs, EstimateArgs, EventKind, McDecayArgs, OptimizeArgs, PoolOracleArgs, RateArgs, SandwichArgs,
    SimulateArgs, TypicalPointArgs,
};

pub const SIMULATE_HEADER: [&str; 6] = ["trial_index", "I", "sigma", "n_positive", "n_positive_pools", "t_hat"];
pub const CONVERGENCE_HEADER: [&str; 8] = [
    "n",
    "finite_n_rate",
    "limit_rate",
    "gap",
    "method",
    "ci_low",
    "ci_high",
    "annotation",
];
pub const SANDWICH_HEADER: [&str; 13] = [
    "n",
    "k",
    "positives",
    "pool_types",
    "exact",
    "central",
    "lower",
    "upper",
    "n_eta1",
    "n_eta2",
    "above_lower",
    "below_upper",
    "within_factor",
];
pub const PROFILE_HEADER: [&str; 8] = [
    "t",
    "sigma",
    "pool_entropy",
    "value",
    "corollary_rate",
    "discrepancy",
    "kkt_residual",
    "status",
];

#[derive(Serialize)]
struct SimRow {
    trial_index: u64,
    #[serde(rename = "I")]
    i: f64,
    sigma: f64,
    n_positive: u64,
    n_positive_pools: u64,
    t_hat: f64,
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = SimConfig::new(a.n, a.k, a.q1, a.mode.into(), a.run.seed)?;
    let batch = run_batch(&cfg, a.trials, a.run.workers)?;
    let rows: Vec<SimRow> = batch
        .summaries
        .iter()
        .map(|s| SimRow {
            trial_index: s.trial,
            i: s.prevalence,
            sigma: s.sigma,
            n_positive: s.n_positive,
            n_positive_pools: s.n_positive_pools,
            t_hat: s.t_hat,
        })
        .collect();
    let manifest = RunManifest::new("simulate", a, Some(a.run.seed));
    write_csv(&rows, a.out.out.as_deref(), &manifest, &SIMULATE_HEADER)
}

#[derive(Serialize)]
struct Estimate {
    t_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    count_hat: Option<u64>,
    lower_bound: f64,
}

pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let beta = match (a.beta, a.n, a.k) {
        (_, Some(n), Some(k)) => {
            if k == 0 || k > n {
                return Err(CliError::Usage(format!("need 1 <= k <= n, got n = {n}, k = {k}")));
            }
            f64::from(k) / f64::from(n)
        }
        (Some(beta), _, _) => beta,
        _ => return Err(CliError::Usage("give --beta or both --n and --k".into())),
    };
    let t_hat = t_of_sigma(a.sigma, beta)?;
    let payload = Estimate {
        t_hat,
        count_hat: a.n.map(|n| (f64::from(n) * t_hat).round() as u64),
        lower_bound: beta * a.sigma,
    };
    write_json(&payload, a.out.out.as_deref(), &RunManifest::new("estimate", a, None))
}

#[derive(Serialize)]
struct RateReport {
    t: f64,
    beta: f64,
    q1: f64,
    pstar: f64,
    rate: ExtReal,
    rate_marginal: ExtReal,
    legendre_poisson: ExtReal,
    legendre_exact: ExtReal,
}

pub fn rate(a: &RateArgs) -> Result<(), CliError> {
    let p = RateParams::new(a.beta, a.q1)?;
    let omega = BinaryMeasure::bernoulli(a.t).map_err(|_| CliError::Usage(format!("t = {} outside [0, 1]", a.t)))?;
    let payload = RateReport {
        t: a.t,
        beta: a.beta,
        q1: a.q1,
        pstar: p.pstar(),
        rate: corollary_rate(a.t, &p)?,
        rate_marginal: rate_marginal(&omega, &p)?,
        legendre_poisson: legendre(&omega, &p, CgfVariant::Poisson)?.value,
        legendre_exact: legendre(&omega, &p, CgfVariant::Exact)?.value,
    };
    write_json(&payload, a.out.out.as_deref(), &RunManifest::new("rate", a, None))
}

#[derive(Serialize)]
struct OptimizeReport<'a> {
    t: f64,
    sigma: f64,
    beta: f64,
    q1: f64,
    m_max: u32,
    tol: f64,
    #[serde(flatten)]
    solution: &'a ContractionSolution,
    corollary_rate: ExtReal,
    discrepancy: Option<f64>,
}

pub fn optimize(a: &OptimizeArgs) -> Result<(), CliError> {
    let p = RateParams::new(a.beta, a.q1)?;
    let manifest = RunManifest::new("optimize", a, None);
    if let Some(grid) = &a.t_grid {
        let rows = phi_sigma_profile(grid, a.sigma, &p, a.m_max, a.tol)?;
        write_csv(&rows, a.out.out.as_deref(), &manifest, &PROFILE_HEADER)?;
        let failed = rows.iter().filter(|r| r.status == SolveStatus::NotConverged).count();
        if failed > 0 {
            return Err(CliError::Failed(format!("{failed} profile rows did not converge")));
        }
        return Ok(());
    }
    let t = a.t.expect("clap requires --t or --t-grid");
    let sigma = match a.sigma {
        Some(s) => s,
        None => sigma_of_t(t, a.beta)?,
    };
    let prob = ContractionProblem::new(t, sigma, p, a.m_max, a.tol)?;
    let sol = solve_contraction(&prob)?;
    let cor = corollary_rate(t, &p)?;
    let report = OptimizeReport {
        t,
        sigma,
        beta: a.beta,
        q1: a.q1,
        m_max: a.m_max,
        tol: a.tol,
        solution: &sol,
        corollary_rate: cor,
        discrepancy: match (sol.joint_rate, cor) {
            (ExtReal::Finite(x), ExtReal::Finite(y)) => Some(x - y),
            _ => None,
        },
    };
    write_json(&report, a.out.out.as_deref(), &manifest)?;
    if sol.status == SolveStatus::NotConverged {
        return Err(CliError::Failed(format!(
            "solver did not converge, residual {:e}",
            sol.kkt_residual
        )));
    }
    Ok(())
}

pub fn binomial_ldp(a: &BinomialArgs) -> Result<(), CliError> {
    let p = RateParams::new(a.beta, a.q1)?;
    let study = verify::binomial_study(&a.n, a.t, &p)?;
    let manifest = RunManifest::new("verify binomial-ldp", a, None);
    write_csv(&study.rows, a.out.out.as_deref(), &manifest, &CONVERGENCE_HEADER)?;
    let last = study.rows.last().expect("clap requires at least one n");
    let gap = last.gap.unwrap_or(f64::INFINITY);
    eprintln!("fitted C = {:.6}", study.fitted_c);
    if gap.abs() > a.max_gap {
        return Err(CliError::Failed(format!("|gap| = {gap:e} at n = {} exceeds {}", last.n, a.max_gap)));
    }
    if study.rows.len() > 1 && !study.strictly_decreasing {
        return Err(CliError::Failed("gap is not strictly decreasing in n".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct PoolOracleReport {
    #[serde(flatten)]
    comparison: OracleComparison,
    max_tv: f64,
    pass: bool,
}

pub fn pool_oracle(a: &PoolOracleArgs) -> Result<(), CliError> {
    let cfg = SimConfig::new(a.n, a.k, a.q1, a.mode.into(), a.run.seed)?;
    let comparison = verify::mc_vs_enumeration(&cfg, a.trials, a.run.workers)?;
    let pass = comparison.total_variation < a.max_tv;
    let tv = comparison.total_variation;
    let report = PoolOracleReport {
        comparison,
        max_tv: a.max_tv,
        pass,
    };
    let manifest = RunManifest::new("verify pool-oracle", a, Some(a.run.seed));
    write_json(&report, a.out.out.as_deref(), &manifest)?;
    if !pass {
        return Err(CliError::Failed(format!("total variation {tv} >= {}", a.max_tv)));
    }
    Ok(())
}

pub fn sandwich(a: &SandwichArgs) -> Result<(), CliError> {
    let rows = verify::sandwich_sweep(a.n, a.k, a.mode.into())?;
    let manifest = RunManifest::new("verify sandwich", a, None);
    write_csv(&rows, a.out.out.as_deref(), &manifest, &SANDWICH_HEADER)?;
    let outside = rows.iter().filter(|r| !(r.above_lower && r.below_upper)).count();
    let off = rows.iter().filter(|r| !r.within_factor).count();
    eprintln!(
        "{} rows; outside bounds: {outside}; central estimate off by more than the allowed factor: {off} (o(1) terms dropped)",
        rows.len()
    );
    Ok(())
}

pub fn mc_decay(a: &McDecayArgs) -> Result<(), CliError> {
    let event = match a.event {
        EventKind::Prevalence => DecayEvent::PrevalenceAtLeast {
            t: a.threshold.expect("required by clap"),
        },
        EventKind::Sigma => DecayEvent::SigmaAtLeast {
            s: a.threshold.expect("required by clap"),
        },
        EventKind::Box => DecayEvent::Box {
            t_lo: a.t_lo.expect("required by clap"),
            t_hi: a.t_hi.expect("required by clap"),
            s_lo: a.s_lo.expect("required by clap"),
            s_hi: a.s_hi.expect("required by clap"),
        },
    };
    let dc = DecayConfig {
        beta: a.beta,
        q1: a.q1,
        mode: a.mode.into(),
        trials: a.trials,
        seed: a.run.seed,
    };
    let rows = verify::mc_decay_rate(&event, &a.n, &dc, a.run.workers)?;
    let manifest = RunManifest::new("verify mc-decay", a, Some(a.run.seed));
    write_csv(&rows, a.out.out.as_deref(), &manifest, &CONVERGENCE_HEADER)
}

pub fn typical_point(a: &TypicalPointArgs) -> Result<(), CliError> {
    let cfg = SimConfig::new(a.n, a.k, a.q1, a.mode.into(), a.run.seed)?;
    let report: TypicalPointReport = verify::typical_point(&cfg, a.trials, a.run.workers)?;
    let manifest = RunManifest::new("verify typical-point", a, Some(a.run.seed));
    write_json(&report, a.out.out.as_deref(), &manifest)?;
    if !report.pass {
        return Err(CliError::Failed(format!(
            "mean t_hat - mean I = {:e} is {:.1} standard errors from zero",
            report.discrepancy.mean, report.z_score
        )));
    }
    Ok(())
}

//! Exact oracles and convergence studies: binomial rates, exhaustive
//! enumeration of small poolings, the types sandwich and Monte Carlo decay
//! rates.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::{erf_inv, erfc};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::measures::{phi_log_density, rel_entropy_pool_log, BinaryMeasure, PoolHistogram};
use crate::partitions::{enumerate_compositions, enumerate_partitions};
use crate::rates::{corollary_rate, sigma_of_t, t_of_sigma, RateParams};
use crate::simulate::{empirical_measures, run_batch, tally_batch, PoolingMode, SimConfig};

/// Largest `n` accepted by the exhaustive enumerations.
pub const ENUMERATION_MAX_N: u32 = 10;
/// Minimum expected hits for a Monte Carlo event to be resolvable.
pub const MIN_EXPECTED_HITS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Enumeration,
    Mc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::Enumeration => "enumeration",
            Method::Mc => "mc",
        })
    }
}

/// Finite-`n` decay rate `-(1/n) ln P` next to its limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: u32,
    pub finite_n_rate: f64,
    pub limit_rate: Option<f64>,
    pub gap: Option<f64>,
    pub method: Method,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Candidate rate from the closed-form corollary, where no limit is known.
    pub annotation: Option<f64>,
}

fn ln_binomial(n: u64, j: u64) -> f64 {
    ln_factorial(n) - ln_factorial(j) - ln_factorial(n - j)
}

/// `j ln p + (n - j) ln(1 - p)` with `0 ln 0 = 0`.
fn ln_bernoulli_weight(n: u64, j: u64, p: f64) -> f64 {
    let term = |count: u64, prob: f64| if count == 0 { 0.0 } else { count as f64 * prob.ln() };
    term(j, p) + term(n - j, 1.0 - p)
}

/// `ln P(Bin(n, p) = j)`.
pub fn ln_binomial_pmf(n: u64, j: u64, p: f64) -> f64 {
    if j > n {
        return f64::NEG_INFINITY;
    }
    ln_binomial(n, j) + ln_bernoulli_weight(n, j, p)
}

/// Exact `-(1/n) ln P(Bin(n, beta q1) = round(n t))` against the corollary
/// rate at `t`.
pub fn exact_binomial_rate(n: u32, t: f64, p: &RateParams) -> Result<ConvergenceRow> {
    if n == 0 {
        return Err(Error::Domain("n must be positive".into()));
    }
    let limit = corollary_rate(t, p)?;
    let j = (f64::from(n) * t).round() as u64;
    let rate = -ln_binomial_pmf(u64::from(n), j, p.pstar()) / f64::from(n);
    let limit = limit.finite();
    Ok(ConvergenceRow {
        n,
        finite_n_rate: rate,
        limit_rate: limit,
        gap: limit.map(|l| rate - l),
        method: Method::Exact,
        ci_low: None,
        ci_high: None,
        annotation: None,
    })
}

/// Binomial rates over an `n` grid with the fitted `C` in `gap <= C ln n / n`.
#[derive(Debug, Clone, Serialize)]
pub struct BinomialStudy {
    pub rows: Vec<ConvergenceRow>,
    pub fitted_c: f64,
    pub strictly_decreasing: bool,
}

pub fn binomial_study(ns: &[u32], t: f64, p: &RateParams) -> Result<BinomialStudy> {
    let rows = ns
        .iter()
        .map(|&n| exact_binomial_rate(n, t, p))
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap.unwrap_or(f64::INFINITY)).collect();
    let fitted_c = rows
        .iter()
        .zip(&gaps)
        .map(|(r, g)| g.abs() * f64::from(r.n) / f64::from(r.n).ln())
        .fold(0.0, f64::max);
    Ok(BinomialStudy {
        strictly_decreasing: gaps.windows(2).all(|w| w[1] < w[0]),
        rows,
        fitted_c,
    })
}

/// Exact joint law of a small pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLaw {
    pub n: u32,
    pub k: u32,
    pub mu: f64,
    pub mode: PoolingMode,
    /// `(positives, positive pools)` to probability.
    pub counts: BTreeMap<(u32, u32), f64>,
    /// `(positives, pool-type counts)` to probability.
    pub types: BTreeMap<(u32, PoolHistogram), f64>,
    /// Outcomes, over all poolings, with fewer positives than positive pools.
    pub bound_violations: u64,
}

impl JointLaw {
    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// `P(I = j / n)`.
    pub fn prevalence_probability(&self, j: u32) -> f64 {
        self.counts.iter().filter(|((a, _), _)| *a == j).map(|(_, p)| p).sum()
    }

    /// `P(sigma = b / k)`.
    pub fn sigma_probability(&self, b: u32) -> f64 {
        self.counts.iter().filter(|((_, s), _)| *s == b).map(|(_, p)| p).sum()
    }

    /// `P(P2 = hist | n I = j)`.
    pub fn conditional(&self, j: u32, hist: &PoolHistogram) -> Option<f64> {
        let pj = self.prevalence_probability(j);
        let joint = *self.types.get(&(j, hist.clone()))?;
        (pj > 0.0).then(|| joint / pj)
    }
}

fn pool_size_lists(n: u32, k: u32, mode: PoolingMode) -> Result<Vec<Vec<u32>>> {
    if n > ENUMERATION_MAX_N {
        return Err(Error::TooLarge {
            what: "enumeration size",
            n: u64::from(n),
            limit: u64::from(ENUMERATION_MAX_N),
        });
    }
    if k == 0 || k > n {
        return Err(Error::TooManyParts {
            n: u64::from(n),
            k: u64::from(k),
        });
    }
    Ok(match mode {
        PoolingMode::Partition => enumerate_partitions(n, k)?.into_iter().map(|p| p.into_parts()).collect(),
        PoolingMode::Composition => enumerate_compositions(n, k)?,
    })
}

/// Enumerate every pooling and every outcome vector with success
/// probability `mu = k q1 / n`.
pub fn enumerate_joint_law(n: u32, k: u32, q1: f64, mode: PoolingMode) -> Result<JointLaw> {
    let cfg = SimConfig::new(n.max(1), k, q1, mode, 0)?;
    enumerate_with_mu(n, k, cfg.mu(), mode)
}

fn enumerate_with_mu(n: u32, k: u32, mu: f64, mode: PoolingMode) -> Result<JointLaw> {
    let poolings = pool_size_lists(n, k, mode)?;
    let w_pool = 1.0 / poolings.len() as f64;
    let outcome_weight: Vec<f64> = (0..=n)
        .map(|j| ln_bernoulli_weight(u64::from(n), u64::from(j), mu).exp())
        .collect();
    let mut law = JointLaw {
        n,
        k,
        mu,
        mode,
        counts: BTreeMap::new(),
        types: BTreeMap::new(),
        bound_violations: 0,
    };
    let mut outcomes = vec![false; n as usize];
    for sizes in &poolings {
        for mask in 0u32..(1 << n) {
            for (i, o) in outcomes.iter_mut().enumerate() {
                *o = mask >> i & 1 == 1;
            }
            let j = mask.count_ones();
            let em = empirical_measures(sizes, &outcomes)?;
            let b = em.positives_per_pool.iter().filter(|&&c| c > 0).count() as u32;
            if j < b {
                law.bound_violations += 1;
            }
            let w = w_pool * outcome_weight[j as usize];
            if w == 0.0 {
                continue;
            }
            *law.counts.entry((j, b)).or_insert(0.0) += w;
            *law.types.entry((j, em.p2)).or_insert(0.0) += w;
        }
    }
    Ok(law)
}

/// Monte Carlo against enumeration on the `(I, sigma)` lattice.
#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub n: u32,
    pub k: u32,
    pub mu: f64,
    pub mode: PoolingMode,
    pub trials: u64,
    pub total_variation: f64,
}

pub fn mc_vs_enumeration(cfg: &SimConfig, trials: u64, workers: Option<usize>) -> Result<OracleComparison> {
    if trials == 0 {
        return Err(Error::Domain("at least one trial is needed".into()));
    }
    let exact = enumerate_joint_law(cfg.n, cfg.k, cfg.q1, cfg.mode)?;
    let hits: BTreeMap<(u32, u32), u64> = tally_batch(
        cfg,
        trials,
        workers,
        |acc: &mut BTreeMap<(u32, u32), u64>, r| {
            *acc.entry((r.n_positive as u32, r.n_positive_pools as u32)).or_insert(0) += 1;
        },
        |mut a, b| {
            for (key, c) in b {
                *a.entry(key).or_insert(0) += c;
            }
            a
        },
    )?;
    let mut keys: Vec<_> = exact.counts.keys().chain(hits.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let tv = 0.5
        * keys
            .iter()
            .map(|key| {
                let p = exact.counts.get(key).copied().unwrap_or(0.0);
                let q = hits.get(key).copied().unwrap_or(0) as f64 / trials as f64;
                (p - q).abs()
            })
            .sum::<f64>();
    Ok(OracleComparison {
        n: cfg.n,
        k: cfg.k,
        mu: cfg.mu(),
        mode: cfg.mode,
        trials,
        total_variation: tv,
    })
}

/// Exact conditional probability of a pool-type configuration given the
/// number of positives, next to the entropy estimate and its explicit bounds
/// (vanishing corrections dropped).
#[derive(Debug, Clone, Serialize)]
pub struct SandwichRow {
    pub n: u32,
    pub k: u32,
    pub positives: u32,
    /// Canonical pool-type counts, `m:c*count` joined by spaces.
    pub pool_types: String,
    pub exact: f64,
    pub central: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_eta1: f64,
    pub n_eta2: f64,
    pub above_lower: bool,
    pub below_upper: bool,
    /// Central estimate within `e^{n(|eta1| + |eta2|)}` of the exact value.
    pub within_factor: bool,
}

fn histogram_label(hist: &PoolHistogram) -> String {
    hist.canonical()
        .iter()
        .map(|(pt, c)| format!("{}:{}*{}", pt.size(), pt.positives(), c))
        .collect::<Vec<_>>()
        .join(" ")
}

fn sandwich_row(law: &JointLaw, j: u32, hist: &PoolHistogram) -> Result<SandwichRow> {
    let (n, k) = (law.n, law.k);
    let exact = law.conditional(j, hist).ok_or(Error::Unattainable {
        n: u64::from(n),
        k: u64::from(k),
    })?;
    let beta_n = f64::from(k) / f64::from(n);
    let omega = BinaryMeasure::bernoulli(f64::from(j) / f64::from(n))?;
    let pi = hist.to_law().normalized()?;
    let h = rel_entropy_pool_log(&pi, |pt| phi_log_density(beta_n, &omega, pt).unwrap_or(f64::NEG_INFINITY))?;
    let exponent = -f64::from(n) * beta_n * h.to_f64();
    let nf = f64::from(n);
    let n_eta1 = -nf * hist.iter().map(|(_, c)| 1.0 / (12.0 * c as f64)).sum::<f64>();
    let n_eta2 = nf * [n - j, j].iter().filter(|&&c| c > 0).map(|&c| 1.0 / f64::from(c)).sum::<f64>();
    let central = exponent.exp();
    let lower = (exponent + n_eta1).exp();
    let upper = (exponent + n_eta2).exp();
    let slack = n_eta1.abs() + n_eta2.abs();
    Ok(SandwichRow {
        n,
        k,
        positives: j,
        pool_types: histogram_label(hist),
        exact,
        central,
        lower,
        upper,
        n_eta1,
        n_eta2,
        above_lower: exact >= lower,
        below_upper: exact <= upper,
        within_factor: (exact.ln() - exponent).abs() <= slack,
    })
}

/// Given the number of positives the outcome vector is uniform, so the
/// conditional law does not depend on `mu`; enumeration uses `mu = 1/2`.
pub fn sandwich_report(n: u32, k: u32, mode: PoolingMode, positives: u32, hist: &PoolHistogram) -> Result<SandwichRow> {
    let law = enumerate_with_mu(n, k, 0.5, mode)?;
    sandwich_row(&law, positives, hist)
}

/// Sandwich rows for every attainable `(positives, pool types)`.
pub fn sandwich_sweep(n: u32, k: u32, mode: PoolingMode) -> Result<Vec<SandwichRow>> {
    let law = enumerate_with_mu(n, k, 0.5, mode)?;
    law.types.keys().map(|(j, hist)| sandwich_row(&law, *j, hist)).collect()
}

/// Set events on `(I, sigma)`, checked on integer counts with closed
/// thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayEvent {
    PrevalenceAtLeast { t: f64 },
    SigmaAtLeast { s: f64 },
    Box { t_lo: f64, t_hi: f64, s_lo: f64, s_hi: f64 },
}

fn ceil_count(n: u32, x: f64) -> u64 {
    (f64::from(n) * x - 1e-9).ceil().max(0.0) as u64
}

fn floor_count(n: u32, x: f64) -> u64 {
    (f64::from(n) * x + 1e-9).floor().max(0.0) as u64
}

impl DecayEvent {
    pub fn contains(&self, n: u32, k: u32, positives: u64, positive_pools: u64) -> bool {
        match *self {
            DecayEvent::PrevalenceAtLeast { t } => positives >= ceil_count(n, t),
            DecayEvent::SigmaAtLeast { s } => positive_pools >= ceil_count(k, s),
            DecayEvent::Box { t_lo, t_hi, s_lo, s_hi } => {
                (ceil_count(n, t_lo)..=floor_count(n, t_hi)).contains(&positives)
                    && (ceil_count(k, s_lo)..=floor_count(k, s_hi)).contains(&positive_pools)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let vals: &[f64] = match self {
            DecayEvent::PrevalenceAtLeast { t } => &[*t],
            DecayEvent::SigmaAtLeast { s } => &[*s],
            DecayEvent::Box { t_lo, t_hi, s_lo, s_hi } => &[*t_lo, *t_hi, *s_lo, *s_hi],
        };
        if vals.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(Error::Domain("event thresholds must lie in [0, 1]".into()))
        }
    }
}

/// Wilson score interval for `hits` successes in `trials`.
pub fn wilson_interval(hits: u64, trials: u64, z: f64) -> (f64, f64) {
    let nt = trials as f64;
    let p = hits as f64 / nt;
    let z2 = z * z;
    let denom = 1.0 + z2 / nt;
    let centre = (p + z2 / (2.0 * nt)) / denom;
    let half = z * (p * (1.0 - p) / nt + z2 / (4.0 * nt * nt)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Two-sided standard normal quantile for the given coverage.
pub fn normal_quantile(coverage: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(coverage)
}

fn normal_upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Settings for a decay-rate study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayConfig {
    /// Pools per individual; `k = round(beta n)`.
    pub beta: f64,
    pub q1: f64,
    pub mode: PoolingMode,
    pub trials: u64,
    pub seed: u64,
}

/// Monte Carlo estimate of `-(1/n) ln P(event)` per `n` with 95% Wilson bounds.
pub fn mc_decay_rate(event: &DecayEvent, ns: &[u32], dc: &DecayConfig, workers: Option<usize>) -> Result<Vec<ConvergenceRow>> {
    event.validate()?;
    let params = RateParams::new(dc.beta, dc.q1)?;
    let z = normal_quantile(0.95);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let k = ((dc.beta * f64::from(n)).round() as u32).clamp(1, n);
        let cfg = SimConfig::new(n, k, dc.q1, dc.mode, dc.seed)?;
        if let DecayEvent::PrevalenceAtLeast { t } = *event {
            let mu = cfg.mu();
            let sd = (f64::from(n) * mu * (1.0 - mu)).sqrt();
            let m = ceil_count(n, t) as f64;
            let approx = if sd > 0.0 {
                normal_upper_tail((m - 0.5 - f64::from(n) * mu) / sd)
            } else if f64::from(n) * mu >= m {
                1.0
            } else {
                0.0
            };
            check_resolvable(approx, dc.trials)?;
        }
        let hits: u64 = tally_batch(
            &cfg,
            dc.trials,
            workers,
            |acc: &mut u64, r| {
                if event.contains(n, k, r.n_positive, r.n_positive_pools) {
                    *acc += 1;
                }
            },
            |a, b| a + b,
        )?;
        if (hits as f64) < MIN_EXPECTED_HITS {
            check_resolvable(hits.max(1) as f64 / dc.trials as f64, dc.trials)?;
        }
        let nf = f64::from(n);
        let p_hat = hits as f64 / dc.trials as f64;
        let (lo, hi) = wilson_interval(hits, dc.trials, z);
        let rate = -p_hat.ln() / nf;
        let (limit, annotation) = match *event {
            DecayEvent::PrevalenceAtLeast { t } => {
                let l = if t <= params.pstar() { 0.0 } else { corollary_rate(t, &params)?.to_f64() };
                (Some(l), None)
            }
            DecayEvent::SigmaAtLeast { s } => {
                let t = t_of_sigma(s, f64::from(k) / nf)?;
                (None, corollary_rate(t, &params)?.finite())
            }
            DecayEvent::Box { .. } => (None, None),
        };
        rows.push(ConvergenceRow {
            n,
            finite_n_rate: rate,
            limit_rate: limit,
            gap: limit.map(|l| rate - l),
            method: Method::Mc,
            ci_low: Some(-hi.ln() / nf),
            ci_high: Some(-lo.ln() / nf),
            annotation,
        });
    }
    Ok(rows)
}

fn check_resolvable(probability: f64, trials: u64) -> Result<()> {
    let expected = probability * trials as f64;
    if expected >= MIN_EXPECTED_HITS {
        return Ok(());
    }
    let min_trials = (MIN_EXPECTED_HITS / probability).ceil();
    Err(Error::UnresolvableEvent {
        probability,
        min_trials,
        trials,
    })
}

/// Mean, standard error and 95% interval of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MeanEstimate {
    pub fn from_sample(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let se = (var / n).sqrt();
        let z = normal_quantile(0.95);
        MeanEstimate {
            mean,
            std_error: se,
            ci_low: mean - z * se,
            ci_high: mean + z * se,
        }
    }
}

/// Estimated prevalence from pool positivity against the true prevalence,
/// trial by trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypicalPointReport {
    pub n: u32,
    pub k: u32,
    pub q1: f64,
    pub mode: PoolingMode,
    pub trials: u64,
    pub prevalence: MeanEstimate,
    pub t_hat: MeanEstimate,
    pub sigma: MeanEstimate,
    /// `sigma_of_t` at the mean prevalence.
    pub sigma_predicted: f64,
    /// Paired differences `t_hat - I`.
    pub discrepancy: MeanEstimate,
    /// Discrepancy mean over its standard error.
    pub z_score: f64,
    /// `|z| <= 3`.
    pub pass: bool,
}

pub fn typical_point(cfg: &SimConfig, trials: u64, workers: Option<usize>) -> Result<TypicalPointReport> {
    if trials < 2 {
        return Err(Error::Domain("at least two trials are needed".into()));
    }
    let batch = run_batch(cfg, trials, workers)?;
    let col = |f: fn(&crate::simulate::TrialSummary) -> f64| batch.summaries.iter().map(f).collect::<Vec<_>>();
    let prevalence = MeanEstimate::from_sample(&col(|s| s.prevalence));
    let t_hat = MeanEstimate::from_sample(&col(|s| s.t_hat));
    let sigma = MeanEstimate::from_sample(&col(|s| s.sigma));
    let discrepancy = MeanEstimate::from_sample(&col(|s| s.t_hat - s.prevalence));
    let z_score = if discrepancy.std_error > 0.0 {
        discrepancy.mean / discrepancy.std_error
    } else if discrepancy.mean == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(discrepancy.mean)
    };
    Ok(TypicalPointReport {
        n: cfg.n,
        k: cfg.k,
        q1: cfg.q1,
        mode: cfg.mode,
        trials,
        sigma_predicted: sigma_of_t(prevalence.mean.clamp(0.0, 1.0), cfg.beta_n())?,
        prevalence,
        t_hat,
        sigma,
        discrepancy,
        z_score,
        pass: z_score.abs() <= 3.0,
    })
}

/// Pearson chi-square test of equal cell probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: u64,
    pub p_value: f64,
}

pub fn chi_square_uniform(counts: &[u64]) -> Result<ChiSquareTest> {
    if counts.len() < 2 {
        return Err(Error::Domain("chi-square needs at least two cells".into()));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("chi-square needs at least one observation".into()));
    }
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = counts.len() as u64 - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}

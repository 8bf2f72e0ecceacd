//! The pooling model: `n` i.i.d. Bernoulli outcomes split into `k` pools
//! along a random partition (or composition) of `n`; a pool tests positive
//! iff it contains a positive individual.
//!
//! Individuals are assigned to pools sequentially (the first `N_1` to pool 1
//! and so on). Outcomes are i.i.d., so any assignment rule independent of the
//! outcomes gives the same joint law of the empirical measures.
//!
//! Batches derive the random stream of trial `t` from `(seed, t)` alone and
//! aggregate with exact integer tallies, so results do not depend on the
//! number of workers or the order in which trials run.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{BinaryMeasure, PoolHistogram, PoolLaw, PoolType};
use crate::partitions::{sample_composition_uniform, PartitionSampler};
use crate::rates::t_of_sigma;

/// How pool sizes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Uniform integer partition, parts assigned to pools in nonincreasing order.
    #[default]
    Partition,
    /// Uniform composition (ordered pool sizes).
    Composition,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 2] = [PoolingMode::Partition, PoolingMode::Composition];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::Partition => "partition",
            PoolingMode::Composition => "composition",
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partition" => Ok(PoolingMode::Partition),
            "composition" => Ok(PoolingMode::Composition),
            other => Err(Error::Domain(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// Simulation parameters. The success probability is `mu = (k/n) * q1`
/// exactly, so the scaling `n mu / k = q1` holds at every `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub n: u32,
    pub k: u32,
    pub q1: f64,
    pub mode: PoolingMode,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n: u32, k: u32, q1: f64, mode: PoolingMode, seed: u64) -> Result<Self> {
        let cfg = SimConfig { n, k, q1, mode, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration with success probability `mu` instead of `q1`.
    pub fn with_prevalence(n: u32, k: u32, mu: f64, mode: PoolingMode, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::TooManyParts { n: u64::from(n), k: 0 });
        }
        Self::new(n, k, mu * f64::from(n) / f64::from(k), mode, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n {
            return Err(Error::TooManyParts {
                n: u64::from(self.n),
                k: u64::from(self.k),
            });
        }
        if !(self.q1 >= 0.0 && self.q1.is_finite()) {
            return Err(Error::Domain(format!("q1 = {} must be finite and nonnegative", self.q1)));
        }
        let mu = self.raw_mu();
        if mu > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "success probability beta_n * q1 = {mu} exceeds 1"
            )));
        }
        Ok(())
    }

    fn raw_mu(&self) -> f64 {
        f64::from(self.k) * self.q1 / f64::from(self.n)
    }

    /// `k / n`.
    pub fn beta_n(&self) -> f64 {
        f64::from(self.k) / f64::from(self.n)
    }

    /// Success probability `beta_n * q1`, clamped to `[0, 1]`.
    pub fn mu(&self) -> f64 {
        self.raw_mu().min(1.0)
    }
}

/// The empirical infection measure and exact pool-type counts of one pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasures {
    pub p1: BinaryMeasure,
    pub p2: PoolHistogram,
    pub positives_per_pool: Vec<u32>,
}

impl EmpiricalMeasures {
    pub fn p2_law(&self) -> PoolLaw {
        self.p2.to_law()
    }
}

/// Empirical measures of an outcome vector pooled sequentially by `pool_sizes`.
pub fn empirical_measures(pool_sizes: &[u32], outcomes: &[bool]) -> Result<EmpiricalMeasures> {
    let expected: usize = pool_sizes.iter().map(|&m| m as usize).sum();
    if expected != outcomes.len() {
        return Err(Error::LengthMismatch {
            expected,
            actual: outcomes.len(),
        });
    }
    if outcomes.is_empty() {
        return Err(Error::Domain("no individuals to pool".into()));
    }
    let mut p2 = PoolHistogram::new();
    let mut positives_per_pool = Vec::with_capacity(pool_sizes.len());
    let mut start = 0usize;
    for &m in pool_sizes {
        let c = outcomes[start..start + m as usize].iter().filter(|&&x| x).count() as u32;
        p2.add(PoolType::new(m, c)?);
        positives_per_pool.push(c);
        start += m as usize;
    }
    let positives: u64 = positives_per_pool.iter().map(|&c| u64::from(c)).sum();
    let n = outcomes.len() as f64;
    let p1 = BinaryMeasure::new((outcomes.len() as u64 - positives) as f64 / n, positives as f64 / n)?;
    Ok(EmpiricalMeasures {
        p1,
        p2,
        positives_per_pool,
    })
}

/// One simulated pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub n: u32,
    pub k: u32,
    /// Pool sizes in pool order.
    pub pool_sizes: Vec<u32>,
    pub outcomes: Vec<bool>,
    pub positives_per_pool: Vec<u32>,
    pub n_positive: u64,
    pub n_positive_pools: u64,
    pub p1: BinaryMeasure,
    pub p2: PoolHistogram,
}

impl TrialRecord {
    /// Fraction of positive individuals, `n_positive / n`.
    pub fn prevalence(&self) -> f64 {
        self.n_positive as f64 / f64::from(self.n)
    }

    /// Fraction of positive pools, `n_positive_pools / k`.
    pub fn sigma(&self) -> f64 {
        self.n_positive_pools as f64 / f64::from(self.k)
    }

    pub fn p2_law(&self) -> PoolLaw {
        self.p2.to_law()
    }

    /// Checks every structural invariant of a pooling; returns the first
    /// violated one.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let (n, k) = (u64::from(self.n), u64::from(self.k));
        let per_pool: u64 = self.positives_per_pool.iter().map(|&c| u64::from(c)).sum();
        if per_pool != self.n_positive {
            return Err(format!("per-pool positives sum to {per_pool}, expected {}", self.n_positive));
        }
        let positive_pools = self.positives_per_pool.iter().filter(|&&c| c >= 1).count() as u64;
        if positive_pools != self.n_positive_pools {
            return Err("positive pool count mismatch".into());
        }
        if self.n_positive < self.n_positive_pools {
            return Err(format!(
                "{} positives cannot make {} positive pools",
                self.n_positive, self.n_positive_pools
            ));
        }
        if self.p2.pools() != k || self.pool_sizes.len() as u64 != k {
            return Err("pool count mismatch".into());
        }
        if self.p2.moment_counts() != (n - self.n_positive, self.n_positive) {
            return Err("infection measure is not beta_n times the pool moments".into());
        }
        if self.p2.positive_pools() != self.n_positive_pools {
            return Err("pool histogram disagrees on positive pools".into());
        }
        let max_size = (n - k + 1) as u32;
        if self.p2.iter().any(|(pt, _)| pt.size() > max_size) {
            return Err("pool larger than n - k + 1".into());
        }
        Ok(())
    }
}

/// The random stream of trial `index` under `seed`.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A configured simulator; the partition sampler is built once and shared.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    sampler: Option<PartitionSampler>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let sampler = match cfg.mode {
            PoolingMode::Partition => Some(PartitionSampler::new(cfg.n, cfg.k)?),
            PoolingMode::Composition => None,
        };
        Ok(Simulator { cfg, sampler })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn pool_sizes<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        match &self.sampler {
            Some(s) => s.sample(rng).into_parts(),
            None => sample_composition_uniform(self.cfg.n, self.cfg.k, rng).expect("validated config"),
        }
    }

    pub fn trial<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialRecord {
        let pool_sizes = self.pool_sizes(rng);
        let mu = self.cfg.mu();
        let outcomes: Vec<bool> = (0..self.cfg.n).map(|_| rng.random_bool(mu)).collect();
        let em = empirical_measures(&pool_sizes, &outcomes).expect("sizes sum to n");
        let n_positive = em.positives_per_pool.iter().map(|&c| u64::from(c)).sum();
        let n_positive_pools = em.positives_per_pool.iter().filter(|&&c| c > 0).count() as u64;
        TrialRecord {
            n: self.cfg.n,
            k: self.cfg.k,
            pool_sizes,
            outcomes,
            positives_per_pool: em.positives_per_pool,
            n_positive,
            n_positive_pools,
            p1: em.p1,
            p2: em.p2,
        }
    }

    /// Trial `index` of the batch seeded by the configuration.
    pub fn indexed_trial(&self, index: u64) -> TrialRecord {
        self.trial(&mut trial_rng(self.cfg.seed, index))
    }
}

/// Run one trial with the given random stream.
pub fn run_trial<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<TrialRecord> {
    Ok(Simulator::new(*cfg)?.trial(rng))
}

/// Run `f` on a pool of `workers` threads, or the global pool when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Workers(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Per-trial summary row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trial: u64,
    pub n_positive: u64,
    pub n_positive_pools: u64,
    pub prevalence: f64,
    pub sigma: f64,
    pub t_hat: f64,
}

impl TrialSummary {
    fn from_record(trial: u64, rec: &TrialRecord, beta_n: f64) -> Self {
        let sigma = rec.sigma();
        TrialSummary {
            trial,
            n_positive: rec.n_positive,
            n_positive_pools: rec.n_positive_pools,
            prevalence: rec.prevalence(),
            sigma,
            t_hat: t_of_sigma(sigma, beta_n).expect("sigma in [0,1], beta_n in (0,1]"),
        }
    }
}

/// Exact integer tallies over a batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchStats {
    pub trials: u64,
    pub sum_positive: u128,
    pub sum_positive_sq: u128,
    pub sum_positive_pools: u128,
    pub sum_positive_pools_sq: u128,
    /// Trials with fewer positives than positive pools; always zero.
    pub bound_violations: u64,
    /// Pool-type counts pooled over all trials.
    pub pooled_p2: PoolHistogram,
}

impl BatchStats {
    pub fn record(&mut self, rec: &TrialRecord) {
        let (a, b) = (u128::from(rec.n_positive), u128::from(rec.n_positive_pools));
        self.trials += 1;
        self.sum_positive += a;
        self.sum_positive_sq += a * a;
        self.sum_positive_pools += b;
        self.sum_positive_pools_sq += b * b;
        if rec.n_positive < rec.n_positive_pools {
            self.bound_violations += 1;
        }
        self.pooled_p2.merge(&rec.p2);
    }

    pub fn merge(mut self, other: BatchStats) -> BatchStats {
        self.trials += other.trials;
        self.sum_positive += other.sum_positive;
        self.sum_positive_sq += other.sum_positive_sq;
        self.sum_positive_pools += other.sum_positive_pools;
        self.sum_positive_pools_sq += other.sum_positive_pools_sq;
        self.bound_violations += other.bound_violations;
        self.pooled_p2.merge(&other.pooled_p2);
        self
    }

    fn mean_var(sum: u128, sum_sq: u128, trials: u64, scale: f64) -> (f64, f64) {
        let t = trials as f64;
        let mean = sum as f64 / t;
        let var = if trials > 1 {
            // exact integer numerator: T * sum_sq - sum^2
            let num = (trials as u128) * sum_sq - sum * sum;
            num as f64 / (t * (t - 1.0))
        } else {
            0.0
        };
        (mean / scale, var / (scale * scale))
    }

    /// Mean and sample variance of the prevalence across trials.
    pub fn prevalence_mean_var(&self, n: u32) -> (f64, f64) {
        Self::mean_var(self.sum_positive, self.sum_positive_sq, self.trials, f64::from(n))
    }

    /// Mean and sample variance of the positive-pool fraction across trials.
    pub fn sigma_mean_var(&self, k: u32) -> (f64, f64) {
        Self::mean_var(self.sum_positive_pools, self.sum_positive_pools_sq, self.trials, f64::from(k))
    }
}

/// Summaries of every trial, in trial order, plus aggregate tallies.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub config: SimConfig,
    pub summaries: Vec<TrialSummary>,
    pub stats: BatchStats,
}

/// Run `trials` independent trials on up to `workers` threads.
pub fn run_batch(cfg: &SimConfig, trials: u64, workers: Option<usize>) -> Result<BatchResult> {
    if trials == 0 {
        return Err(Error::Domain("a batch needs at least one trial".into()));
    }
    let sim = Simulator::new(*cfg)?;
    let beta_n = cfg.beta_n();
    let (summaries, stats) = with_workers(workers, || {
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let rec = sim.indexed_trial(t);
                let mut stats = BatchStats::default();
                stats.record(&rec);
                (TrialSummary::from_record(t, &rec, beta_n), stats)
            })
            .fold(
                || (Vec::new(), BatchStats::default()),
                |(mut rows, acc), (row, s)| {
                    rows.push(row);
                    (rows, acc.merge(s))
                },
            )
            .reduce(
                || (Vec::new(), BatchStats::default()),
                |(mut a, sa), (b, sb)| {
                    a.extend(b);
                    (a, sa.merge(sb))
                },
            )
    })?;
    let mut summaries = summaries;
    summaries.sort_by_key(|s| s.trial);
    Ok(BatchResult {
        config: *cfg,
        summaries,
        stats,
    })
}

/// Fold every trial of a batch into an order-independent tally. `fold` must
/// commute with `merge` for results to be independent of the worker count.
pub fn tally_batch<A, F, M>(cfg: &SimConfig, trials: u64, workers: Option<usize>, fold: F, merge: M) -> Result<A>
where
    A: Default + Send,
    F: Fn(&mut A, &TrialRecord) + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    let sim = Simulator::new(*cfg)?;
    with_workers(workers, || {
        (0..trials)
            .into_par_iter()
            .fold(A::default, |mut acc, t| {
                fold(&mut acc, &sim.indexed_trial(t));
                acc
            })
            .reduce(A::default, &merge)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u32, k: u32, q1: f64, mode: PoolingMode) -> SimConfig {
        SimConfig::new(n, k, q1, mode, 42).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(5, 6, 0.1, PoolingMode::Partition, 0).is_err());
        assert!(SimConfig::new(5, 0, 0.1, PoolingMode::Partition, 0).is_err());
        assert!(SimConfig::new(10, 5, 2.5, PoolingMode::Partition, 0).is_err());
        let c = cfg(10, 5, 2.0, PoolingMode::Partition);
        assert_eq!(c.mu(), 1.0);
        assert!((SimConfig::with_prevalence(8, 3, 0.25, PoolingMode::Composition, 0).unwrap().mu() - 0.25).abs() < 1e-15);
        assert_eq!("composition".parse::<PoolingMode>().unwrap(), PoolingMode::Composition);
        assert!("other".parse::<PoolingMode>().is_err());
    }

    #[test]
    fn empirical_measures_examples() {
        let em = empirical_measures(&[2, 2], &[false; 4]).unwrap();
        assert_eq!(em.p1, BinaryMeasure::new(1.0, 0.0).unwrap());
        assert_eq!(em.p2_law(), PoolLaw::point_mass(PoolType::new(2, 0).unwrap()));

        let em = empirical_measures(&[2, 1], &[true, false, false]).unwrap();
        assert_eq!(em.p2.count(PoolType::new(2, 1).unwrap()), 1);
        assert_eq!(em.p2.count(PoolType::new(1, 0).unwrap()), 1);
        assert!((em.p1.w1() - 1.0 / 3.0).abs() < 1e-15);
        assert!((em.p1.w0() - 2.0 / 3.0).abs() < 1e-15);

        assert!(matches!(
            empirical_measures(&[2, 2], &[true; 3]),
            Err(Error::LengthMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn degenerate_prevalence() {
        for mode in PoolingMode::ALL {
            let mut rng = trial_rng(1, 0);
            let none = run_trial(&cfg(50, 10, 0.0, mode), &mut rng).unwrap();
            assert_eq!((none.n_positive, none.n_positive_pools), (0, 0));
            assert!(none.p2.iter().all(|(pt, _)| !pt.is_positive()));

            let all = run_trial(&cfg(50, 10, 5.0, mode), &mut rng).unwrap();
            assert_eq!(all.prevalence(), 1.0);
            assert_eq!(all.sigma(), 1.0);
        }
    }

    #[test]
    fn invariants_hold_on_random_trials() {
        for (n, k, q1) in [(10, 3, 0.5), (40, 7, 1.0), (25, 25, 0.3), (30, 1, 0.01)] {
            for mode in PoolingMode::ALL {
                let sim = Simulator::new(cfg(n, k, q1, mode)).unwrap();
                for t in 0..200 {
                    let rec = sim.indexed_trial(t);
                    rec.check_invariants().unwrap();
                    let moments = crate::measures::moment_map(&rec.p2_law()).scaled(rec.k as f64 / rec.n as f64);
                    assert!(moments.l1_distance(&rec.p1) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batches_are_deterministic_and_worker_independent() {
        let c = cfg(60, 12, 0.8, PoolingMode::Partition);
        let a = run_batch(&c, 300, Some(1)).unwrap();
        let b = run_batch(&c, 300, Some(4)).unwrap();
        let d = run_batch(&c, 300, None).unwrap();
        assert_eq!(a.summaries, b.summaries);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.stats, d.stats);
        assert_eq!(a.stats.bound_violations, 0);
        assert_eq!(a.stats.pooled_p2.pools(), 300 * 12);
    }

    #[test]
    fn tally_matches_batch() {
        let c = cfg(30, 6, 1.0, PoolingMode::Composition);
        let total: u64 = tally_batch(&c, 100, Some(3), |acc: &mut u64, r| *acc += r.n_positive, |a, b| a + b).unwrap();
        let batch = run_batch(&c, 100, Some(2)).unwrap();
        assert_eq!(u128::from(total), batch.stats.sum_positive);
    }

    #[test]
    fn composition_prevalence_is_binomial() {
        let c = cfg(40, 8, 1.25, PoolingMode::Composition);
        let trials = 4000u64;
        let batch = run_batch(&c, trials, None).unwrap();
        let mu = c.mu();
        let (mean, var) = batch.stats.prevalence_mean_var(c.n);
        let n = f64::from(c.n);
        // Binomial(n, mu)/n has mean mu and variance mu(1-mu)/n
        let se_mean = (mu * (1.0 - mu) / n / trials as f64).sqrt();
        assert!((mean - mu).abs() < 4.0 * se_mean, "mean {mean} vs {mu}");
        let v = mu * (1.0 - mu) / n;
        let se_var = v * (2.0 / (trials as f64 - 1.0)).sqrt();
        assert!((var - v).abs() < 4.0 * se_var, "var {var} vs {v}");
    }
}

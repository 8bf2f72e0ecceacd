//! Finite measures on `{0,1}` and on pool types, generalized relative
//! entropy, and the zero-truncated product-Poisson reference law of pool
//! compositions.
//!
//! A pool is described by its size `m` and positive count `c`; the
//! within-pool frequency vector is `((m-c)/m, c/m)`, and the pair
//! `(a, b) = (m-c, c)` is the pool's count of negatives and positives.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::ext::ExtReal;

/// Tolerance used when a measure is required to have total mass one.
pub const PROBABILITY_TOL: f64 = 1e-12;

/// Default support truncation for sums over the reference law.
pub const DEFAULT_M_MAX: u32 = 60;

/// Nonnegative weights on the two outcomes `0` (negative) and `1` (positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryMeasure {
    w0: f64,
    w1: f64,
}

impl BinaryMeasure {
    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        if !(w0.is_finite() && w1.is_finite()) {
            return Err(Error::InvalidMeasure(format!("non-finite weights ({w0}, {w1})")));
        }
        if w0 < 0.0 || w1 < 0.0 {
            return Err(Error::InvalidMeasure(format!("negative weights ({w0}, {w1})")));
        }
        Ok(BinaryMeasure { w0, w1 })
    }

    /// A probability measure; the weights must sum to one within [`PROBABILITY_TOL`].
    pub fn probability(w0: f64, w1: f64) -> Result<Self> {
        let m = Self::new(w0, w1)?;
        if (m.total() - 1.0).abs() > PROBABILITY_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights ({w0}, {w1}) do not sum to one"
            )));
        }
        Ok(m)
    }

    /// The probability measure `(1 - p, p)`.
    pub fn bernoulli(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidMeasure(format!("success probability {p} outside [0,1]")));
        }
        Ok(BinaryMeasure { w0: 1.0 - p, w1: p })
    }

    pub fn w0(&self) -> f64 {
        self.w0
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn get(&self, x: usize) -> f64 {
        match x {
            0 => self.w0,
            1 => self.w1,
            _ => panic!("outcome {x} outside {{0,1}}"),
        }
    }

    pub fn total(&self) -> f64 {
        self.w0 + self.w1
    }

    pub fn is_probability(&self) -> bool {
        (self.total() - 1.0).abs() <= PROBABILITY_TOL
    }

    /// Multiply both weights by a nonnegative factor.
    pub fn scaled(&self, factor: f64) -> BinaryMeasure {
        assert!(factor >= 0.0 && factor.is_finite(), "scale factor must be finite and nonnegative");
        BinaryMeasure {
            w0: self.w0 * factor,
            w1: self.w1 * factor,
        }
    }

    /// L1 distance between two measures.
    pub fn l1_distance(&self, other: &BinaryMeasure) -> f64 {
        (self.w0 - other.w0).abs() + (self.w1 - other.w1).abs()
    }
}

/// Size `m >= 1` and positive count `0 <= c <= m` of a single pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PoolType {
    m: u32,
    c: u32,
}

impl PoolType {
    pub fn new(m: u32, c: u32) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidMeasure("pool size must be positive".into()));
        }
        if c > m {
            return Err(Error::InvalidMeasure(format!(
                "pool of size {m} cannot hold {c} positives"
            )));
        }
        Ok(PoolType { m, c })
    }

    /// From negative and positive counts; `(0, 0)` is not a pool.
    pub fn from_counts(negatives: u32, positives: u32) -> Result<Self> {
        Self::new(negatives + positives, positives)
    }

    pub fn size(&self) -> u32 {
        self.m
    }

    pub fn positives(&self) -> u32 {
        self.c
    }

    pub fn negatives(&self) -> u32 {
        self.m - self.c
    }

    pub fn is_positive(&self) -> bool {
        self.c > 0
    }

    /// Within-pool outcome frequencies `((m-c)/m, c/m)`.
    pub fn frequencies(&self) -> BinaryMeasure {
        let m = f64::from(self.m);
        BinaryMeasure {
            w0: f64::from(self.m - self.c) / m,
            w1: f64::from(self.c) / m,
        }
    }
}

/// A finitely supported measure on pool types with strictly positive weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolLaw {
    atoms: BTreeMap<PoolType, f64>,
    total: f64,
}

impl PoolLaw {
    /// Build from `(atom, weight)` pairs. Zero weights are dropped and
    /// repeated atoms accumulate.
    pub fn from_weights<I>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (PoolType, f64)>,
    {
        let mut atoms = BTreeMap::new();
        for (pt, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidMeasure(format!("weight {w} at {pt:?}")));
            }
            if w > 0.0 {
                *atoms.entry(pt).or_insert(0.0) += w;
            }
        }
        let total = atoms.values().sum();
        Ok(PoolLaw { atoms, total })
    }

    /// As [`PoolLaw::from_weights`], additionally requiring total mass one.
    pub fn probability<I>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (PoolType, f64)>,
    {
        let law = Self::from_weights(weights)?;
        if !law.is_probability() {
            return Err(Error::InvalidMeasure(format!(
                "pool law has total mass {}, expected 1",
                law.total
            )));
        }
        Ok(law)
    }

    pub fn point_mass(pt: PoolType) -> Self {
        Self::from_weights([(pt, 1.0)]).expect("unit weight is valid")
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn is_probability(&self) -> bool {
        (self.total - 1.0).abs() <= PROBABILITY_TOL
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weight(&self, pt: PoolType) -> f64 {
        self.atoms.get(&pt).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PoolType, f64)> + '_ {
        self.atoms.iter().map(|(pt, w)| (*pt, *w))
    }

    /// Rescale to total mass one.
    pub fn normalized(&self) -> Result<Self> {
        if self.total <= 0.0 {
            return Err(Error::InvalidMeasure("cannot normalize an empty pool law".into()));
        }
        Ok(PoolLaw {
            atoms: self.atoms.iter().map(|(pt, w)| (*pt, w / self.total)).collect(),
            total: 1.0,
        })
    }

    /// Mass on pools with no positive member.
    pub fn negative_pool_mass(&self) -> f64 {
        self.iter().filter(|(pt, _)| !pt.is_positive()).map(|(_, w)| w).sum()
    }
}

/// Exact pool-type counts of one pooling: the empirical pool law times `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PoolHistogram {
    counts: BTreeMap<PoolType, u64>,
}

impl PoolHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pt: PoolType) {
        self.add_count(pt, 1);
    }

    pub fn add_count(&mut self, pt: PoolType, count: u64) {
        if count > 0 {
            *self.counts.entry(pt).or_insert(0) += count;
        }
    }

    pub fn merge(&mut self, other: &PoolHistogram) {
        for (pt, c) in &other.counts {
            self.add_count(*pt, *c);
        }
    }

    /// Number of pools recorded.
    pub fn pools(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, pt: PoolType) -> u64 {
        self.counts.get(&pt).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PoolType, u64)> + '_ {
        self.counts.iter().map(|(pt, c)| (*pt, *c))
    }

    /// Canonical sorted `(pool type, count)` list.
    pub fn canonical(&self) -> Vec<(PoolType, u64)> {
        self.iter().collect()
    }

    /// Exact moment counts `(sum of negatives, sum of positives)` over pools.
    pub fn moment_counts(&self) -> (u64, u64) {
        self.iter().fold((0, 0), |(a, b), (pt, c)| {
            (a + u64::from(pt.negatives()) * c, b + u64::from(pt.positives()) * c)
        })
    }

    /// Number of pools containing at least one positive.
    pub fn positive_pools(&self) -> u64 {
        self.iter().filter(|(pt, _)| pt.is_positive()).map(|(_, c)| c).sum()
    }

    /// The empirical pool law: each pool weighs `1/k`.
    pub fn to_law(&self) -> PoolLaw {
        let k = self.pools() as f64;
        PoolLaw::from_weights(self.iter().map(|(pt, c)| (pt, c as f64 / k)))
            .expect("histogram weights are nonnegative")
    }
}

/// Generalized relative entropy `sum mu log(mu/nu) - mu + nu` of two finite
/// measures on `{0,1}`. Reduces to the usual divergence when both have
/// total mass one.
pub fn rel_entropy_gen(mu: &BinaryMeasure, nu: &BinaryMeasure) -> ExtReal {
    let mut acc = 0.0;
    for x in 0..2 {
        let (m, v) = (mu.get(x), nu.get(x));
        if m > 0.0 {
            if v == 0.0 {
                return ExtReal::Infinite;
            }
            acc += m * (m / v).ln() - m + v;
        } else {
            acc += v;
        }
    }
    ExtReal::Finite(acc)
}

/// Relative entropy of a probability pool law against a density given in
/// log-space. Atoms where the log-density is `-inf` give `+inf`.
pub fn rel_entropy_pool_log<F>(pi: &PoolLaw, ln_ref: F) -> Result<ExtReal>
where
    F: Fn(PoolType) -> f64,
{
    if !pi.is_probability() {
        return Err(Error::InvalidMeasure(format!(
            "relative entropy needs a probability pool law, total is {}",
            pi.total()
        )));
    }
    let mut acc = 0.0;
    for (pt, w) in pi.iter() {
        let lr = ln_ref(pt);
        if lr == f64::NEG_INFINITY {
            return Ok(ExtReal::Infinite);
        }
        acc += w * (w.ln() - lr);
    }
    Ok(ExtReal::Finite(acc))
}

/// Relative entropy of a probability pool law against a reference density.
pub fn rel_entropy_pool<F>(pi: &PoolLaw, ref_density: F) -> Result<ExtReal>
where
    F: Fn(PoolType) -> f64,
{
    rel_entropy_pool_log(pi, |pt| ref_density(pt).ln())
}

/// `ln(1 - e^{-1/beta})`, the log normalizer of the reference law.
pub(crate) fn ln_phi_normalizer(beta: f64) -> f64 {
    (-(-1.0 / beta).exp_m1()).ln()
}

fn ln_poisson(lambda: f64, j: u32) -> f64 {
    if lambda == 0.0 {
        return if j == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    f64::from(j) * lambda.ln() - lambda - ln_factorial(u64::from(j))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain(format!("beta = {beta} outside (0, 1]")));
    }
    Ok(())
}

fn check_probability(omega: &BinaryMeasure) -> Result<()> {
    if !omega.is_probability() {
        return Err(Error::InvalidMeasure(format!(
            "expected a probability measure, total is {}",
            omega.total()
        )));
    }
    Ok(())
}

/// Log-density of the reference pool law: independent Poisson counts of
/// negatives and positives with means `omega(0)/beta` and `omega(1)/beta`,
/// conditioned on the pool being nonempty.
pub fn phi_log_density(beta: f64, omega: &BinaryMeasure, pt: PoolType) -> Result<f64> {
    check_beta(beta)?;
    check_probability(omega)?;
    Ok(phi_log_density_unchecked(beta, omega, pt))
}

pub(crate) fn phi_log_density_unchecked(beta: f64, omega: &BinaryMeasure, pt: PoolType) -> f64 {
    ln_poisson(omega.w0() / beta, pt.negatives()) + ln_poisson(omega.w1() / beta, pt.positives())
        - ln_phi_normalizer(beta)
}

/// Density of the reference pool law at one pool type.
pub fn phi_density(beta: f64, omega: &BinaryMeasure, pt: PoolType) -> Result<f64> {
    phi_log_density(beta, omega, pt).map(f64::exp)
}

/// Moment map: expected negatives and positives per pool under `pi`.
pub fn moment_map(pi: &PoolLaw) -> BinaryMeasure {
    let (a, b) = pi.iter().fold((0.0, 0.0), |(a, b), (pt, w)| {
        (a + f64::from(pt.negatives()) * w, b + f64::from(pt.positives()) * w)
    });
    BinaryMeasure::new(a, b).expect("moments of a nonnegative measure are nonnegative")
}

/// Closed-form reference mass of pools with no positive member.
pub fn pool_negative_mass(beta: f64, omega: &BinaryMeasure) -> Result<f64> {
    check_beta(beta)?;
    check_probability(omega)?;
    let w1 = omega.w1();
    // e^{-w1/beta} (1 - e^{-(1-w1)/beta}) / (1 - e^{-1/beta})
    let num = (-w1 / beta).exp() * -(-(1.0 - w1) / beta).exp_m1();
    Ok(num / -(-1.0 / beta).exp_m1())
}

/// Upper tail `P(Poisson(lambda) > m_max)`, summed term by term.
pub fn poisson_upper_tail(lambda: f64, m_max: u32) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut j = m_max + 1;
    let mut ln_term = ln_poisson(lambda, j);
    let mut acc = 0.0;
    loop {
        let term = ln_term.exp();
        acc += term;
        if f64::from(j) > lambda && (term <= acc * 1e-17 || term < 1e-300) {
            break;
        }
        j += 1;
        ln_term += lambda.ln() - f64::from(j).ln();
    }
    acc
}

/// The reference pool law restricted to pools of size at most `m_max`,
/// together with the mass it leaves out.
#[derive(Debug, Clone)]
pub struct PhiTruncation {
    beta: f64,
    omega: BinaryMeasure,
    m_max: u32,
    atoms: Vec<(PoolType, f64)>,
    mass: f64,
    tail_mass: f64,
}

impl PhiTruncation {
    pub fn new(beta: f64, omega: &BinaryMeasure, m_max: u32) -> Result<Self> {
        check_beta(beta)?;
        check_probability(omega)?;
        if m_max == 0 {
            return Err(Error::Domain("truncation must keep at least pools of size 1".into()));
        }
        let mut atoms = Vec::with_capacity((m_max as usize) * (m_max as usize + 3) / 2);
        for m in 1..=m_max {
            for c in 0..=m {
                let pt = PoolType { m, c };
                atoms.push((pt, phi_log_density_unchecked(beta, omega, pt)));
            }
        }
        let mass = atoms.iter().map(|(_, l)| l.exp()).sum();
        let tail_mass = poisson_upper_tail(1.0 / beta, m_max) / -(-1.0 / beta).exp_m1();
        Ok(PhiTruncation {
            beta,
            omega: *omega,
            m_max,
            atoms,
            mass,
            tail_mass,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn omega(&self) -> &BinaryMeasure {
        &self.omega
    }

    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    /// `(pool type, log-density)` for every pool of size at most `m_max`.
    pub fn atoms(&self) -> &[(PoolType, f64)] {
        &self.atoms
    }

    /// Reference mass captured by the truncation.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Reference mass on pools larger than `m_max`.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// The truncated law rescaled to a probability measure.
    pub fn renormalized(&self) -> PoolLaw {
        PoolLaw::from_weights(self.atoms.iter().map(|(pt, l)| (*pt, l.exp() / self.mass)))
            .expect("densities are nonnegative")
    }

    /// Moment map of the (unnormalized) truncated reference law.
    pub fn moments(&self) -> BinaryMeasure {
        let pi = PoolLaw::from_weights(self.atoms.iter().map(|(pt, l)| (*pt, l.exp())))
            .expect("densities are nonnegative");
        moment_map(&pi)
    }

    /// Truncated sum of the reference mass on pools without positives.
    pub fn negative_pool_mass(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|(pt, _)| !pt.is_positive())
            .map(|(_, l)| l.exp())
            .sum()
    }
}

/// Compares the reference law's moment map with the constraint target
/// `omega/beta`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhiMomentGap {
    /// Moments of the truncated reference law.
    pub truncated: BinaryMeasure,
    /// Closed-form moments of the untruncated law, `(omega/beta)/(1 - e^{-1/beta})`.
    pub analytic: BinaryMeasure,
    /// The constraint target `omega/beta`.
    pub target: BinaryMeasure,
    /// L1 distance between the analytic moments and the target.
    pub gap: f64,
}

pub fn phi_moment_gap(beta: f64, omega: &BinaryMeasure, m_max: u32) -> Result<PhiMomentGap> {
    let trunc = PhiTruncation::new(beta, omega, m_max)?;
    let target = omega.scaled(1.0 / beta);
    let analytic = target.scaled(1.0 / -(-1.0 / beta).exp_m1());
    Ok(PhiMomentGap {
        truncated: trunc.moments(),
        analytic,
        target,
        gap: analytic.l1_distance(&target),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn pt(m: u32, c: u32) -> PoolType {
        PoolType::new(m, c).unwrap()
    }

    #[test]
    fn binary_measure_rejects_bad_weights() {
        assert!(BinaryMeasure::new(-0.1, 1.0).is_err());
        assert!(BinaryMeasure::new(f64::NAN, 1.0).is_err());
        assert!(BinaryMeasure::probability(0.5, 0.6).is_err());
        assert!(BinaryMeasure::probability(0.3, 0.7).is_ok());
    }

    #[test]
    fn pool_type_invariants() {
        assert!(PoolType::new(0, 0).is_err());
        assert!(PoolType::new(2, 3).is_err());
        let p = pt(5, 2);
        assert_eq!((p.negatives(), p.positives()), (3, 2));
        assert!(p.frequencies().is_probability());
        assert_eq!(p.frequencies().scaled(5.0).w0(), 3.0);
    }

    #[test]
    fn rel_entropy_gen_examples() {
        let a = BinaryMeasure::new(0.3, 0.7).unwrap();
        assert_eq!(rel_entropy_gen(&a, &a), ExtReal::Finite(0.0));

        let mu = BinaryMeasure::new(0.5, 0.5).unwrap();
        let nu = BinaryMeasure::new(0.5, 0.0).unwrap();
        assert_eq!(rel_entropy_gen(&mu, &nu), ExtReal::Infinite);

        // 2 ln 2 - 2 + 1 for outcome 0, plus 1 for outcome 1.
        let mu = BinaryMeasure::new(2.0, 0.0).unwrap();
        let nu = BinaryMeasure::new(1.0, 1.0).unwrap();
        let expected = 2.0 * 2f64.ln() - 2.0 + 1.0 + 1.0;
        assert_abs_diff_eq!(rel_entropy_gen(&mu, &nu).to_f64(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 1.386294, epsilon = 1e-6);
    }

    #[test]
    fn rel_entropy_pool_examples() {
        let one = PoolLaw::point_mass(pt(1, 0));
        assert_eq!(rel_entropy_pool(&one, |_| 1.0).unwrap(), ExtReal::Finite(0.0));
        assert_abs_diff_eq!(
            rel_entropy_pool(&one, |_| 0.5).unwrap().to_f64(),
            2f64.ln(),
            epsilon = 1e-15
        );
        assert_eq!(rel_entropy_pool(&one, |_| 0.0).unwrap(), ExtReal::Infinite);

        let half = PoolLaw::from_weights([(pt(1, 0), 0.5)]).unwrap();
        assert!(rel_entropy_pool(&half, |_| 0.5).is_err());
    }

    #[test]
    fn truncated_phi_has_negligible_entropy() {
        let omega = BinaryMeasure::bernoulli(0.2).unwrap();
        let trunc = PhiTruncation::new(0.5, &omega, 40).unwrap();
        let pi = trunc.renormalized();
        let h = rel_entropy_pool_log(&pi, |p| phi_log_density(0.5, &omega, p).unwrap()).unwrap();
        assert!(h.to_f64().abs() <= 1e-10, "{h}");
    }

    #[test]
    fn phi_density_examples() {
        let omega = BinaryMeasure::bernoulli(0.2).unwrap();
        let expected = 0.4 * (-2f64).exp() / (1.0 - (-2f64).exp());
        assert_abs_diff_eq!(phi_density(0.5, &omega, pt(1, 1)).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.062607, epsilon = 1e-6);

        let none = BinaryMeasure::bernoulli(0.0).unwrap();
        assert_eq!(phi_density(0.5, &none, pt(3, 1)).unwrap(), 0.0);
        assert!(phi_density(0.5, &none, pt(3, 0)).unwrap() > 0.0);
        assert!(phi_density(1.5, &none, pt(3, 0)).is_err());
    }

    #[test]
    fn phi_normalizes_over_grid() {
        for beta in [0.1, 0.2, 0.5, 1.0] {
            for w1 in [0.0, 0.05, 0.2, 0.5, 0.95] {
                let omega = BinaryMeasure::bernoulli(w1).unwrap();
                let trunc = PhiTruncation::new(beta, &omega, 60).unwrap();
                assert!((trunc.mass() - 1.0).abs() < 1e-8, "beta={beta} w1={w1}");
                assert!(trunc.tail_mass() < 1e-8);
                assert!((trunc.mass() + trunc.tail_mass() - 1.0).abs() < 1e-12);
            }
        }
        let omega = BinaryMeasure::bernoulli(0.2).unwrap();
        let trunc = PhiTruncation::new(0.5, &omega, 60).unwrap();
        assert!((trunc.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn moment_map_examples() {
        assert_eq!(moment_map(&PoolLaw::point_mass(pt(3, 1))), BinaryMeasure::new(2.0, 1.0).unwrap());
        let pi = PoolLaw::probability([(pt(2, 0), 0.5), (pt(2, 2), 0.5)]).unwrap();
        assert_eq!(moment_map(&pi), BinaryMeasure::new(1.0, 1.0).unwrap());
    }

    #[test]
    fn pool_negative_mass_examples() {
        let at = |w1: f64, beta: f64| pool_negative_mass(beta, &BinaryMeasure::bernoulli(w1).unwrap()).unwrap();
        assert_abs_diff_eq!(at(0.0, 0.5), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at(1.0, 0.5), 0.0, epsilon = 1e-15);
        // e^{-0.4}(1 - e^{-1.6})/(1 - e^{-2}), recomputed independently as 0.6187193167793194
        assert_abs_diff_eq!(at(0.2, 0.5), 0.6187193167793194, epsilon = 1e-14);
        assert_abs_diff_eq!(at(0.2, 0.5), 0.618721, epsilon = 5e-6);

        for beta in [0.1, 0.2, 0.5, 1.0] {
            for w1 in [0.0, 0.05, 0.2, 0.5, 0.95, 1.0] {
                let omega = BinaryMeasure::bernoulli(w1).unwrap();
                let summed = PhiTruncation::new(beta, &omega, 60).unwrap().negative_pool_mass();
                assert!((summed - at(w1, beta)).abs() < 1e-10, "beta={beta} w1={w1}");
            }
        }
    }

    #[test]
    fn negative_mass_identity() {
        for beta in [0.1, 0.25, 0.5, 0.75, 1.0] {
            for i in 0..=50 {
                let w1 = f64::from(i) / 50.0;
                let omega = BinaryMeasure::bernoulli(w1).unwrap();
                let pos = -(-w1 / beta).exp_m1() / -(-1.0 / beta).exp_m1();
                assert!((pool_negative_mass(beta, &omega).unwrap() + pos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_misses_moment_constraint() {
        let omega = BinaryMeasure::bernoulli(0.2).unwrap();
        let gap = phi_moment_gap(0.5, &omega, 60).unwrap();
        assert!(gap.truncated.l1_distance(&gap.analytic) < 1e-10);
        assert!(gap.gap > 0.1);
    }

    #[test]
    fn histogram_moments_and_law() {
        let mut h = PoolHistogram::new();
        h.add(pt(2, 1));
        h.add(pt(1, 0));
        assert_eq!(h.moment_counts(), (2, 1));
        assert_eq!(h.positive_pools(), 1);
        let law = h.to_law();
        assert!(law.is_probability());
        assert_eq!(law.weight(pt(2, 1)), 0.5);
    }

    proptest! {
        #[test]
        fn gibbs_inequality(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, d in 0.0f64..5.0) {
            let mu = BinaryMeasure::new(a, b).unwrap();
            let nu = BinaryMeasure::new(c, d).unwrap();
            let h = rel_entropy_gen(&mu, &nu);
            prop_assert!(h.to_f64() >= -1e-12);
            if mu.l1_distance(&nu) > 1e-3 {
                prop_assert!(h.to_f64() > 0.0);
            }
        }

        #[test]
        fn reduces_to_kl_on_probabilities(p in 0.0f64..=1.0, q in 1e-6f64..1.0 - 1e-6) {
            let mu = BinaryMeasure::bernoulli(p).unwrap();
            let nu = BinaryMeasure::bernoulli(q).unwrap();
            let term = |x: f64, y: f64| if x > 0.0 { x * (x / y).ln() } else { 0.0 };
            let kl = term(1.0 - p, 1.0 - q) + term(p, q);
            prop_assert!((rel_entropy_gen(&mu, &nu).to_f64() - kl).abs() < 1e-12);
        }
    }
}

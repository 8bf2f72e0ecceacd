//! Counting, enumeration and uniform sampling of integer partitions of `n`
//! into exactly `k` positive parts, and of compositions (ordered splits).
//!
//! Uniform partitions are drawn by unranking a uniform integer against the
//! recurrence `p(n,k) = p(n-1,k-1) + p(n-k,k)`. Rank `r < p(n-1,k-1)` maps to
//! partitions whose smallest part is 1 (that part is removed); larger ranks
//! map to partitions with every part at least 2 (one is subtracted from every
//! part). This branch order fixes the rank of every partition.
//!
//! The count table needs `(n-k+1)(k+1)` big integers, so for large `n` the
//! sampler switches to an exact rejection sampler: multiplicities of the
//! conjugate partition are drawn as independent geometric variables and the
//! multiplicity of the smallest part is completed deterministically, accepted
//! with probability proportional to its geometric mass. Both routes produce
//! every partition with probability exactly `1/p(n,k)`.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest `n` accepted by [`enumerate_partitions`].
pub const ENUMERATION_LIMIT: u32 = 40;

/// Largest `n` accepted by [`enumerate_compositions`].
pub const COMPOSITION_ENUMERATION_LIMIT: u32 = 24;

/// Largest count table (in entries) the sampler builds before switching to
/// rejection sampling.
pub const UNRANK_TABLE_LIMIT: usize = 1 << 20;

/// A partition of `n` into `k` positive parts, in nonincreasing order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Partition {
    parts: Vec<u32>,
}

impl Partition {
    pub fn new(parts: Vec<u32>) -> Result<Self> {
        if parts.contains(&0) {
            return Err(Error::Domain("partition parts must be positive".into()));
        }
        if parts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Domain("partition parts must be nonincreasing".into()));
        }
        Ok(Partition { parts })
    }

    pub fn parts(&self) -> &[u32] {
        &self.parts
    }

    pub fn into_parts(self) -> Vec<u32> {
        self.parts
    }

    pub fn n(&self) -> u64 {
        self.parts.iter().map(|&p| u64::from(p)).sum()
    }

    pub fn k(&self) -> usize {
        self.parts.len()
    }
}

fn check_nk(n: u32, k: u32) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::TooManyParts {
            n: u64::from(n),
            k: u64::from(k),
        });
    }
    Ok(())
}

/// Exact counts `p(n', k')` for every `k' <= k` and `n' - k' <= n - k`.
///
/// Internally stores `q(j, K)`, the number of partitions of `j` into parts
/// no larger than `K`, using `p(n', k') = q(n' - k', k')`.
#[derive(Debug, Clone)]
pub struct PartitionCountTable {
    max_excess: usize,
    max_parts: usize,
    table: Vec<BigUint>,
}

impl PartitionCountTable {
    /// Table large enough to unrank partitions of `n` into `k` parts.
    pub fn new(n: u32, k: u32) -> Result<Self> {
        check_nk(n, k)?;
        let max_excess = (n - k) as usize;
        let max_parts = k as usize;
        let width = max_parts + 1;
        let mut table = vec![BigUint::zero(); (max_excess + 1) * width];
        for j in 0..=max_excess {
            for parts in 0..=max_parts {
                let v = if parts == 0 {
                    if j == 0 {
                        BigUint::one()
                    } else {
                        BigUint::zero()
                    }
                } else {
                    let mut v = table[j * width + parts - 1].clone();
                    if j >= parts {
                        v += &table[(j - parts) * width + parts];
                    }
                    v
                };
                table[j * width + parts] = v;
            }
        }
        Ok(PartitionCountTable {
            max_excess,
            max_parts,
            table,
        })
    }

    /// Number of entries a table for `(n, k)` would hold.
    pub fn entries_needed(n: u32, k: u32) -> usize {
        (n.saturating_sub(k) as usize + 1) * (k as usize + 1)
    }

    fn q(&self, excess: usize, parts: usize) -> &BigUint {
        &self.table[excess * (self.max_parts + 1) + parts]
    }

    /// `p(n, k)`; zero when `k > n` or `k == 0 < n`.
    ///
    /// # Panics
    /// When `(n, k)` lies outside the range the table was built for.
    pub fn count(&self, n: u32, k: u32) -> BigUint {
        if k > n || (k == 0 && n > 0) {
            return BigUint::zero();
        }
        let (excess, parts) = ((n - k) as usize, k as usize);
        assert!(
            excess <= self.max_excess && parts <= self.max_parts,
            "p({n},{k}) outside table range"
        );
        self.q(excess, parts).clone()
    }

    fn ones_branch(&self, n: u32, k: u32) -> &BigUint {
        // p(n-1, k-1) = q(n-k, k-1)
        self.q((n - k) as usize, (k - 1) as usize)
    }

    /// The partition with the given rank, `0 <= rank < p(n, k)`.
    pub fn unrank(&self, n: u32, k: u32, rank: &BigUint) -> Result<Partition> {
        check_nk(n, k)?;
        if *rank >= self.count(n, k) {
            return Err(Error::Domain(format!("rank {rank} out of range for p({n},{k})")));
        }
        let mut rank = rank.clone();
        let (mut n, mut k) = (n, k);
        let mut level = 0u32;
        let mut ascending = Vec::with_capacity(k as usize);
        while k > 0 {
            let ones = self.ones_branch(n, k);
            if rank < *ones {
                ascending.push(level + 1);
                n -= 1;
                k -= 1;
            } else {
                rank -= ones;
                n -= k;
                level += 1;
            }
        }
        debug_assert_eq!(n, 0);
        ascending.reverse();
        Ok(Partition { parts: ascending })
    }
}

/// `p(n, k)`, the number of partitions of `n` into exactly `k` positive parts.
pub fn count_partitions(n: u32, k: u32) -> BigUint {
    if k == 0 || k > n {
        return BigUint::zero();
    }
    PartitionCountTable::new(n, k)
        .expect("1 <= k <= n")
        .count(n, k)
}

/// Uniform integer in `[0, bound)`.
pub fn uniform_below<R: Rng + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero(), "empty range");
    if let Some(b) = bound.to_u64() {
        return BigUint::from(rng.random_range(0..b));
    }
    let bits = bound.bits();
    let words = bits.div_ceil(32) as usize;
    let top_bits = bits - 32 * (words as u64 - 1);
    let top_mask = if top_bits == 32 { u32::MAX } else { (1u32 << top_bits) - 1 };
    loop {
        let mut digits: Vec<u32> = (0..words).map(|_| rng.random()).collect();
        digits[words - 1] &= top_mask;
        let candidate = BigUint::new(digits);
        if candidate < *bound {
            return candidate;
        }
    }
}

/// Exact rejection sampler for partitions too large for a count table.
#[derive(Debug, Clone)]
pub struct BoltzmannSampler {
    n: u32,
    k: u32,
    excess: u32,
    /// `-ln x` of the geometric tilt.
    tilt: f64,
}

impl BoltzmannSampler {
    pub fn new(n: u32, k: u32) -> Result<Self> {
        check_nk(n, k)?;
        let excess = n - k;
        let max_part = k.min(excess);
        let tilt = if excess == 0 {
            f64::INFINITY
        } else {
            solve_tilt(f64::from(excess), max_part)
        };
        Ok(BoltzmannSampler { n, k, excess, tilt })
    }

    /// Expected acceptance is not computed; each attempt costs `O(min(k, n-k))`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Partition {
        let (k, excess) = (self.k as usize, self.excess);
        if excess == 0 {
            return Partition { parts: vec![1; k] };
        }
        let max_part = self.k.min(excess);
        let mut mult = vec![0u32; max_part as usize + 1];
        'attempt: loop {
            let mut used = 0u64;
            for i in 2..=max_part {
                let z = geometric(rng, self.tilt * f64::from(i));
                if z > 0 {
                    used += u64::from(i) * z;
                    if used > u64::from(excess) {
                        continue 'attempt;
                    }
                }
                mult[i as usize] = z as u32;
            }
            let rest = u64::from(excess) - used;
            // accept with probability x^rest, the geometric mass of the completion
            let u: f64 = rng.random();
            if u.ln() > -self.tilt * rest as f64 {
                continue;
            }
            mult[1] = rest as u32;
            break;
        }
        // conjugate of the partition of n-k with multiplicities `mult`, padded to k parts, plus one
        let mut parts = vec![1u32; k];
        let mut at_least = 0u32;
        for i in (1..=max_part as usize).rev() {
            at_least += mult[i];
            parts[i - 1] += at_least;
        }
        debug_assert_eq!(parts.iter().map(|&p| u64::from(p)).sum::<u64>(), u64::from(self.n));
        Partition { parts }
    }
}

/// Number of failures before the first success, success probability
/// `1 - e^{-rate}`.
fn geometric<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    Geometric::new(-(-rate).exp_m1())
        .expect("success probability in (0, 1]")
        .sample(rng)
}

/// Find `s > 0` with `sum_{i=1}^{max_part} i / (e^{i s} - 1) = target`.
fn solve_tilt(target: f64, max_part: u32) -> f64 {
    let mean = |s: f64| -> f64 {
        (1..=max_part)
            .map(|i| {
                let i = f64::from(i);
                i / (i * s).exp_m1()
            })
            .sum()
    };
    let (mut lo, mut hi) = (-60f64, 10f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Uniform sampler for partitions of `n` into `k` parts, built once and
/// shared across draws.
#[derive(Debug, Clone)]
pub enum PartitionSampler {
    Unrank {
        n: u32,
        k: u32,
        total: BigUint,
        table: PartitionCountTable,
    },
    Boltzmann(BoltzmannSampler),
}

impl PartitionSampler {
    /// Unranking when the count table fits [`UNRANK_TABLE_LIMIT`], rejection otherwise.
    pub fn new(n: u32, k: u32) -> Result<Self> {
        check_nk(n, k)?;
        if PartitionCountTable::entries_needed(n, k) <= UNRANK_TABLE_LIMIT {
            Self::unranking(n, k)
        } else {
            Ok(PartitionSampler::Boltzmann(BoltzmannSampler::new(n, k)?))
        }
    }

    pub fn unranking(n: u32, k: u32) -> Result<Self> {
        let table = PartitionCountTable::new(n, k)?;
        let total = table.count(n, k);
        Ok(PartitionSampler::Unrank { n, k, total, table })
    }

    pub fn boltzmann(n: u32, k: u32) -> Result<Self> {
        Ok(PartitionSampler::Boltzmann(BoltzmannSampler::new(n, k)?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Partition {
        match self {
            PartitionSampler::Unrank { n, k, total, table } => {
                let rank = uniform_below(rng, total);
                table.unrank(*n, *k, &rank).expect("rank drawn below total")
            }
            PartitionSampler::Boltzmann(b) => b.sample(rng),
        }
    }
}

/// Draw one partition of `n` into `k` parts uniformly at random.
pub fn sample_partition_uniform<R: Rng + ?Sized>(n: u32, k: u32, rng: &mut R) -> Result<Partition> {
    Ok(PartitionSampler::new(n, k)?.sample(rng))
}

/// Draw one composition of `n` into `k` positive parts uniformly at random,
/// by choosing `k-1` distinct cut points among the `n-1` gaps.
pub fn sample_composition_uniform<R: Rng + ?Sized>(n: u32, k: u32, rng: &mut R) -> Result<Vec<u32>> {
    check_nk(n, k)?;
    let mut cuts: Vec<u32> = index::sample(rng, (n - 1) as usize, (k - 1) as usize)
        .into_iter()
        .map(|c| c as u32 + 1)
        .collect();
    cuts.sort_unstable();
    let mut parts = Vec::with_capacity(k as usize);
    let mut prev = 0;
    for c in cuts {
        parts.push(c - prev);
        prev = c;
    }
    parts.push(n - prev);
    Ok(parts)
}

/// All partitions of `n` into `k` parts, in decreasing lexicographic order.
pub fn enumerate_partitions(n: u32, k: u32) -> Result<Vec<Partition>> {
    if n > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            what: "partition enumeration",
            n: u64::from(n),
            limit: u64::from(ENUMERATION_LIMIT),
        });
    }
    check_nk(n, k)?;
    fn rec(n: u32, k: u32, max: u32, prefix: &mut Vec<u32>, out: &mut Vec<Partition>) {
        if k == 0 {
            if n == 0 {
                out.push(Partition { parts: prefix.clone() });
            }
            return;
        }
        if n < k {
            return;
        }
        let hi = max.min(n - (k - 1));
        let lo = n.div_ceil(k);
        for first in (lo..=hi).rev() {
            prefix.push(first);
            rec(n - first, k - 1, first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, n, &mut Vec::with_capacity(k as usize), &mut out);
    Ok(out)
}

/// All compositions of `n` into `k` positive parts, in decreasing
/// lexicographic order.
pub fn enumerate_compositions(n: u32, k: u32) -> Result<Vec<Vec<u32>>> {
    if n > COMPOSITION_ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            what: "composition enumeration",
            n: u64::from(n),
            limit: u64::from(COMPOSITION_ENUMERATION_LIMIT),
        });
    }
    check_nk(n, k)?;
    fn rec(n: u32, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if k == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (1..=n - (k - 1)).rev() {
            prefix.push(first);
            rec(n - first, k - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::with_capacity(k as usize), &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, HashSet};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Partition counts of `n` via Euler's pentagonal-number recurrence.
    fn total_partitions(n: usize) -> Vec<BigUint> {
        let mut p = vec![BigUint::zero(); n + 1];
        p[0] = BigUint::one();
        for m in 1..=n {
            let (mut plus, mut minus) = (BigUint::zero(), BigUint::zero());
            for j in 1.. {
                let g1 = j * (3 * j - 1) / 2;
                if g1 > m {
                    break;
                }
                let sign_plus = j % 2 == 1;
                for g in [g1, j * (3 * j + 1) / 2] {
                    if g <= m {
                        if sign_plus {
                            plus += &p[m - g];
                        } else {
                            minus += &p[m - g];
                        }
                    }
                }
            }
            p[m] = plus - minus;
        }
        p
    }

    #[test]
    fn count_examples() {
        for n in 1..20 {
            assert_eq!(count_partitions(n, 1), BigUint::one());
            assert_eq!(count_partitions(n, n), BigUint::one());
        }
        assert_eq!(count_partitions(6, 3), BigUint::from(3u32));
        assert_eq!(count_partitions(5, 2), BigUint::from(2u32));
        assert_eq!(count_partitions(3, 4), BigUint::zero());
    }

    #[test]
    fn counts_sum_to_total_partitions() {
        let totals = total_partitions(30);
        for n in 1..=30u32 {
            let sum: BigUint = (1..=n).map(|k| count_partitions(n, k)).sum();
            assert_eq!(sum, totals[n as usize], "n = {n}");
        }
    }

    #[test]
    fn counts_match_enumeration() {
        for n in 1..=20 {
            for k in 1..=n {
                let listed = enumerate_partitions(n, k).unwrap();
                assert_eq!(BigUint::from(listed.len()), count_partitions(n, k));
            }
        }
    }

    #[test]
    fn big_counts_exceed_u64() {
        let c = count_partitions(600, 30);
        assert!(c.bits() > 64);
    }

    #[test]
    fn enumeration_examples() {
        let ps = |n, k| -> Vec<Vec<u32>> {
            enumerate_partitions(n, k).unwrap().into_iter().map(Partition::into_parts).collect()
        };
        assert_eq!(ps(6, 3), vec![vec![4, 1, 1], vec![3, 2, 1], vec![2, 2, 2]]);
        assert_eq!(ps(2, 2), vec![vec![1, 1]]);
        assert_eq!(ps(5, 2), vec![vec![4, 1], vec![3, 2]]);
        assert!(enumerate_partitions(41, 3).is_err());
        assert!(enumerate_partitions(3, 4).is_err());
    }

    #[test]
    fn composition_enumeration() {
        assert_eq!(enumerate_compositions(3, 2).unwrap(), vec![vec![2, 1], vec![1, 2]]);
        assert_eq!(enumerate_compositions(6, 3).unwrap().len(), 10);
    }

    #[test]
    fn unranking_is_a_bijection() {
        for n in 1..=25u32 {
            for k in 1..=n {
                let table = PartitionCountTable::new(n, k).unwrap();
                let total = table.count(n, k).to_u64().unwrap();
                let mut seen = HashSet::new();
                for r in 0..total {
                    let p = table.unrank(n, k, &BigUint::from(r)).unwrap();
                    assert_eq!(p.k(), k as usize);
                    assert_eq!(p.n(), u64::from(n));
                    assert!(Partition::new(p.parts().to_vec()).is_ok());
                    seen.insert(p);
                }
                assert_eq!(seen.len() as u64, total, "n={n} k={k}");
                assert!(table.unrank(n, k, &BigUint::from(total)).is_err());
            }
        }
    }

    #[test]
    fn degenerate_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_partition_uniform(7, 7, &mut rng).unwrap().parts(), &[1; 7]);
            assert_eq!(sample_partition_uniform(7, 1, &mut rng).unwrap().parts(), &[7]);
            assert_eq!(sample_composition_uniform(5, 5, &mut rng).unwrap(), vec![1; 5]);
            assert_eq!(PartitionSampler::boltzmann(7, 1).unwrap().sample(&mut rng).parts(), &[7]);
            assert_eq!(PartitionSampler::boltzmann(7, 7).unwrap().sample(&mut rng).parts(), &[1; 7]);
        }
        assert!(sample_partition_uniform(3, 4, &mut rng).is_err());
        assert!(sample_composition_uniform(3, 0, &mut rng).is_err());
    }

    fn frequencies<T: std::hash::Hash + Eq>(draws: impl Iterator<Item = T>) -> HashMap<T, u64> {
        let mut m = HashMap::new();
        for d in draws {
            *m.entry(d).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn partition_six_three_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 30_000u64;
        let f = frequencies((0..draws).map(|_| sample_partition_uniform(6, 3, &mut rng).unwrap()));
        assert_eq!(f.len(), 3);
        let (p, sd) = (1.0 / 3.0, (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
        for c in f.values() {
            assert!((*c as f64 - p * draws as f64).abs() < 3.0 * sd, "{f:?}");
        }
    }

    #[test]
    fn compositions_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, k, cells) in [(3u32, 2u32, 2usize), (4, 2, 3)] {
            let draws = 10_000u64;
            let f = frequencies((0..draws).map(|_| sample_composition_uniform(n, k, &mut rng).unwrap()));
            assert_eq!(f.len(), cells);
            let p = 1.0 / cells as f64;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            for c in f.values() {
                assert!((*c as f64 - p * draws as f64).abs() < 3.0 * sd, "{f:?}");
            }
        }
    }

    #[test]
    fn boltzmann_covers_support_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, k) in [(12u32, 5u32), (20, 6), (15, 2)] {
            let sampler = PartitionSampler::boltzmann(n, k).unwrap();
            let support = enumerate_partitions(n, k).unwrap();
            let draws = 40_000u64;
            let f = frequencies((0..draws).map(|_| sampler.sample(&mut rng)));
            assert_eq!(f.len(), support.len(), "n={n} k={k}");
            let p = 1.0 / support.len() as f64;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            for part in &support {
                let c = *f.get(part).unwrap_or(&0) as f64;
                assert!((c - p * draws as f64).abs() < 4.5 * sd, "n={n} k={k} {part:?} {c}");
            }
        }
    }

    #[test]
    fn large_instances_use_rejection() {
        let s = PartitionSampler::new(100_000, 20_000).unwrap();
        assert!(matches!(s, PartitionSampler::Boltzmann(_)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = s.sample(&mut rng);
        assert_eq!(p.k(), 20_000);
        assert_eq!(p.n(), 100_000);
        assert!(Partition::new(p.into_parts()).is_ok());
    }

    #[test]
    fn uniform_below_handles_wide_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bound = BigUint::one() << 100usize;
        let bound = bound + 12345u32;
        for _ in 0..100 {
            assert!(uniform_below(&mut rng, &bound) < bound);
        }
    }
}

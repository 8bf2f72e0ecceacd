use std::collections::BTreeMap;

use approx::assert_relative_eq;
use pooldev_core::optimize::solve_contraction;
use pooldev_core::rates::{corollary_rate, sigma_of_t, t_of_sigma};
use pooldev_core::simulate::{run_batch, Simulator};
use pooldev_core::verify::{enumerate_joint_law, ln_binomial_pmf, sandwich_sweep};
use pooldev_core::{ContractionProblem, PoolingMode, RateParams, SimConfig, SolveStatus};

#[test]
fn enumerated_prevalence_is_binomial() {
    for mode in PoolingMode::ALL {
        let law = enumerate_joint_law(7, 3, 0.4, mode).unwrap();
        assert_relative_eq!(law.total(), 1.0, epsilon = 1e-12);
        assert_eq!(law.bound_violations, 0);
        for j in 0..=7 {
            let exact = ln_binomial_pmf(7, u64::from(j), law.mu).exp();
            assert_relative_eq!(law.prevalence_probability(j), exact, epsilon = 1e-12);
        }
    }
}

#[test]
fn enumerated_conditionals_sum_to_one() {
    for mode in PoolingMode::ALL {
        let rows = sandwich_sweep(6, 2, mode).unwrap();
        let mut by_positives: BTreeMap<u32, f64> = BTreeMap::new();
        for r in &rows {
            assert!(r.exact > 0.0 && r.exact <= 1.0);
            *by_positives.entry(r.positives).or_default() += r.exact;
        }
        assert_eq!(by_positives.len(), 7);
        for total in by_positives.values() {
            assert_relative_eq!(*total, 1.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn simulated_trials_are_consistent() {
    for mode in PoolingMode::ALL {
        let cfg = SimConfig::new(300, 40, 0.3, mode, 99).unwrap();
        let sim = Simulator::new(cfg).unwrap();
        for i in 0..200 {
            let rec = sim.indexed_trial(i);
            rec.check_invariants().unwrap();
            assert_eq!(rec.pool_sizes.iter().sum::<u32>(), 300);
            assert_eq!(rec.pool_sizes.len(), 40);
            assert_eq!(rec, sim.indexed_trial(i));
        }
    }
}

#[test]
fn batch_mean_tracks_prevalence() {
    let cfg = SimConfig::with_prevalence(2000, 400, 0.1, PoolingMode::Composition, 3).unwrap();
    let batch = run_batch(&cfg, 400, Some(2)).unwrap();
    let (mean, var) = batch.stats.prevalence_mean_var(cfg.n);
    let se = (var / 400.0).sqrt();
    assert!((mean - 0.1).abs() < 4.0 * se + 1e-12, "mean {mean}, se {se}");
    assert_eq!(batch.stats.bound_violations, 0);
    for s in &batch.summaries {
        assert_relative_eq!(t_of_sigma(s.sigma, cfg.beta_n()).unwrap(), s.t_hat, epsilon = 1e-15);
    }
}

#[test]
fn joint_rate_at_typical_point_is_small() {
    let p = RateParams::from_prevalence(0.5, 0.2).unwrap();
    let sigma = sigma_of_t(0.4, 0.5).unwrap();
    let prob = ContractionProblem::new(0.4, sigma, p, 40, 1e-10).unwrap();
    let sol = solve_contraction(&prob).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    let joint = sol.joint_rate.finite().unwrap();
    let corollary = corollary_rate(0.4, &p).unwrap().finite().unwrap();
    assert!(joint >= corollary - 1e-9, "joint {joint}, corollary {corollary}");
    assert!(joint - corollary < 0.05);
}

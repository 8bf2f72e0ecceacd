//! Closed-form rate functions, the prevalence estimator and its inverse, and
//! numeric Legendre transforms of the two scaled cumulant generating
//! functions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::measures::{
    moment_map, phi_log_density_unchecked, rel_entropy_gen, rel_entropy_pool_log, BinaryMeasure,
    PoolHistogram, PoolLaw,
};

/// Default L1 tolerance on the moment constraint for real-valued pool laws.
pub const DEFAULT_CONSTRAINT_TOL: f64 = 1e-9;

/// Limit parameters: pools per individual `beta` and the scaled positive
/// rate `q1`. The negative rate `q0 = 1/beta - q1` is derived so that
/// `beta (q0 + q1) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateParams {
    beta: f64,
    q1: f64,
}

impl RateParams {
    pub fn new(beta: f64, q1: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Domain(format!("beta = {beta} outside (0, 1]")));
        }
        if !(q1 >= 0.0 && q1.is_finite()) {
            return Err(Error::Domain(format!("q1 = {q1} must be finite and nonnegative")));
        }
        if beta * q1 > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "prevalence beta*q1 = {} exceeds 1",
                beta * q1
            )));
        }
        Ok(RateParams { beta, q1 })
    }

    /// Parameters with typical prevalence `pstar = beta * q1`.
    pub fn from_prevalence(beta: f64, pstar: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pstar) {
            return Err(Error::Domain(format!("prevalence {pstar} outside [0, 1]")));
        }
        Self::new(beta, pstar / beta)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn q1(&self) -> f64 {
        self.q1
    }

    pub fn q0(&self) -> f64 {
        (1.0 / self.beta - self.q1).max(0.0)
    }

    /// Typical prevalence `beta * q1`, clamped to `[0, 1]`.
    pub fn pstar(&self) -> f64 {
        (self.beta * self.q1).min(1.0)
    }

    /// The limit measure `q` with total mass `1/beta`.
    pub fn q(&self) -> BinaryMeasure {
        BinaryMeasure::new(self.q0(), self.q1).expect("q has nonnegative weights")
    }
}

fn require_probability(omega: &BinaryMeasure) -> Result<()> {
    if !omega.is_probability() {
        return Err(Error::InvalidMeasure(format!(
            "omega must be a probability measure, total is {}",
            omega.total()
        )));
    }
    Ok(())
}

fn require_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Rate of the infection measure alone: `beta * H(omega/beta || q)`.
pub fn rate_marginal(omega: &BinaryMeasure, p: &RateParams) -> Result<ExtReal> {
    require_probability(omega)?;
    let scaled = omega.scaled(1.0 / p.beta);
    Ok(rel_entropy_gen(&scaled, &p.q()) * p.beta)
}

/// `H(pi || Phi)` for the reference law with parameters `beta` and `omega`.
pub fn pool_entropy(pi: &PoolLaw, beta: f64, omega: &BinaryMeasure) -> Result<ExtReal> {
    require_probability(omega)?;
    rel_entropy_pool_log(pi, |pt| phi_log_density_unchecked(beta, omega, pt))
}

/// Conditional rate of the pool measure given the infection measure:
/// `H(pi || Phi)` when `<pi> = omega/beta` within `tol` in L1, else `+inf`.
pub fn rate_conditional(pi: &PoolLaw, omega: &BinaryMeasure, p: &RateParams, tol: f64) -> Result<ExtReal> {
    require_probability(omega)?;
    let target = omega.scaled(1.0 / p.beta);
    if moment_map(pi).l1_distance(&target) > tol {
        return Ok(ExtReal::Infinite);
    }
    pool_entropy(pi, p.beta, omega)
}

/// Conditional rate for an empirical pooling of `n` individuals with
/// `positives` positives. The moment constraint is checked exactly in
/// integers and `beta` is the finite-n ratio `k/n`.
pub fn rate_conditional_exact(hist: &PoolHistogram, positives: u64, n: u64) -> Result<ExtReal> {
    if positives > n || n == 0 {
        return Err(Error::Domain(format!("{positives} positives among {n} individuals")));
    }
    let (neg, pos) = hist.moment_counts();
    if neg + pos != n || pos != positives {
        return Ok(ExtReal::Infinite);
    }
    let beta = hist.pools() as f64 / n as f64;
    let omega = BinaryMeasure::bernoulli(positives as f64 / n as f64)?;
    pool_entropy(&hist.to_law(), beta, &omega)
}

/// Joint rate `beta * [H(omega/beta || q) + H(pi || Phi)]` under the moment
/// constraint, `+inf` otherwise.
pub fn rate_joint(omega: &BinaryMeasure, pi: &PoolLaw, p: &RateParams, tol: f64) -> Result<ExtReal> {
    let cond = rate_conditional(pi, omega, p, tol)?;
    Ok(rate_marginal(omega, p)? + cond * p.beta)
}

/// `1 - e^{-1/beta}`.
fn positive_pool_scale(beta: f64) -> f64 {
    -(-1.0 / beta).exp_m1()
}

/// Prevalence estimate from the fraction of positive pools:
/// `t = -beta ln(1 - (1 - e^{-1/beta}) sigma)`.
pub fn t_of_sigma(sigma: f64, beta: f64) -> Result<f64> {
    require_unit("sigma", sigma)?;
    check_beta(beta)?;
    if sigma == 1.0 {
        return Ok(1.0);
    }
    let t = -beta * (-positive_pool_scale(beta) * sigma).ln_1p();
    Ok(t.clamp(0.0, 1.0))
}

/// Fraction of positive pools implied by prevalence `t`:
/// `(1 - e^{-t/beta}) / (1 - e^{-1/beta})`.
pub fn sigma_of_t(t: f64, beta: f64) -> Result<f64> {
    require_unit("t", t)?;
    check_beta(beta)?;
    let s = -(-t / beta).exp_m1() / positive_pool_scale(beta);
    Ok(s.clamp(0.0, 1.0))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain(format!("beta = {beta} outside (0, 1]")));
    }
    Ok(())
}

fn xlogy_ratio(x: f64, y: f64) -> ExtReal {
    if x == 0.0 {
        ExtReal::ZERO
    } else if y == 0.0 {
        ExtReal::Infinite
    } else {
        ExtReal::Finite(x * (x / y).ln())
    }
}

/// Binary divergence between `(1-t, t)` and `(1-pstar, pstar)`.
pub fn corollary_rate(t: f64, p: &RateParams) -> Result<ExtReal> {
    require_unit("t", t)?;
    let ps = p.pstar();
    Ok(xlogy_ratio(1.0 - t, 1.0 - ps) + xlogy_ratio(t, ps))
}

/// Which scaled cumulant generating function to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CgfVariant {
    /// `sum_x beta q(x) (e^{g(x)} - 1)`.
    Poisson,
    /// `ln((1 - pstar) e^{g(0)} + pstar e^{g(1)})`, the Bernoulli log-MGF.
    Exact,
}

impl CgfVariant {
    pub const ALL: [CgfVariant; 2] = [CgfVariant::Poisson, CgfVariant::Exact];

    fn weights(self, p: &RateParams) -> [f64; 2] {
        match self {
            CgfVariant::Poisson => {
                let q = p.q().scaled(p.beta);
                [q.w0(), q.w1()]
            }
            CgfVariant::Exact => [1.0 - p.pstar(), p.pstar()],
        }
    }

    /// Value, gradient and Hessian at `g`; coordinates at `-inf` contribute
    /// their limits.
    fn eval(self, w: [f64; 2], g: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        match self {
            CgfVariant::Poisson => {
                let e = [w[0] * g[0].exp(), w[1] * g[1].exp()];
                let value = w[0] * g[0].exp_m1() + w[1] * g[1].exp_m1();
                (value, e, [[e[0], 0.0], [0.0, e[1]]])
            }
            CgfVariant::Exact => {
                let lw = [g[0] + w[0].ln(), g[1] + w[1].ln()];
                let top = lw[0].max(lw[1]);
                let z = [(lw[0] - top).exp(), (lw[1] - top).exp()];
                let sum = z[0] + z[1];
                let s = [z[0] / sum, z[1] / sum];
                let value = top + sum.ln();
                let h = [
                    [s[0] - s[0] * s[0], -s[0] * s[1]],
                    [-s[0] * s[1], s[1] - s[1] * s[1]],
                ];
                (value, s, h)
            }
        }
    }
}

/// Scaled cumulant generating function of the infection measure at `g`.
pub fn scaled_cgf(g: [f64; 2], p: &RateParams, variant: CgfVariant) -> f64 {
    variant.eval(variant.weights(p), g).0
}

/// Result of a numeric convex conjugate evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConjugateSolution {
    pub value: ExtReal,
    /// Maximizing `g`; coordinates where `omega` vanishes sit at `-inf`.
    pub argmax: [f64; 2],
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Numeric Legendre transform `sup_g { <g, omega> - cgf(g) }` by damped
/// Newton ascent on the concave supremand.
pub fn legendre(omega: &BinaryMeasure, p: &RateParams, variant: CgfVariant) -> Result<ConjugateSolution> {
    require_probability(omega)?;
    let w = variant.weights(p);
    let om = [omega.w0(), omega.w1()];
    let support = [om[0] > 0.0, om[1] > 0.0];
    if (0..2).any(|x| support[x] && w[x] == 0.0) {
        return Ok(ConjugateSolution {
            value: ExtReal::Infinite,
            argmax: [f64::NAN; 2],
            gradient_norm: f64::NAN,
            iterations: 0,
        });
    }

    let objective = |g: [f64; 2]| -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let (lam, grad, hess) = variant.eval(w, g);
        let mut lin = 0.0;
        let mut dg = [0.0; 2];
        for x in 0..2 {
            if support[x] {
                lin += g[x] * om[x];
                dg[x] = om[x] - grad[x];
            }
        }
        (lin - lam, dg, hess)
    };

    let mut g = [
        if support[0] { 0.0 } else { f64::NEG_INFINITY },
        if support[1] { 0.0 } else { f64::NEG_INFINITY },
    ];
    let (mut f, mut grad, mut hess) = objective(g);
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it;
        let gnorm = grad[0].abs().max(grad[1].abs());
        if gnorm < 1e-15 {
            break;
        }
        let step = newton_direction(&hess, &grad, support);
        let slope = step[0] * grad[0] + step[1] * grad[1];
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-30 {
            let cand = [
                if support[0] { g[0] + t * step[0] } else { g[0] },
                if support[1] { g[1] + t * step[1] } else { g[1] },
            ];
            let (fc, gc, hc) = objective(cand);
            if fc.is_finite() && fc >= f + 1e-4 * t * slope {
                g = cand;
                f = fc;
                grad = gc;
                hess = hc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(ConjugateSolution {
        value: ExtReal::Finite(f),
        argmax: g,
        gradient_norm: grad[0].abs().max(grad[1].abs()),
        iterations,
    })
}

/// Solve `(H + eps I) d = grad` on the support coordinates.
fn newton_direction(h: &[[f64; 2]; 2], grad: &[f64; 2], support: [bool; 2]) -> [f64; 2] {
    match support {
        [true, true] => {
            let eps = 1e-14 * (1.0 + h[0][0] + h[1][1]);
            let (a, b, c, d) = (h[0][0] + eps, h[0][1], h[1][0], h[1][1] + eps);
            let det = a * d - b * c;
            [(d * grad[0] - b * grad[1]) / det, (a * grad[1] - c * grad[0]) / det]
        }
        [true, false] => [grad[0] / h[0][0].max(1e-300), 0.0],
        [false, true] => [0.0, grad[1] / h[1][1].max(1e-300)],
        [false, false] => [0.0, 0.0],
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::measures::PoolType;

    fn params() -> RateParams {
        RateParams::new(0.2, 0.25).unwrap()
    }

    fn om(t: f64) -> BinaryMeasure {
        BinaryMeasure::bernoulli(t).unwrap()
    }

    /// Binary divergence evaluated directly, independent of the crate's helpers.
    fn kl(t: f64, p: f64) -> f64 {
        let a = if t > 0.0 { t * (t / p).ln() } else { 0.0 };
        let b = if t < 1.0 { (1.0 - t) * ((1.0 - t) / (1.0 - p)).ln() } else { 0.0 };
        a + b
    }

    #[test]
    fn params_validation() {
        assert!(RateParams::new(0.0, 0.1).is_err());
        assert!(RateParams::new(1.5, 0.1).is_err());
        assert!(RateParams::new(0.5, 2.5).is_err());
        assert!(RateParams::new(0.5, -0.1).is_err());
        let p = params();
        assert_abs_diff_eq!(p.pstar(), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(p.beta() * (p.q0() + p.q1()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn marginal_rate_examples() {
        let p = params();
        assert_abs_diff_eq!(rate_marginal(&om(0.05), &p).unwrap().to_f64(), 0.0, epsilon = 1e-15);
        let expected = 0.1 * 2f64.ln() + 0.9 * (0.9f64 / 0.95).ln();
        assert_abs_diff_eq!(rate_marginal(&om(0.1), &p).unwrap().to_f64(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.020654, epsilon = 1e-6);
        assert_abs_diff_eq!(rate_marginal(&om(1.0), &p).unwrap().to_f64(), 20f64.ln(), epsilon = 1e-12);
        assert!(rate_marginal(&BinaryMeasure::new(0.5, 0.6).unwrap(), &p).is_err());
    }

    #[test]
    fn corollary_rate_examples() {
        let p = params();
        assert_eq!(corollary_rate(0.05, &p).unwrap().to_f64().abs(), 0.0);
        assert_abs_diff_eq!(corollary_rate(0.1, &p).unwrap().to_f64(), 0.020654218912746394, epsilon = 1e-14);
        assert_abs_diff_eq!(corollary_rate(0.0, &p).unwrap().to_f64(), (1.0f64 / 0.95).ln(), epsilon = 1e-14);
        let zero = RateParams::new(0.5, 0.0).unwrap();
        assert_eq!(corollary_rate(0.1, &zero).unwrap(), ExtReal::Infinite);
        assert_eq!(corollary_rate(0.0, &zero).unwrap(), ExtReal::ZERO);
        let one = RateParams::new(0.5, 2.0).unwrap();
        assert_eq!(corollary_rate(0.9, &one).unwrap(), ExtReal::Infinite);
        assert!(corollary_rate(1.1, &p).is_err());
    }

    #[test]
    fn marginal_matches_corollary_on_grid() {
        for (beta, q1) in [(0.2, 0.25), (0.5, 0.4), (1.0, 0.7), (0.1, 0.5)] {
            let p = RateParams::new(beta, q1).unwrap();
            for i in 0..=2000 {
                let t = f64::from(i) / 2000.0;
                let a = rate_marginal(&om(t), &p).unwrap().to_f64();
                let b = corollary_rate(t, &p).unwrap().to_f64();
                assert!((a - b).abs() < 1e-12, "t={t} {a} {b}");
                assert!((b - kl(t, p.pstar())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(t_of_sigma(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(t_of_sigma(1.0, 0.3).unwrap(), 1.0);
        // -0.2 ln(1 - (1 - e^{-5})/2) = 0.13728636641416544
        assert_abs_diff_eq!(t_of_sigma(0.5, 0.2).unwrap(), 0.13728636641416544, epsilon = 1e-14);
        assert_abs_diff_eq!(t_of_sigma(0.5, 0.2).unwrap(), 0.137285, epsilon = 5e-6);
        // (1 - e^{-0.4}) / (1 - e^{-2}) = 0.3812806832206807
        assert_abs_diff_eq!(sigma_of_t(0.2, 0.5).unwrap(), 0.3812806832206807, epsilon = 1e-14);
        assert_eq!(sigma_of_t(1.0, 0.5).unwrap(), 1.0);
        assert_eq!(sigma_of_t(0.0, 0.5).unwrap(), 0.0);
        assert!(t_of_sigma(-0.1, 0.5).is_err());
        assert!(sigma_of_t(0.5, 0.0).is_err());
    }

    #[test]
    fn estimator_round_trip_and_monotone() {
        for beta in [0.2, 0.5, 1.0] {
            let mut prev = -1.0;
            for i in 0..1000 {
                let t = f64::from(i) / 999.0;
                let s = sigma_of_t(t, beta).unwrap();
                assert!(s > prev || (i == 0 && s == 0.0));
                prev = s;
                assert!((t_of_sigma(s, beta).unwrap() - t).abs() < 1e-12, "beta={beta} t={t}");
            }
        }
    }

    #[test]
    fn estimator_composition_has_unit_derivative() {
        let h = 1e-6;
        for beta in [0.2, 0.5, 1.0] {
            for i in 1..100 {
                let t = f64::from(i) / 100.0;
                let f = |t: f64| t_of_sigma(sigma_of_t(t, beta).unwrap(), beta).unwrap();
                let d = (f(t + h) - f(t - h)) / (2.0 * h);
                assert!((d - 1.0).abs() < 1e-6, "beta={beta} t={t} d={d}");
            }
        }
    }

    #[test]
    fn sigma_links_negative_pool_mass() {
        for beta in [0.1, 0.2, 0.5, 1.0] {
            for i in 0..1000 {
                let t = f64::from(i) / 999.0;
                let neg = crate::measures::pool_negative_mass(beta, &om(t)).unwrap();
                assert!((sigma_of_t(t, beta).unwrap() - (1.0 - neg)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cgf_examples() {
        let p = params();
        for v in CgfVariant::ALL {
            assert_abs_diff_eq!(scaled_cgf([0.0, 0.0], &p, v), 0.0, epsilon = 1e-15);
        }
        let g = [0.0, 2f64.ln()];
        assert_abs_diff_eq!(scaled_cgf(g, &p, CgfVariant::Poisson), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(scaled_cgf(g, &p, CgfVariant::Exact), 1.05f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn legendre_examples() {
        let p = params();
        for v in CgfVariant::ALL {
            let sol = legendre(&om(0.1), &p, v).unwrap();
            assert_abs_diff_eq!(sol.value.to_f64(), 0.020654218912746394, epsilon = 1e-12);
            assert_abs_diff_eq!(legendre(&om(0.05), &p, v).unwrap().value.to_f64(), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(legendre(&om(1.0), &p, v).unwrap().value.to_f64(), 20f64.ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(
                legendre(&om(0.0), &p, v).unwrap().value.to_f64(),
                (1.0f64 / 0.95).ln(),
                epsilon = 1e-12
            );
        }
        let zero = RateParams::new(0.5, 0.0).unwrap();
        assert_eq!(legendre(&om(0.2), &zero, CgfVariant::Exact).unwrap().value, ExtReal::Infinite);
    }

    #[test]
    fn conditional_and_joint_rates() {
        let p = RateParams::new(0.5, 0.4).unwrap();
        let omega = om(0.2);
        // <pi> = (1.6, 0.4) = omega / beta
        let pi = PoolLaw::probability([
            (PoolType::new(2, 0).unwrap(), 0.6),
            (PoolType::new(2, 1).unwrap(), 0.4),
        ])
        .unwrap();
        let cond = rate_conditional(&pi, &omega, &p, 1e-9).unwrap();
        assert!(cond.is_finite() && cond.to_f64() >= 0.0);
        let joint = rate_joint(&omega, &pi, &p, 1e-9).unwrap();
        let marginal = rate_marginal(&omega, &p).unwrap();
        assert!(joint >= marginal);
        assert_abs_diff_eq!(joint.to_f64(), marginal.to_f64() + 0.5 * cond.to_f64(), epsilon = 1e-15);

        let off = PoolLaw::point_mass(PoolType::new(3, 0).unwrap());
        assert_eq!(rate_conditional(&off, &omega, &p, 1e-9).unwrap(), ExtReal::Infinite);
        assert_eq!(rate_joint(&omega, &off, &p, 1e-9).unwrap(), ExtReal::Infinite);
    }

    #[test]
    fn renormalized_phi_violates_constraint() {
        let p = RateParams::new(0.5, 0.4).unwrap();
        let omega = om(0.2);
        let pi = crate::measures::PhiTruncation::new(0.5, &omega, 60).unwrap().renormalized();
        assert_eq!(rate_conditional(&pi, &omega, &p, 1e-6).unwrap(), ExtReal::Infinite);
    }

    #[test]
    fn exact_conditional_rate() {
        let mut h = PoolHistogram::new();
        h.add(PoolType::new(2, 1).unwrap());
        h.add(PoolType::new(1, 0).unwrap());
        let r = rate_conditional_exact(&h, 1, 3).unwrap();
        assert!(r.is_finite() && r.to_f64() >= 0.0);
        assert_eq!(rate_conditional_exact(&h, 2, 3).unwrap(), ExtReal::Infinite);
    }

    proptest! {
        #[test]
        fn legendre_variants_agree(t in 0.0f64..=1.0, pstar in 0.01f64..0.99, beta in 0.05f64..=1.0) {
            let p = RateParams::from_prevalence(beta, pstar).unwrap();
            let a = legendre(&om(t), &p, CgfVariant::Poisson).unwrap().value.to_f64();
            let b = legendre(&om(t), &p, CgfVariant::Exact).unwrap().value.to_f64();
            let k = kl(t, pstar);
            prop_assert!((a - k).abs() < 1e-9, "poisson {} vs {}", a, k);
            prop_assert!((b - k).abs() < 1e-9, "exact {} vs {}", b, k);
        }

        #[test]
        fn corollary_rate_midpoint_convex(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let p = params();
            let f = |t: f64| corollary_rate(t, &p).unwrap().to_f64();
            prop_assert!(f(0.5 * (a + b)) <= 0.5 * (f(a) + f(b)) + 1e-12);
        }

        #[test]
        fn cgf_convex_along_segments(
            x0 in -3.0f64..3.0, y0 in -3.0f64..3.0, x1 in -3.0f64..3.0, y1 in -3.0f64..3.0, s in 0.0f64..=1.0
        ) {
            let p = params();
            for v in CgfVariant::ALL {
                let f = |g: [f64; 2]| scaled_cgf(g, &p, v);
                let mid = [s * x0 + (1.0 - s) * x1, s * y0 + (1.0 - s) * y1];
                prop_assert!(f(mid) <= s * f([x0, y0]) + (1.0 - s) * f([x1, y1]) + 1e-12);
            }
        }
    }
}

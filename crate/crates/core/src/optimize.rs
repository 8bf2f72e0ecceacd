//! Entropy minimization of a pool law against the reference law under
//! linear moment constraints, solved through its concave dual.
//!
//! The minimizer has the tilted form `pi(x) ∝ Phi(x) exp(lambda · f(x))`.
//! The dual is maximized by Newton ascent with a pseudo-inverse step
//! (flat directions fall back to the gradient) and backtracking.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::measures::{phi_log_density, BinaryMeasure, PhiTruncation, PoolLaw, PoolType};
use crate::rates::{corollary_rate, rate_marginal, sigma_of_t, RateParams};

/// Default support truncation for the contraction problem.
pub const DEFAULT_M_MAX: u32 = 40;
/// Default dual convergence tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Iteration controls for the dual ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Beyond this dual norm a stalled residual is declared infeasible.
    pub lambda_bound: f64,
    /// Iterations over which the residual must halve once past the bound.
    pub stall_window: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 500,
            lambda_bound: 1e3,
            stall_window: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// The dual diverges without the residual improving: no law on the
    /// truncated support meets the constraints.
    Infeasible,
    /// Iteration cap hit or no ascent step found; the best residual is reported.
    NotConverged,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NotConverged => "not_converged",
        }
    }
}

/// Minimize `H(pi | ref)` over probability laws on `atoms` with
/// `sum pi f = targets`.
#[derive(Debug, Clone)]
pub struct EntropyProjection {
    atoms: Vec<PoolType>,
    ln_ref: Vec<f64>,
    features: Vec<DVector<f64>>,
    targets: DVector<f64>,
}

/// Output of [`EntropyProjection::solve`].
#[derive(Debug, Clone)]
pub struct Projection {
    pub status: SolveStatus,
    pub lambda: DVector<f64>,
    /// `H(pi | ref)` at the returned tilt.
    pub value: f64,
    /// Euclidean norm of the constraint residual.
    pub residual: f64,
    pub iterations: usize,
    pub pi: Vec<(PoolType, f64)>,
}

struct DualState {
    dual: f64,
    ln_z: f64,
    probs: Vec<f64>,
    grad: DVector<f64>,
    cov: DMatrix<f64>,
}

impl EntropyProjection {
    /// Atoms with `-inf` log reference density are dropped.
    pub fn new<F>(atoms: &[(PoolType, f64)], feature: F, targets: Vec<f64>) -> Result<Self>
    where
        F: Fn(PoolType) -> Vec<f64>,
    {
        let d = targets.len();
        if d == 0 || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("targets must be finite and nonempty".into()));
        }
        let mut kept = Vec::new();
        let mut ln_ref = Vec::new();
        let mut features = Vec::new();
        for &(pt, l) in atoms {
            if l == f64::NEG_INFINITY {
                continue;
            }
            if !l.is_finite() {
                return Err(Error::InvalidMeasure(format!("log density {l} at {pt:?}")));
            }
            let f = feature(pt);
            if f.len() != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    actual: f.len(),
                });
            }
            kept.push(pt);
            ln_ref.push(l);
            features.push(DVector::from_vec(f));
        }
        if kept.is_empty() {
            return Err(Error::InvalidMeasure("reference law has no support".into()));
        }
        Ok(EntropyProjection {
            atoms: kept,
            ln_ref,
            features,
            targets: DVector::from_vec(targets),
        })
    }

    pub fn atoms(&self) -> &[PoolType] {
        &self.atoms
    }

    fn state(&self, lambda: &DVector<f64>) -> DualState {
        let ln_w: Vec<f64> = self
            .ln_ref
            .iter()
            .zip(&self.features)
            .map(|(l, f)| l + f.dot(lambda))
            .collect();
        let top = ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ln_z = top + ln_w.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = ln_w.iter().map(|v| (v - ln_z).exp()).collect();
        let d = self.targets.len();
        let mut mean = DVector::zeros(d);
        for (p, f) in probs.iter().zip(&self.features) {
            mean.axpy(*p, f, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (p, f) in probs.iter().zip(&self.features) {
            let dev = f - &mean;
            cov.ger(*p, &dev, &dev, 1.0);
        }
        DualState {
            dual: lambda.dot(&self.targets) - ln_z,
            ln_z,
            probs,
            grad: &self.targets - mean,
            cov,
        }
    }

    fn dual(&self, lambda: &DVector<f64>) -> f64 {
        let ln_w = self.ln_ref.iter().zip(&self.features).map(|(l, f)| l + f.dot(lambda));
        let top = ln_w.clone().fold(f64::NEG_INFINITY, f64::max);
        let ln_z = top + ln_w.map(|v| (v - top).exp()).sum::<f64>().ln();
        lambda.dot(&self.targets) - ln_z
    }

    /// Margin by which `y` separates the targets from the convex hull of
    /// the feature vectors; positive proves infeasibility.
    fn separation(&self, y: &DVector<f64>) -> f64 {
        let norm = y.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let top = self.features.iter().map(|f| f.dot(y)).fold(f64::NEG_INFINITY, f64::max);
        (self.targets.dot(y) - top) / norm
    }

    fn certified_infeasible(&self, lambda: &DVector<f64>, grad: &DVector<f64>) -> bool {
        let scale = 1e-9 * (1.0 + self.targets.amax());
        self.separation(lambda) > scale || self.separation(grad) > scale
    }

    fn direction(st: &DualState) -> DVector<f64> {
        let eig = st.cov.clone().symmetric_eigen();
        let emax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let thr = (emax * 1e-13).max(1e-300);
        let mut dir = DVector::zeros(st.grad.len());
        for (i, &e) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(i);
            let proj = v.dot(&st.grad);
            let scale = if e > thr { proj / e } else { proj };
            dir.axpy(scale, &v, 1.0);
        }
        dir
    }

    pub fn solve(&self, tol: f64, opts: &SolverOptions) -> Projection {
        let d = self.targets.len();
        let mut lambda = DVector::zeros(d);
        let mut st = self.state(&lambda);
        let mut history = vec![st.grad.norm()];
        let mut best = (st.grad.norm(), lambda.clone());
        let mut status = SolveStatus::NotConverged;
        let mut iterations = 0;
        while iterations < opts.max_iter {
            let r = st.grad.norm();
            if r < best.0 {
                best = (r, lambda.clone());
            }
            if r <= tol {
                status = SolveStatus::Converged;
                break;
            }
            if self.certified_infeasible(&lambda, &st.grad) {
                status = SolveStatus::Infeasible;
                break;
            }
            if lambda.norm() > opts.lambda_bound
                && history.len() > opts.stall_window
                && r > 0.5 * history[history.len() - 1 - opts.stall_window]
            {
                status = SolveStatus::Infeasible;
                break;
            }
            let dir = Self::direction(&st);
            let slope = st.grad.dot(&dir);
            let mut step = 1.0;
            let mut accepted = None;
            while step > 1e-12 {
                let cand = &lambda + &dir * step;
                let dc = self.dual(&cand);
                // near the optimum dual gains fall below rounding; accept a
                // full step that shrinks the residual instead
                let armijo = dc >= st.dual + 1e-4 * step * slope;
                if armijo || (step == 1.0 && self.state(&cand).grad.norm() < r) {
                    accepted = Some((cand, dc));
                    break;
                }
                step *= 0.5;
            }
            let Some((mut cand, mut dc)) = accepted else {
                if self.certified_infeasible(&lambda, &st.grad) {
                    status = SolveStatus::Infeasible;
                }
                break;
            };
            if step == 1.0 {
                // linear directions: keep doubling while the dual still rises
                let mut s = 2.0;
                while s <= 1024.0 {
                    let c2 = &lambda + &dir * s;
                    let d2 = self.dual(&c2);
                    if d2 > dc {
                        cand = c2;
                        dc = d2;
                        s *= 2.0;
                    } else {
                        break;
                    }
                }
            }
            lambda = cand;
            st = self.state(&lambda);
            history.push(st.grad.norm());
            iterations += 1;
        }
        if st.grad.norm() < best.0 {
            best = (st.grad.norm(), lambda.clone());
        }
        if status == SolveStatus::NotConverged {
            if best.0 <= tol {
                status = SolveStatus::Converged;
            } else if self.certified_infeasible(&lambda, &st.grad) {
                status = SolveStatus::Infeasible;
            }
        }
        let lambda = best.1;
        let st = self.state(&lambda);
        let mean = &self.targets - &st.grad;
        let value = (lambda.dot(&mean) - st.ln_z).max(0.0);
        Projection {
            status,
            value,
            residual: st.grad.norm(),
            iterations,
            pi: self.atoms.iter().copied().zip(st.probs.iter().copied()).collect(),
            lambda,
        }
    }
}

/// Minimize the joint rate with the infection measure pinned to `(1-t, t)`
/// and a fraction `sigma` of positive pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionProblem {
    pub t: f64,
    pub sigma: f64,
    pub params: RateParams,
    pub m_max: u32,
    pub tol: f64,
}

impl ContractionProblem {
    pub fn new(t: f64, sigma: f64, params: RateParams, m_max: u32, tol: f64) -> Result<Self> {
        for (name, v) in [("t", t), ("sigma", sigma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if m_max < 2 {
            return Err(Error::Domain(format!("m_max = {m_max} must be at least 2")));
        }
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::Domain(format!("tol = {tol} must be positive")));
        }
        Ok(ContractionProblem {
            t,
            sigma,
            params,
            m_max,
            tol,
        })
    }

    pub fn omega(&self) -> BinaryMeasure {
        BinaryMeasure::bernoulli(self.t).expect("t validated")
    }

    /// Feature vector `(negatives, positives, 1{no positives})` of a pool type.
    pub fn features(pt: PoolType) -> Vec<f64> {
        vec![
            f64::from(pt.negatives()),
            f64::from(pt.positives()),
            if pt.is_positive() { 0.0 } else { 1.0 },
        ]
    }

    /// `(omega(0)/beta, omega(1)/beta, 1 - sigma)`.
    pub fn targets(&self) -> Vec<f64> {
        let beta = self.params.beta();
        vec![(1.0 - self.t) / beta, self.t / beta, 1.0 - self.sigma]
    }

    pub fn truncation(&self) -> Result<PhiTruncation> {
        PhiTruncation::new(self.params.beta(), &self.omega(), self.m_max)
    }

    pub fn projection(&self) -> Result<EntropyProjection> {
        let trunc = self.truncation()?;
        EntropyProjection::new(trunc.atoms(), Self::features, self.targets())
    }
}

/// Dual multipliers of the three constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Duals {
    pub a: f64,
    pub b: f64,
    pub neg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionSolution {
    /// Minimal `H(pi | Phi)`; infinite when infeasible.
    pub value: ExtReal,
    /// `rate_marginal(omega) + beta * value`.
    pub joint_rate: ExtReal,
    #[serde(skip)]
    pub argmin_pi: PoolLaw,
    pub duals: Duals,
    pub kkt_residual: f64,
    pub feasible: bool,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Reference mass beyond the truncation.
    pub tail_mass: f64,
}

pub fn solve_contraction(prob: &ContractionProblem) -> Result<ContractionSolution> {
    solve_contraction_with(prob, &SolverOptions::default())
}

pub fn solve_contraction_with(prob: &ContractionProblem, opts: &SolverOptions) -> Result<ContractionSolution> {
    let trunc = prob.truncation()?;
    let proj = EntropyProjection::new(trunc.atoms(), ContractionProblem::features, prob.targets())?;
    let out = proj.solve(prob.tol, opts);
    let feasible = out.status == SolveStatus::Converged;
    let value = if out.status == SolveStatus::Infeasible {
        ExtReal::Infinite
    } else {
        ExtReal::Finite(out.value)
    };
    let marginal = rate_marginal(&prob.omega(), &prob.params)?;
    Ok(ContractionSolution {
        value,
        joint_rate: marginal + value * prob.params.beta(),
        argmin_pi: PoolLaw::from_weights(out.pi)?,
        duals: Duals {
            a: out.lambda[0],
            b: out.lambda[1],
            neg: out.lambda[2],
        },
        kkt_residual: out.residual,
        feasible,
        status: out.status,
        iterations: out.iterations,
        tail_mass: trunc.tail_mass(),
    })
}

/// Spread (max minus min) over the support of
/// `ln argmin_pi - lambda · f - ln Phi`, which vanishes for an exact tilt.
pub fn tilt_spread(prob: &ContractionProblem, sol: &ContractionSolution) -> Result<f64> {
    let omega = prob.omega();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (pt, w) in sol.argmin_pi.iter() {
        let f = ContractionProblem::features(pt);
        let tilt = sol.duals.a * f[0] + sol.duals.b * f[1] + sol.duals.neg * f[2];
        let r = w.ln() - tilt - phi_log_density(prob.params.beta(), &omega, pt)?;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok(hi - lo)
}

/// One row of the contraction profile.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub t: f64,
    pub sigma: f64,
    /// Minimal pool entropy term.
    pub pool_entropy: ExtReal,
    /// Contracted joint rate.
    pub value: ExtReal,
    pub corollary_rate: ExtReal,
    /// `value - corollary_rate` when both are finite.
    pub discrepancy: Option<f64>,
    pub kkt_residual: f64,
    pub status: SolveStatus,
}

/// Solve the contraction at each `t`, with `sigma` fixed or (when `None`)
/// set to `sigma_of_t(t)`, next to the closed-form corollary rate.
pub fn phi_sigma_profile(
    t_grid: &[f64],
    sigma: Option<f64>,
    params: &RateParams,
    m_max: u32,
    tol: f64,
) -> Result<Vec<ProfileRow>> {
    t_grid
        .iter()
        .map(|&t| {
            let s = match sigma {
                Some(s) => s,
                None => sigma_of_t(t, params.beta())?,
            };
            let prob = ContractionProblem::new(t, s, *params, m_max, tol)?;
            let sol = solve_contraction(&prob)?;
            let cor = corollary_rate(t, params)?;
            let discrepancy = match (sol.joint_rate, cor) {
                (ExtReal::Finite(a), ExtReal::Finite(b)) => Some(a - b),
                _ => None,
            };
            Ok(ProfileRow {
                t,
                sigma: s,
                pool_entropy: sol.value,
                value: sol.joint_rate,
                corollary_rate: cor,
                discrepancy,
                kkt_residual: sol.kkt_residual,
                status: sol.status,
            })
        })
        .collect()
}

/// Largest truncation accepted by [`primal_oracle`].
pub const ORACLE_M_MAX: u32 = 5;

/// Primal solution from [`primal_oracle`].
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub value: f64,
    pub pi: Vec<(PoolType, f64)>,
    /// Vertices of the feasible polytope.
    pub vertices: usize,
}

/// Calls `f` on every `r`-subset of `0..d` in lexicographic order.
fn for_each_subset(d: usize, r: usize, mut f: impl FnMut(&[usize])) {
    if r > d {
        return;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        f(&idx);
        let Some(i) = (0..r).rev().find(|&i| idx[i] != i + d - r) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn entropy(x: &[f64], ln_ref: &[f64]) -> f64 {
    x.iter()
        .zip(ln_ref)
        .map(|(&v, &l)| if v > 0.0 { v * (v.ln() - l) } else { 0.0 })
        .sum()
}

/// Brute-force primal minimizer for small truncations, independent of the
/// dual solver. Enumerates the vertices of the feasible polytope, restricts
/// to the atoms some vertex charges (the minimal face), and runs Newton's
/// method in null-space coordinates from the vertex barycentre. `None` means
/// the constraints are infeasible on the truncated support.
pub fn primal_oracle(prob: &ContractionProblem) -> Result<Option<OracleSolution>> {
    if prob.m_max > ORACLE_M_MAX {
        return Err(Error::TooLarge {
            what: "oracle truncation",
            n: u64::from(prob.m_max),
            limit: u64::from(ORACLE_M_MAX),
        });
    }
    let trunc = prob.truncation()?;
    let (atoms, ln_ref): (Vec<PoolType>, Vec<f64>) = trunc.atoms().iter().filter(|(_, l)| l.is_finite()).copied().unzip();
    let d = atoms.len();
    let mut a = DMatrix::zeros(4, d);
    for (j, &pt) in atoms.iter().enumerate() {
        a[(0, j)] = 1.0;
        for (i, f) in ContractionProblem::features(pt).into_iter().enumerate() {
            a[(i + 1, j)] = f;
        }
    }
    let mut c = DVector::from_element(4, 1.0);
    for (i, v) in prob.targets().into_iter().enumerate() {
        c[i + 1] = v;
    }

    // independent constraint rows
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax)
        .collect();
    let r = keep.len();
    let ur = DMatrix::from_columns(&keep.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let cr = ur.transpose() * &c;
    if (&ur * &cr - &c).norm() > 1e-10 * (1.0 + c.norm()) {
        return Ok(None);
    }
    let ar = ur.transpose() * &a;

    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for_each_subset(d, r, |cols| {
        let b = DMatrix::from_columns(&cols.iter().map(|&j| ar.column(j)).collect::<Vec<_>>());
        let Some(inv) = b.clone().try_inverse() else {
            return;
        };
        if b.determinant().abs() < 1e-12 {
            return;
        }
        let xb = inv * &cr;
        if xb.iter().any(|&v| v < -1e-12) {
            return;
        }
        let mut x = vec![0.0; d];
        for (k, &j) in cols.iter().enumerate() {
            x[j] = xb[k].max(0.0);
        }
        if (&a * DVector::from_column_slice(&x) - &c).norm() <= 1e-9 {
            vertices.push(x);
        }
    });
    if vertices.is_empty() {
        return Ok(None);
    }
    let face: Vec<usize> = (0..d).filter(|&j| vertices.iter().any(|v| v[j] > 1e-12)).collect();
    let nf = face.len();
    let lf: Vec<f64> = face.iter().map(|&j| ln_ref[j]).collect();
    let mut x: Vec<f64> = face
        .iter()
        .map(|&j| vertices.iter().map(|v| v[j]).sum::<f64>() / vertices.len() as f64)
        .collect();

    // null space of the face's constraint matrix
    let af = DMatrix::from_columns(&face.iter().map(|&j| ar.column(j)).collect::<Vec<_>>());
    let gram = af.transpose() * &af;
    let eig = gram.symmetric_eigen();
    let emax = eig.eigenvalues.amax().max(1.0);
    let null: Vec<usize> = (0..nf).filter(|&i| eig.eigenvalues[i].abs() <= 1e-10 * emax).collect();
    if !null.is_empty() {
        let z = DMatrix::from_columns(&null.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
        for _ in 0..200 {
            let g = DVector::from_iterator(nf, x.iter().zip(&lf).map(|(&v, &l)| v.ln() - l + 1.0));
            let zg = z.transpose() * &g;
            if zg.amax() < 1e-14 {
                break;
            }
            let h = DMatrix::from_diagonal(&DVector::from_iterator(nf, x.iter().map(|v| 1.0 / v)));
            let zhz = z.transpose() * h * &z;
            let Some(chol) = zhz.cholesky() else {
                break;
            };
            let dir = -(&z * chol.solve(&zg));
            let mut step = dir
                .iter()
                .zip(&x)
                .filter(|(dv, _)| **dv < 0.0)
                .map(|(dv, v)| -0.99 * v / dv)
                .fold(1.0, f64::min);
            let f0 = entropy(&x, &lf);
            let slope = g.dot(&dir);
            let mut moved = false;
            while step > 1e-16 {
                let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(v, dv)| v + step * dv).collect();
                if entropy(&cand, &lf) <= f0 + 1e-4 * step * slope + 1e-15 * f0.abs().max(1.0) {
                    x = cand;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
    Ok(Some(OracleSolution {
        value: entropy(&x, &lf),
        pi: face.iter().zip(&x).map(|(&j, &v)| (atoms[j], v)).collect(),
        vertices: vertices.len(),
    }))
}

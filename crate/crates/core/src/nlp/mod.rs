//! Finite nonlinear programming.
//!
//! [`solve_nlp`] is an SQP method for
//!
//! ```text
//!     minimize     f(z)
//!     subject to   c_j(z) <= 0,   j = 1..r
//!                  lo <= z <= hi
//! ```
//!
//! using a damped BFGS approximation of the Lagrangian Hessian, an l1 merit
//! line search with second-order correction, and the dense QP solver from
//! [`qp`]. Inconsistent QP subproblems are retried in elastic mode.

pub mod qp;

use nalgebra::{DMatrix, DVector};

pub use qp::{solve_qp, QpError, QpSolution};

/// Value and gradient of a smooth function.
pub type ValueGrad = (f64, DVector<f64>);

pub type NlpFn<'a> = Box<dyn Fn(&[f64]) -> ValueGrad + 'a>;

pub struct NlpProblem<'a> {
    pub dim: usize,
    pub objective: NlpFn<'a>,
    /// Constraints in the form `c_j(z) <= 0`.
    pub constraints: Vec<NlpFn<'a>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl<'a> NlpProblem<'a> {
    pub fn new(dim: usize, objective: NlpFn<'a>) -> Self {
        Self {
            dim,
            objective,
            constraints: Vec::new(),
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.dim);
        assert_eq!(upper.len(), self.dim);
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn constraint(mut self, c: NlpFn<'a>) -> Self {
        self.constraints.push(c);
        self
    }

    fn clamp(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, &v)| v.max(self.lower[j]).min(self.upper[j]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlpOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub tol_comp: f64,
    /// Converged also requires `|d|_inf <= tol_step (1 + |z|_inf)`. Keeps
    /// the iteration going on degenerate problems whose constraint
    /// violation vanishes faster than the distance to the solution.
    pub tol_step: f64,
    pub max_iter: usize,
    /// Initial penalty on the elastic slack; doubled on each retry.
    pub elastic_penalty: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-9,
            tol_feas: 1e-9,
            tol_comp: 1e-9,
            tol_step: 1e-9,
            max_iter: 200,
            elastic_penalty: 1e4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIter,
    QpFailure,
}

#[derive(Clone, Debug)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    /// One nonnegative multiplier per constraint.
    pub multipliers: Vec<f64>,
    pub lower_multipliers: Vec<f64>,
    pub upper_multipliers: Vec<f64>,
    /// Norm of the gradient of the Lagrangian (bound terms included).
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub complementarity: f64,
    pub status: NlpStatus,
    pub iterations: usize,
}

impl NlpSolution {
    pub fn converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}

struct Point {
    z: Vec<f64>,
    f: f64,
    grad: DVector<f64>,
    c: Vec<f64>,
    jac: DMatrix<f64>,
}

impl Point {
    fn new(p: &NlpProblem<'_>, z: Vec<f64>) -> Self {
        let (f, grad) = (p.objective)(&z);
        let r = p.constraints.len();
        let mut c = Vec::with_capacity(r);
        let mut jac = DMatrix::zeros(r, p.dim);
        for (j, con) in p.constraints.iter().enumerate() {
            let (v, gr) = con(&z);
            c.push(v);
            jac.set_row(j, &gr.transpose());
        }
        Self { z, f, grad, c, jac }
    }

    fn is_finite(&self) -> bool {
        self.f.is_finite()
            && self.grad.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.jac.iter().all(|v| v.is_finite())
    }

    fn infeasibility(&self) -> f64 {
        self.c.iter().map(|&v| v.max(0.0)).sum()
    }

    fn max_violation(&self) -> f64 {
        self.c.iter().fold(0.0f64, |acc, &v| acc.max(v))
    }

    fn merit(&self, penalty: f64) -> f64 {
        self.f + penalty * self.infeasibility()
    }

    fn lagrangian_grad(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.grad + self.jac.transpose() * lambda
    }
}

struct Subproblem {
    step: DVector<f64>,
    multipliers: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    elastic: bool,
}

/// Solves the SQP subproblem at `pt`, falling back to elastic mode.
fn subproblem(
    p: &NlpProblem<'_>,
    pt: &Point,
    b: &DMatrix<f64>,
    rhs_c: &[f64],
    opts: &NlpOptions,
) -> Result<Subproblem, QpError> {
    let n = p.dim;
    let lo: Vec<f64> = (0..n).map(|j| p.lower[j] - pt.z[j]).collect();
    let hi: Vec<f64> = (0..n).map(|j| p.upper[j] - pt.z[j]).collect();
    let bvec = DVector::from_iterator(rhs_c.len(), rhs_c.iter().map(|v| -v));
    match solve_qp(b, &pt.grad, &pt.jac, &bvec, &lo, &hi) {
        Ok(s) => {
            return Ok(Subproblem {
                step: s.step,
                multipliers: s.multipliers,
                lower: s.lower_multipliers,
                upper: s.upper_multipliers,
                elastic: false,
            })
        }
        Err(QpError::Infeasible) | Err(QpError::IterationLimit) => {}
        Err(e) => return Err(e),
    }

    // Elastic mode: one shared slack t >= 0 relaxes every row.
    let r = rhs_c.len();
    let mut penalty = opts.elastic_penalty;
    for _ in 0..4 {
        let mut h = DMatrix::zeros(n + 1, n + 1);
        h.view_mut((0, 0), (n, n)).copy_from(b);
        h[(n, n)] = 1.0;
        let mut g = DVector::zeros(n + 1);
        g.rows_mut(0, n).copy_from(&pt.grad);
        g[n] = penalty;
        let mut a = DMatrix::zeros(r, n + 1);
        a.view_mut((0, 0), (r, n)).copy_from(&pt.jac);
        for row in 0..r {
            a[(row, n)] = -1.0;
        }
        let mut elo = lo.clone();
        elo.push(0.0);
        let mut ehi = hi.clone();
        ehi.push(f64::INFINITY);
        match solve_qp(&h, &g, &a, &bvec, &elo, &ehi) {
            Ok(s) => {
                return Ok(Subproblem {
                    step: s.step.rows(0, n).into_owned(),
                    multipliers: s.multipliers,
                    lower: s.lower_multipliers.rows(0, n).into_owned(),
                    upper: s.upper_multipliers.rows(0, n).into_owned(),
                    elastic: true,
                })
            }
            Err(QpError::IterationLimit) => penalty *= 2.0,
            Err(e) => return Err(e),
        }
    }
    Err(QpError::Infeasible)
}

struct KktMeasures {
    residual: f64,
    violation: f64,
    complementarity: f64,
}

impl KktMeasures {
    fn satisfies(&self, opts: &NlpOptions) -> bool {
        self.residual <= opts.tol_kkt && self.violation <= opts.tol_feas && self.complementarity <= opts.tol_comp
    }
}

fn kkt_measures(pt: &Point, sub: &Subproblem) -> KktMeasures {
    let grad = pt.lagrangian_grad(&sub.multipliers) - &sub.lower + &sub.upper;
    let complementarity =
        pt.c.iter()
            .zip(sub.multipliers.iter())
            .fold(0.0f64, |acc, (c, l)| acc.max((c * l).abs()));
    KktMeasures {
        residual: grad.norm(),
        violation: pt.max_violation(),
        complementarity,
    }
}

fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let y = if sy < 0.2 * sbs {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    } else {
        y.clone()
    };
    let sy = s.dot(&y);
    if sy <= 1e-300 {
        return;
    }
    let mut next = &*b + &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
    // Symmetrize against rounding drift.
    next = (&next + next.transpose()) * 0.5;
    // Near-singular updates can lose definiteness in floating point; keep the
    // previous matrix then.
    if next.iter().all(|v| v.is_finite()) && next.clone().cholesky().is_some() {
        *b = next;
    }
}

fn small_step(d: &DVector<f64>, z: &[f64], opts: &NlpOptions) -> bool {
    let zmax = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    d.amax() <= opts.tol_step * (1.0 + zmax)
}

/// Solves `p` from `z0` (clamped into the bounds).
pub fn solve_nlp(p: &NlpProblem<'_>, z0: &[f64], opts: &NlpOptions) -> NlpSolution {
    assert_eq!(z0.len(), p.dim);
    let n = p.dim;
    let r = p.constraints.len();
    let mut pt = Point::new(p, p.clamp(z0));
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut penalty = 1.0f64;
    let mut last: Option<(Subproblem, KktMeasures)> = None;
    let mut status = NlpStatus::MaxIter;
    let mut iterations = 0;
    let mut resets = 0;

    if !pt.is_finite() {
        return finish(pt, None, NlpStatus::QpFailure, 0, r, n);
    }

    while iterations < opts.max_iter {
        iterations += 1;
        let sub = match subproblem(p, &pt, &b, &pt.c, opts) {
            Ok(s) => s,
            Err(_) => {
                status = NlpStatus::QpFailure;
                break;
            }
        };
        let meas = kkt_measures(&pt, &sub);
        if !sub.elastic && meas.satisfies(opts) && small_step(&sub.step, &pt.z, opts) {
            last = Some((sub, meas));
            status = NlpStatus::Converged;
            break;
        }

        let lam_max = sub.multipliers.amax();
        if penalty < 1.5 * lam_max + 1e-3 {
            penalty = (2.0 * lam_max).max(penalty * 1.5) + 1e-3;
        }

        let d = sub.step.clone();
        let phi0 = pt.merit(penalty);
        let dir = pt.grad.dot(&d) - penalty * pt.infeasibility();
        let dir = dir.min(0.0);

        let mut accepted: Option<Point> = None;
        let mut alpha = 1.0;
        for trial in 0..50 {
            let zt: Vec<f64> = p.clamp(
                &pt.z
                    .iter()
                    .zip(d.iter())
                    .map(|(z, dz)| z + alpha * dz)
                    .collect::<Vec<_>>(),
            );
            let cand = Point::new(p, zt);
            if cand.is_finite() && cand.merit(penalty) <= phi0 + 1e-4 * alpha * dir + merit_slack(phi0) {
                accepted = Some(cand);
                break;
            }
            if trial == 0 && cand.is_finite() && r > 0 {
                // Second-order correction: re-linearize the constraints at z + d.
                let shifted: Vec<f64> = (0..r).map(|j| cand.c[j] - pt.jac.row(j).dot(&d.transpose())).collect();
                if let Ok(soc) = subproblem(p, &pt, &b, &shifted, opts) {
                    if !soc.elastic {
                        let zs = p.clamp(
                            &pt.z
                                .iter()
                                .zip(soc.step.iter())
                                .map(|(z, dz)| z + dz)
                                .collect::<Vec<_>>(),
                        );
                        let c2 = Point::new(p, zs);
                        if c2.is_finite() && c2.merit(penalty) <= phi0 + 1e-4 * dir + merit_slack(phi0) {
                            accepted = Some(c2);
                            break;
                        }
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some(next) = accepted else {
            if resets < 2 {
                resets += 1;
                b = DMatrix::identity(n, n);
                last = Some((sub, meas));
                continue;
            }
            last = Some((sub, meas));
            break;
        };

        let s = DVector::from_iterator(n, next.z.iter().zip(&pt.z).map(|(a, b)| a - b));
        let y = next.lagrangian_grad(&sub.multipliers) - pt.lagrangian_grad(&sub.multipliers);
        damped_bfgs(&mut b, &s, &y);
        last = Some((sub, meas));
        pt = next;
    }

    if status != NlpStatus::Converged {
        // Re-measure at the final point with fresh multipliers when possible.
        if let Ok(sub) = subproblem(p, &pt, &b, &pt.c, opts) {
            let meas = kkt_measures(&pt, &sub);
            if !sub.elastic && meas.satisfies(opts) && small_step(&sub.step, &pt.z, opts) {
                status = NlpStatus::Converged;
            }
            if status != NlpStatus::QpFailure {
                last = Some((sub, meas));
            }
        }
    }
    finish(pt, last, status, iterations, r, n)
}

/// Nonnegative least squares `min_{lambda >= 0} |c + A lambda|`, solved as a
/// bound-constrained QP. Returns the multipliers and the attained residual norm.
pub fn nonnegative_least_squares(a: &DMatrix<f64>, c: &DVector<f64>) -> (DVector<f64>, f64) {
    let k = a.ncols();
    if k == 0 {
        return (DVector::zeros(0), c.norm());
    }
    let mut h = a.transpose() * a;
    let reg = 1e-14 * (1.0 + h.trace());
    for j in 0..k {
        h[(j, j)] += reg;
    }
    let g = a.transpose() * c;
    let lambda = match solve_qp(
        &h,
        &g,
        &DMatrix::zeros(0, k),
        &DVector::zeros(0),
        &vec![0.0; k],
        &vec![f64::INFINITY; k],
    ) {
        Ok(s) => s.step.map(|v| v.max(0.0)),
        Err(_) => DVector::zeros(k),
    };
    let residual = (c + a * &lambda).norm();
    (lambda, residual)
}

/// Allows merit comparisons to absorb rounding noise near convergence.
fn merit_slack(phi: f64) -> f64 {
    1e-14 * (1.0 + phi.abs())
}

fn finish(
    pt: Point,
    last: Option<(Subproblem, KktMeasures)>,
    status: NlpStatus,
    iterations: usize,
    r: usize,
    n: usize,
) -> NlpSolution {
    let (multipliers, lower, upper, residual, complementarity) = match last {
        Some((sub, meas)) => (
            sub.multipliers.iter().copied().collect(),
            sub.lower.iter().copied().collect(),
            sub.upper.iter().copied().collect(),
            meas.residual,
            meas.complementarity,
        ),
        None => (vec![0.0; r], vec![0.0; n], vec![0.0; n], f64::INFINITY, f64::INFINITY),
    };
    NlpSolution {
        objective: pt.f,
        max_violation: pt.max_violation(),
        z: pt.z,
        multipliers,
        lower_multipliers: lower,
        upper_multipliers: upper,
        kkt_residual: residual,
        complementarity,
        status,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn linear(c: Vec<f64>, c0: f64) -> NlpFn<'static> {
        Box::new(move |z: &[f64]| {
            let v = c.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + c0;
            (v, DVector::from_vec(c.clone()))
        })
    }

    #[test]
    fn box_only_linear_program() {
        let p = NlpProblem::new(2, linear(vec![-1.0, 1.5], 0.0)).with_bounds(vec![-1.0; 2], vec![1.0; 2]);
        let s = solve_nlp(&p, &[0.0, 0.0], &NlpOptions::default());
        assert!(s.converged(), "{s:?}");
        assert_eq!(s.z, vec![1.0, -1.0]);
    }

    #[test]
    fn unconstrained_quadratic() {
        let p = NlpProblem::new(
            2,
            Box::new(|z: &[f64]| {
                (
                    z[0] * z[0] + z[1] * z[1],
                    DVector::from_vec(vec![2.0 * z[0], 2.0 * z[1]]),
                )
            }),
        );
        let s = solve_nlp(&p, &[3.0, 4.0], &NlpOptions::default());
        assert!(s.converged());
        assert_abs_diff_eq!(s.z[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.z[1], 0.0, epsilon = 1e-9);
        assert!(s.multipliers.is_empty());
    }

    #[test]
    fn one_discretization_point() {
        // min -x1 + 1.5 x2  s.t. -1 + 2 x1 - x2 <= 0, x in [-1,1]^2
        let p = NlpProblem::new(2, linear(vec![-1.0, 1.5], 0.0))
            .with_bounds(vec![-1.0; 2], vec![1.0; 2])
            .constraint(linear(vec![2.0, -1.0], -1.0));
        let s = solve_nlp(&p, &[1.0, -1.0], &NlpOptions::default());
        assert!(s.converged(), "{s:?}");
        assert_abs_diff_eq!(s.z[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.z[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn nonlinear_constraint_circle() {
        // min x1 + x2 s.t. x1^2 + x2^2 <= 2  =>  (-1, -1), multiplier 1/2
        let p = NlpProblem::new(2, linear(vec![1.0, 1.0], 0.0)).constraint(Box::new(|z: &[f64]| {
            (
                z[0] * z[0] + z[1] * z[1] - 2.0,
                DVector::from_vec(vec![2.0 * z[0], 2.0 * z[1]]),
            )
        }));
        let s = solve_nlp(&p, &[0.5, 0.0], &NlpOptions::default());
        assert!(s.converged(), "{s:?}");
        assert_abs_diff_eq!(s.z[0], -1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.z[1], -1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.multipliers[0], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_linearization_uses_elastic_mode() {
        // x^2 - 1 <= 0 linearized at x = 0 has zero gradient: 0*d <= 1 is fine,
        // but -x^2 + 4 <= 0 (|x| >= 2) is inconsistent at x = 0.
        let p = NlpProblem::new(
            1,
            Box::new(|z: &[f64]| (z[0] * z[0], DVector::from_vec(vec![2.0 * z[0]]))),
        )
        .with_bounds(vec![-5.0], vec![5.0])
        .constraint(Box::new(|z: &[f64]| {
            (4.0 - z[0] * z[0], DVector::from_vec(vec![-2.0 * z[0]]))
        }));
        let s = solve_nlp(&p, &[0.0], &NlpOptions::default());
        // Stuck at the stationary infeasible point or moved: never panics,
        // and the reported violation is consistent.
        assert!(s.max_violation >= 0.0);
        let s = solve_nlp(&p, &[0.5], &NlpOptions::default());
        assert!(s.converged(), "{s:?}");
        assert_abs_diff_eq!(s.z[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn deterministic_iterates() {
        let make = || {
            NlpProblem::new(
                2,
                Box::new(|z: &[f64]| {
                    let v = (z[0] - 1.0).powi(2) + 10.0 * (z[1] - z[0] * z[0]).powi(2);
                    let g = DVector::from_vec(vec![
                        2.0 * (z[0] - 1.0) - 40.0 * z[0] * (z[1] - z[0] * z[0]),
                        20.0 * (z[1] - z[0] * z[0]),
                    ]);
                    (v, g)
                }),
            )
            .constraint(linear(vec![1.0, 1.0], -1.5))
        };
        let a = solve_nlp(&make(), &[-1.0, 2.0], &NlpOptions::default());
        let b = solve_nlp(&make(), &[-1.0, 2.0], &NlpOptions::default());
        assert_eq!(a.z, b.z);
        assert_eq!(a.iterations, b.iterations);
        assert!(a.converged(), "{a:?}");
        let grad = {
            let (_, g) = (make().objective)(&a.z);
            g + DVector::from_vec(vec![1.0, 1.0]) * a.multipliers[0]
        };
        assert!(grad.norm() <= 1e-9);
    }

    #[test]
    fn nnls_recovers_hand_multiplier() {
        // grad f = (-1, 3/2), active gradient (2/3, -1): lambda = 3/2
        let a = DMatrix::from_column_slice(2, 1, &[2.0 / 3.0, -1.0]);
        let c = DVector::from_vec(vec![-1.0, 1.5]);
        let (l, res) = nonnegative_least_squares(&a, &c);
        assert_abs_diff_eq!(l[0], 1.5, epsilon = 1e-10);
        assert!(res < 1e-10);
    }

    #[test]
    fn nnls_clips_negative_direction() {
        let a = DMatrix::from_column_slice(1, 1, &[1.0]);
        let c = DVector::from_vec(vec![2.0]);
        let (l, res) = nonnegative_least_squares(&a, &c);
        assert_eq!(l[0], 0.0);
        assert_abs_diff_eq!(res, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn damped_update_stays_positive_definite() {
        let mut b = DMatrix::identity(2, 2);
        let s = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-3.0, 0.5]);
        damped_bfgs(&mut b, &s, &y);
        assert!(b.cholesky().is_some());
    }
}

//! SIP-level quality measures: feasibility, stationarity, constraint
//! qualifications, perturbation parameters and empirical convergence order.

use nalgebra::{DMatrix, DVector};

use crate::lower_level::{LlOptions, LowerLevelError, LowerLevelSolution, LowerLevelSolver};
use crate::model::{euclidean, SipProblem};
use crate::nlp::{nonnegative_least_squares, solve_qp};
use crate::sensitivity::LinearizedConstraint;

/// `max_i phi_i(x)` where `phi_i(x) = max_{y in Y} g_i(x, y)`.
pub fn feasibility_measure(p: &SipProblem, x: &[f64]) -> Result<f64, LowerLevelError> {
    let solver = LowerLevelSolver::new(p, LlOptions::default())?;
    let sols = solve_all(&solver, x)?;
    Ok(feasibility_from(&sols))
}

pub fn solve_all(solver: &LowerLevelSolver<'_>, x: &[f64]) -> Result<Vec<LowerLevelSolution>, LowerLevelError> {
    (0..solver.problem().p()).map(|i| solver.solve(i, x)).collect()
}

pub fn feasibility_from(sols: &[LowerLevelSolution]) -> f64 {
    sols.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ActiveIndex {
    pub i: usize,
    pub y: Vec<f64>,
    /// `g_i(x, y)`; nonnegative values are violations.
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct StationarityReport {
    pub residual: f64,
    pub active_indices: Vec<ActiveIndex>,
    /// Aligned with `active_indices`.
    pub multipliers: Vec<f64>,
    pub finite_multipliers: Vec<(usize, f64)>,
    pub bound_multipliers: Vec<(usize, BoundSide, f64)>,
    pub emfcq_margin: Option<f64>,
    pub elicq: Option<bool>,
}

/// Stationarity residual of `x` for the SIP: the least-squares distance of
/// `-grad f(x)` from the cone spanned by the gradients `D_1 g_i(x, y)` of the
/// active indices (plus active finite constraints and bounds).
pub fn stationarity_residual(p: &SipProblem, x: &[f64], tol_act: f64) -> Result<StationarityReport, LowerLevelError> {
    let solver = LowerLevelSolver::new(p, LlOptions::default())?;
    let sols = solve_all(&solver, x)?;
    Ok(stationarity_from_solutions(p, x, &sols, tol_act))
}

pub fn stationarity_from_solutions(
    p: &SipProblem,
    x: &[f64],
    sols: &[LowerLevelSolution],
    tol_act: f64,
) -> StationarityReport {
    let n = p.n;
    let mut active_indices = Vec::new();
    for s in sols {
        for lm in &s.local_maxima {
            if lm.value >= -tol_act {
                active_indices.push(ActiveIndex {
                    i: s.i,
                    y: lm.y.clone(),
                    value: lm.value,
                });
            }
        }
    }
    let mut cols: Vec<DVector<f64>> = active_indices.iter().map(|a| p.g_eval(a.i, x, &a.y).grad_x).collect();
    let si_cols = cols.len();

    let mut finite_idx = Vec::new();
    for (j, c) in p.finite_constraints.iter().enumerate() {
        let e = c.eval(x);
        if e.value >= -tol_act {
            finite_idx.push(j);
            cols.push(e.gradient);
        }
    }
    let mut bound_idx = Vec::new();
    for (j, b) in p.x_bounds.iter().enumerate() {
        if b.lo.is_finite() && x[j] - b.lo <= tol_act {
            bound_idx.push((j, BoundSide::Lower));
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            cols.push(e);
        }
        if b.hi.is_finite() && b.hi - x[j] <= tol_act {
            bound_idx.push((j, BoundSide::Upper));
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            cols.push(e);
        }
    }

    let grad_f = p.objective.eval(x).gradient;
    let a = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    let (lambda, residual) = nonnegative_least_squares(&a, &grad_f);

    let si_grads: Vec<DVector<f64>> = cols[..si_cols].to_vec();
    let (emfcq_margin, elicq) = if si_grads.is_empty() {
        (None, None)
    } else {
        (emfcq_margin(&si_grads), Some(linearly_independent(&si_grads)))
    };

    StationarityReport {
        residual,
        multipliers: lambda.rows(0, si_cols).iter().copied().collect(),
        finite_multipliers: finite_idx
            .iter()
            .enumerate()
            .map(|(k, &j)| (j, lambda[si_cols + k]))
            .collect(),
        bound_multipliers: bound_idx
            .iter()
            .enumerate()
            .map(|(k, &(j, side))| (j, side, lambda[si_cols + finite_idx.len() + k]))
            .collect(),
        active_indices,
        emfcq_margin,
        elicq,
    }
}

fn linearly_independent(vectors: &[DVector<f64>]) -> bool {
    let n = vectors[0].len();
    if vectors.len() > n {
        return false;
    }
    let sv = DMatrix::from_columns(vectors).singular_values();
    let smax = sv.max().max(1.0);
    sv.iter().all(|&s| s > 1e-8 * smax)
}

/// Largest `s` with `a_k . xi <= -s` for all `k` over `|xi|_inf <= 1`,
/// from a lightly regularized QP. Positive values certify EMFCQ.
fn emfcq_margin(grads: &[DVector<f64>]) -> Option<f64> {
    let n = grads[0].len();
    let k = grads.len();
    let eps = 1e-9;
    let mut h = DMatrix::identity(n + 1, n + 1) * eps;
    h[(n, n)] = eps;
    let mut g = DVector::zeros(n + 1);
    g[n] = -1.0;
    let mut a = DMatrix::zeros(k, n + 1);
    for (r, gr) in grads.iter().enumerate() {
        a.view_mut((r, 0), (1, n)).copy_from(&gr.transpose());
        a[(r, n)] = 1.0;
    }
    let mut lo = vec![-1.0; n];
    lo.push(f64::NEG_INFINITY);
    let mut hi = vec![1.0; n];
    hi.push(f64::INFINITY);
    let s = solve_qp(&h, &g, &a, &DVector::zeros(k), &lo, &hi).ok()?;
    let xi = s.step.rows(0, n);
    grads.iter().map(|gr| -gr.dot(&xi)).reduce(f64::min)
}

/// Master-problem multipliers that produced an iterate.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct MasterMultipliers {
    /// Per constraint family, aligned with its discretization points.
    pub discretization: Vec<Vec<f64>>,
    /// Per constraint family, the multiplier of its linearized constraint.
    pub linearized: Vec<Option<f64>>,
    pub finite: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationParams {
    pub beta: DVector<f64>,
    pub beta_norm: f64,
    pub alpha: Vec<f64>,
    /// Aggregated multiplier per constraint family.
    pub lambda_bar: Vec<f64>,
}

impl PerturbationParams {
    pub fn alpha_max(&self) -> f64 {
        self.alpha.iter().fold(0.0, |a, b| a.max(b.abs()))
    }
}

/// Perturbation parameters of an iterate `x` of the outer loop.
///
/// All master multipliers of family `i` are summed into `lambda_bar_i`; then
/// `beta = grad f(x) + sum_i lambda_bar_i D_1 g_i(x, y_i)` where `y_i` is the
/// lower-level maximizer at `x`. Active finite constraints and bounds enter
/// `beta` with their own master multipliers. `alpha_i` is `g_i(x, y_i)`,
/// clipped at zero when `lambda_bar_i = 0`.
pub fn compute_perturbation_params(
    p: &SipProblem,
    x: &[f64],
    sols: &[LowerLevelSolution],
    mults: &MasterMultipliers,
) -> PerturbationParams {
    let mut beta = p.objective.eval(x).gradient;
    let mut alpha = Vec::with_capacity(p.p());
    let mut lambda_bar = Vec::with_capacity(p.p());
    for (i, s) in sols.iter().enumerate() {
        let lb: f64 = mults.discretization.get(i).map_or(0.0, |v| v.iter().sum::<f64>())
            + mults.linearized.get(i).copied().flatten().unwrap_or(0.0);
        let ge = p.g_eval(i, x, &s.y_star);
        beta += &ge.grad_x * lb;
        alpha.push(if lb == 0.0 { ge.value.max(0.0) } else { ge.value });
        lambda_bar.push(lb);
    }
    for (j, c) in p.finite_constraints.iter().enumerate() {
        if let Some(&l) = mults.finite.get(j) {
            if l != 0.0 {
                beta += c.eval(x).gradient * l;
            }
        }
    }
    for j in 0..p.n {
        beta[j] += mults.upper.get(j).copied().unwrap_or(0.0) - mults.lower.get(j).copied().unwrap_or(0.0);
    }
    PerturbationParams {
        beta_norm: beta.norm(),
        beta,
        alpha,
        lambda_bar,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct OrderEstimate {
    pub order: f64,
    /// Every error in the fitted tail is below its predecessor.
    pub monotone: bool,
    pub pairs: usize,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OrderError {
    #[error("need at least 3 errors, got {0}")]
    TooShort(usize),
    #[error("errors must be positive and finite")]
    NonPositive,
}

/// Least-squares slope of `log e_{k+1}` against `log e_k` over the last
/// `min(4, len - 1)` pairs.
pub fn estimate_order(errors: &[f64]) -> Result<OrderEstimate, OrderError> {
    if errors.len() < 3 {
        return Err(OrderError::TooShort(errors.len()));
    }
    if errors.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(OrderError::NonPositive);
    }
    let pairs = 4.min(errors.len() - 1);
    let tail = &errors[errors.len() - pairs - 1..];
    let xs: Vec<f64> = tail[..pairs].iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = tail[1..].iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / pairs as f64;
    let my = ys.iter().sum::<f64>() / pairs as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let order = if var > 0.0 { cov / var } else { f64::NAN };
    Ok(OrderEstimate {
        order,
        monotone: tail.windows(2).all(|w| w[1] < w[0]),
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LemmaBounds {
    pub value_gap: f64,
    pub gradient_gap: f64,
    pub step4: f64,
    pub step2: f64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error(transparent)]
    LowerLevel(#[from] LowerLevelError),
    #[error("lower-level solution at the evaluation point is not regular")]
    Irregular,
}

/// How well a linearized constraint built at `lc.x_base` predicts the value
/// and x-gradient of the reduced constraint `g_i(x, y*(x))` at `x_curr`.
pub fn empirical_lemma_bounds(
    solver: &LowerLevelSolver<'_>,
    lc: &LinearizedConstraint,
    x_curr: &[f64],
) -> Result<LemmaBounds, DiagnosticsError> {
    let p = solver.problem();
    let sol = solver.solve(lc.i, x_curr)?;
    if !sol.regularity.all() {
        return Err(DiagnosticsError::Irregular);
    }
    let ge = p.g_eval(lc.i, x_curr, &sol.y_star);
    let (gv, gg) = lc.eval(p, x_curr);
    let step = euclidean(x_curr, &lc.x_base);
    Ok(LemmaBounds {
        value_gap: (ge.value - gv).abs(),
        gradient_gap: (ge.grad_x - gg).norm(),
        step4: step.powi(4),
        step2: step.powi(2),
    })
}

//! Parametric sensitivity of lower-level KKT points and the linearized
//! Lagrangian constraint.
//!
//! Under LICQ, strict complementarity and second-order sufficiency the
//! lower-level maximizer `y(x)` and its multipliers `mu(x)` are locally
//! differentiable. Differentiating
//!
//! ```text
//!     grad_y g(x, y) - sum_{l in A} mu_l grad v_l(y) = 0
//!     v_A(y) = 0
//! ```
//!
//! in `x` gives the linear system solved by [`compute_sensitivity`]. The
//! first-order models `y_hat(x)`, `mu_hat(x)` are then substituted into the
//! lower-level Lagrangian to form the constraint `G(x) <= 0`.

use nalgebra::{DMatrix, DVector};

use crate::lower_level::LowerLevelSolution;
use crate::model::SipProblem;

#[derive(Clone, Debug, PartialEq)]
pub struct KktSensitivity {
    /// m x n
    pub dy_dx: DMatrix<f64>,
    /// q x n; rows of inactive constraints are zero.
    pub dmu_dx: DMatrix<f64>,
    /// Ratio of extreme singular values of the KKT matrix.
    pub condition_estimate: f64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("KKT derivative system is singular (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("KKT derivative system residual {residual:e} exceeds tolerance")]
    Inaccurate { residual: f64 },
}

/// Implicit-function derivatives of `y*(x)` and `mu*(x)` at `sol.x`.
///
/// The caller is responsible for `sol.regularity.all()`; without it the
/// system is typically singular or the derivatives are meaningless.
pub fn compute_sensitivity(p: &SipProblem, sol: &LowerLevelSolution) -> Result<KktSensitivity, SensitivityError> {
    let (n, m, q) = (p.n, p.m, p.q());
    let y = &sol.y_star;
    let active = &sol.active_set;
    let a = active.len();
    let ge = p.g_eval(sol.i, &sol.x, y);

    let mut hess = ge.hess_yy.clone();
    let mut jac_a = DMatrix::zeros(a, m);
    for (l, v) in p.index_constraints.iter().enumerate() {
        let ve = v.eval(y);
        if sol.mu_star[l] != 0.0 {
            if let Some(h) = &ve.hessian {
                hess -= h * sol.mu_star[l];
            }
        }
        if let Some(r) = active.iter().position(|&k| k == l) {
            jac_a.set_row(r, &ve.gradient.transpose());
        }
    }

    let size = m + a;
    let mut kkt = DMatrix::zeros(size, size);
    kkt.view_mut((0, 0), (m, m)).copy_from(&hess);
    kkt.view_mut((0, m), (m, a)).copy_from(&(-jac_a.transpose()));
    kkt.view_mut((m, 0), (a, m)).copy_from(&jac_a);
    let mut rhs = DMatrix::zeros(size, n);
    rhs.view_mut((0, 0), (m, n)).copy_from(&(-&ge.hess_yx));

    let sv = kkt.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > 1e14 {
        return Err(SensitivityError::Singular { condition });
    }
    let sol_mat = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(SensitivityError::Singular { condition })?;
    let residual = (&kkt * &sol_mat - &rhs).norm();
    if residual > 1e-8 * (1.0 + rhs.norm()) {
        return Err(SensitivityError::Inaccurate { residual });
    }

    let dy_dx = sol_mat.view((0, 0), (m, n)).into_owned();
    let mut dmu_dx = DMatrix::zeros(q, n);
    for (r, &l) in active.iter().enumerate() {
        dmu_dx.set_row(l, &sol_mat.row(m + r));
    }
    Ok(KktSensitivity {
        dy_dx,
        dmu_dx,
        condition_estimate: condition,
    })
}

/// The linearized Lagrangian constraint `G_i(x)` frozen at a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedConstraint {
    pub i: usize,
    pub x_base: Vec<f64>,
    pub y_base: Vec<f64>,
    pub mu_base: Vec<f64>,
    pub sens: KktSensitivity,
}

pub fn make_linearized_constraint(sol: &LowerLevelSolution, sens: KktSensitivity) -> LinearizedConstraint {
    LinearizedConstraint {
        i: sol.i,
        x_base: sol.x.clone(),
        y_base: sol.y_star.clone(),
        mu_base: sol.mu_star.clone(),
        sens,
    }
}

impl LinearizedConstraint {
    fn offset(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.x_base).map(|(a, b)| a - b))
    }

    /// `y_hat(x) = y_base + Dy (x - x_base)`
    pub fn y_hat(&self, x: &[f64]) -> Vec<f64> {
        let dy = &self.sens.dy_dx * self.offset(x);
        self.y_base.iter().zip(dy.iter()).map(|(a, b)| a + b).collect()
    }

    /// `mu_hat(x) = mu_base + Dmu (x - x_base)`
    pub fn mu_hat(&self, x: &[f64]) -> Vec<f64> {
        let dmu = &self.sens.dmu_dx * self.offset(x);
        self.mu_base.iter().zip(dmu.iter()).map(|(a, b)| a + b).collect()
    }

    /// Value and gradient of `G(x) = g(x, y_hat) - sum_l mu_hat_l v_l(y_hat)`.
    pub fn eval(&self, p: &SipProblem, x: &[f64]) -> (f64, DVector<f64>) {
        let yh = self.y_hat(x);
        let mh = self.mu_hat(x);
        let dy = &self.sens.dy_dx;
        let ge = p.g_eval(self.i, x, &yh);
        let mut value = ge.value;
        let mut grad = &ge.grad_x + dy.transpose() * &ge.grad_y;
        for (l, v) in p.index_constraints.iter().enumerate() {
            let dmu_row = self.sens.dmu_dx.row(l);
            if mh[l] == 0.0 && dmu_row.iter().all(|&c| c == 0.0) {
                continue;
            }
            let ve = v.eval(&yh);
            value -= mh[l] * ve.value;
            grad -= dy.transpose() * &ve.gradient * mh[l];
            grad -= dmu_row.transpose() * ve.value;
        }
        (value, grad)
    }
}

/// Value and gradient of `G` at `x`.
pub fn eval_g(lc: &LinearizedConstraint, p: &SipProblem, x: &[f64]) -> (f64, DVector<f64>) {
    lc.eval(p, x)
}

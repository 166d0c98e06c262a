//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 d' H d + g' d
//!     subject to   A d <= b
//!                  lo <= d <= hi
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimizer and adds violated rows one at a time, so no
//! feasible starting point is needed and infeasibility is detected directly.
//! Bound rows are handled as ordinary rows.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraints are inconsistent")]
    Infeasible,
    #[error("QP active-set iteration did not terminate")]
    IterationLimit,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub step: DVector<f64>,
    /// One multiplier per row of `A`, nonnegative.
    pub multipliers: DVector<f64>,
    /// Multipliers of `d >= lo`, nonnegative.
    pub lower_multipliers: DVector<f64>,
    /// Multipliers of `d <= hi`, nonnegative.
    pub upper_multipliers: DVector<f64>,
    pub iterations: usize,
}

/// Row of the combined constraint system `a . d <= b`.
#[derive(Clone, Copy, Debug)]
enum RowKind {
    General(usize),
    Lower(usize),
    Upper(usize),
}

pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
) -> Result<QpSolution, QpError> {
    let n = g.len();
    assert_eq!(h.nrows(), n);
    assert_eq!(a.ncols(), n);
    assert_eq!(a.nrows(), b.len());

    let chol = Cholesky::new(h.clone()).ok_or(QpError::NotPositiveDefinite)?;
    let hinv = chol.inverse();

    // Rows in a fixed order: general rows, then lower bounds, then upper bounds.
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut kinds: Vec<RowKind> = Vec::new();
    for r in 0..a.nrows() {
        normals.push(a.row(r).transpose());
        rhs.push(b[r]);
        kinds.push(RowKind::General(r));
    }
    for j in 0..n {
        if lower[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            normals.push(e);
            rhs.push(-lower[j]);
            kinds.push(RowKind::Lower(j));
        }
    }
    for j in 0..n {
        if upper[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            normals.push(e);
            rhs.push(upper[j]);
            kinds.push(RowKind::Upper(j));
        }
    }
    let rows = normals.len();
    for j in 0..n {
        if lower[j] > upper[j] {
            return Err(QpError::Infeasible);
        }
    }

    let mut x = -(&hinv * g);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 20 * (rows + n + 1);
    let mut iterations = 0;

    let scale = |j: usize| 1.0 + rhs[j].abs() + normals[j].amax();

    loop {
        // Most violated row, ties to the lowest index.
        let mut p = None;
        let mut worst = 0.0;
        for j in 0..rows {
            if active.contains(&j) {
                continue;
            }
            let viol = (normals[j].dot(&x) - rhs[j]) / scale(j);
            if viol > 1e-13 && viol > worst {
                worst = viol;
                p = Some(j);
            }
        }
        let Some(p) = p else { break };
        let np = &normals[p];
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            // Step directions for x and for the active multipliers.
            let hn = &hinv * np;
            let (z, r) = if active.is_empty() {
                (hn.clone(), DVector::zeros(0))
            } else {
                let k = active.len();
                let mut nmat = DMatrix::zeros(n, k);
                for (c, &j) in active.iter().enumerate() {
                    nmat.set_column(c, &normals[j]);
                }
                let hn_mat = &hinv * &nmat;
                let m = nmat.transpose() * &hn_mat;
                let rhs_r = nmat.transpose() * &hn;
                let r = m.lu().solve(&rhs_r).ok_or(QpError::IterationLimit)?;
                (&hn - hn_mat * &r, r)
            };

            // Partial step: largest move keeping active multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop_idx = None;
            for (c, &rc) in r.iter().enumerate() {
                if rc > 1e-14 {
                    let ratio = u[c] / rc;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_idx = Some(c);
                    }
                }
            }
            // Full step: makes row p active.
            let zn = z.dot(np);
            let viol = np.dot(&x) - rhs[p];
            let t2 = if zn > 1e-14 * np.norm_squared().max(1e-300) {
                (viol / zn).max(0.0)
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_infinite() {
                for (c, rc) in r.iter().enumerate() {
                    u[c] -= t1 * rc;
                }
                up += t1;
                let c = drop_idx.unwrap();
                active.remove(c);
                u.remove(c);
                continue;
            }
            let t = t1.min(t2);
            x -= &z * t;
            for (c, rc) in r.iter().enumerate() {
                u[c] -= t * rc;
            }
            up += t;
            if t2 <= t1 {
                active.push(p);
                u.push(up);
                break;
            }
            let c = drop_idx.unwrap();
            active.remove(c);
            u.remove(c);
        }
    }

    let mut multipliers = DVector::zeros(a.nrows());
    let mut lower_multipliers = DVector::zeros(n);
    let mut upper_multipliers = DVector::zeros(n);
    for (c, &j) in active.iter().enumerate() {
        let val = u[c].max(0.0);
        match kinds[j] {
            RowKind::General(r) => multipliers[r] = val,
            RowKind::Lower(i) => lower_multipliers[i] = val,
            RowKind::Upper(i) => upper_multipliers[i] = val,
        }
    }
    Ok(QpSolution {
        step: x,
        multipliers,
        lower_multipliers,
        upper_multipliers,
        iterations,
    })
}

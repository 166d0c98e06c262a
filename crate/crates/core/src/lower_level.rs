//! Global solution of the lower-level problems
//!
//! ```text
//!     Q_i(x):   maximize g_i(x, y)   subject to   v(y) <= 0
//! ```
//!
//! by multistart: `g_i(x, .)` is scanned on a fixed grid over a bounding box of
//! `Y`, the best feasible nodes seed local SQP solves, and the best local
//! maximizer wins. The returned value therefore dominates every feasible grid
//! node. Multipliers are recomputed by nonnegative least squares on the active
//! set, and the regularity conditions (LICQ, strict complementarity, second
//! order sufficiency) are checked pointwise.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::model::{euclidean, Interval, SipProblem};
use crate::nlp::{nonnegative_least_squares, solve_nlp, NlpOptions, NlpProblem};

#[derive(Clone, Debug, PartialEq)]
pub struct LlOptions {
    pub grid_per_dim: usize,
    pub n_starts: usize,
    pub tol_feas: f64,
    pub tol_kkt: f64,
    pub tol_act: f64,
    /// Smallest multiplier counted as strictly positive.
    pub tol_sc: f64,
    /// Two maximizers whose values differ by less than this are a tie.
    pub tol_tie: f64,
}

impl Default for LlOptions {
    fn default() -> Self {
        Self {
            grid_per_dim: 64,
            n_starts: 8,
            tol_feas: 1e-9,
            tol_kkt: 1e-9,
            tol_act: 1e-7,
            tol_sc: 1e-6,
            tol_tie: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct RegularityFlags {
    pub licq: bool,
    pub strict_complementarity: bool,
    pub sosc: bool,
}

impl RegularityFlags {
    pub fn all(&self) -> bool {
        self.licq && self.strict_complementarity && self.sosc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalMaximum {
    pub y: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct LowerLevelSolution {
    pub i: usize,
    pub x: Vec<f64>,
    pub y_star: Vec<f64>,
    /// One multiplier per index constraint; zero off the active set.
    pub mu_star: Vec<f64>,
    pub value: f64,
    pub active_set: Vec<usize>,
    pub regularity: RegularityFlags,
    pub kkt_residual: f64,
    /// Distinct local maximizers found by the multistart, best first.
    pub local_maxima: Vec<LocalMaximum>,
    /// Another maximizer attains the same value within `tol_tie`.
    pub non_unique: bool,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LowerLevelError {
    #[error("index set has no feasible grid node")]
    EmptyIndexSet,
    #[error("all local lower-level solves failed for constraint {i}")]
    LocalSolvesFailed { i: usize },
    #[error("lower-level input has non-finite entries")]
    NonFinite,
}

/// Feasible hull of a uniform scan of `[-half_width, half_width]^m`, padded by
/// 5% of its width plus one grid spacing. `None` when no node is feasible.
pub fn scan_feasible_hull(p: &SipProblem, half_width: f64, per_dim: usize) -> Option<Vec<Interval>> {
    let boxes = vec![Interval::new(-half_width, half_width); p.m];
    hull_in_box(p, &boxes, per_dim)
}

fn hull_in_box(p: &SipProblem, boxes: &[Interval], per_dim: usize) -> Option<Vec<Interval>> {
    let m = p.m;
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    let mut any = false;
    for_each_grid_node(boxes, per_dim, |y| {
        if p.is_index_feasible(y, 0.0) {
            any = true;
            for j in 0..m {
                lo[j] = lo[j].min(y[j]);
                hi[j] = hi[j].max(y[j]);
            }
        }
    });
    if !any {
        return None;
    }
    Some(
        (0..m)
            .map(|j| {
                let spacing = (boxes[j].hi - boxes[j].lo) / (per_dim.max(2) - 1) as f64;
                let pad = 0.05 * (hi[j] - lo[j]) + spacing;
                Interval::new((lo[j] - pad).max(boxes[j].lo), (hi[j] + pad).min(boxes[j].hi))
            })
            .collect(),
    )
}

/// Visits the nodes of a uniform grid in lexicographic order (first
/// coordinate slowest).
fn for_each_grid_node(boxes: &[Interval], per_dim: usize, mut visit: impl FnMut(&[f64])) {
    let m = boxes.len();
    if m == 0 {
        visit(&[]);
        return;
    }
    let axis: Vec<Vec<f64>> = boxes.iter().map(|b| linspace(b.lo, b.hi, per_dim)).collect();
    let mut idx = vec![0usize; m];
    let mut y = vec![0.0; m];
    loop {
        for j in 0..m {
            y[j] = axis[j][idx[j]];
        }
        visit(&y);
        let mut j = m;
        loop {
            if j == 0 {
                return;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < axis[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k <= 1 || lo == hi {
        return vec![0.5 * (lo + hi)];
    }
    (0..k)
        .map(|t| {
            if t == k - 1 {
                hi
            } else {
                lo + (hi - lo) * t as f64 / (k - 1) as f64
            }
        })
        .collect()
}

/// Recognizes constraints of the form `a * y_j + c <= 0` and returns the
/// implied interval per coordinate (infinite where nothing is recognized).
pub fn recognized_interval_bounds(p: &SipProblem) -> Vec<Interval> {
    let m = p.m;
    let mut out = vec![Interval::new(f64::NEG_INFINITY, f64::INFINITY); m];
    let probes = [vec![0.1; m], (0..m).map(|j| -0.3 + 0.07 * j as f64).collect::<Vec<_>>()];
    for v in &p.index_constraints {
        let e0 = v.eval(&probes[0]);
        let e1 = v.eval(&probes[1]);
        let flat = [&e0, &e1]
            .iter()
            .all(|e| e.hessian.as_ref().is_some_and(|h| h.iter().all(|&x| x == 0.0)));
        if !flat || e0.gradient != e1.gradient {
            continue;
        }
        let nz: Vec<usize> = (0..m).filter(|&j| e0.gradient[j] != 0.0).collect();
        if nz.len() != 1 {
            continue;
        }
        let j = nz[0];
        let a = e0.gradient[j];
        let c = e0.value - a * probes[0][j];
        let bound = -c / a;
        if a > 0.0 {
            out[j].hi = out[j].hi.min(bound);
        } else {
            out[j].lo = out[j].lo.max(bound);
        }
    }
    out
}

/// Bounding box of `Y`: recognized interval bounds where available, a padded
/// feasible-hull scan of `[-10, 10]^m` elsewhere.
pub fn index_bounding_box(p: &SipProblem) -> Result<Vec<Interval>, LowerLevelError> {
    let rec = recognized_interval_bounds(p);
    if rec.iter().all(|b| b.is_finite()) {
        return Ok(rec);
    }
    let scan_box: Vec<Interval> = rec
        .iter()
        .map(|b| {
            Interval::new(
                if b.lo.is_finite() { b.lo } else { -10.0 },
                if b.hi.is_finite() { b.hi } else { 10.0 },
            )
        })
        .collect();
    let per_dim = match p.m {
        1 => 2001,
        2 => 201,
        3 => 41,
        _ => 11,
    };
    let hull = hull_in_box(p, &scan_box, per_dim).ok_or(LowerLevelError::EmptyIndexSet)?;
    Ok(rec
        .iter()
        .zip(hull)
        .map(|(r, h)| if r.is_finite() { *r } else { h })
        .collect())
}

/// Feasible nodes of the multistart grid, in lexicographic order.
#[derive(Clone, Debug)]
pub struct IndexGrid {
    pub bbox: Vec<Interval>,
    pub nodes: Vec<Vec<f64>>,
}

impl IndexGrid {
    pub fn new(p: &SipProblem, per_dim: usize) -> Result<Self, LowerLevelError> {
        let bbox = index_bounding_box(p)?;
        Ok(Self::with_box(p, bbox, per_dim))
    }

    pub fn with_box(p: &SipProblem, bbox: Vec<Interval>, per_dim: usize) -> Self {
        let mut nodes = Vec::new();
        for_each_grid_node(&bbox, per_dim, |y| {
            if p.is_index_feasible(y, 0.0) {
                nodes.push(y.to_vec());
            }
        });
        Self { bbox, nodes }
    }

    /// Grid resolution used for dimension `m`: `per_dim` for `m <= 2`,
    /// otherwise about 4096 nodes in total.
    pub fn resolution(m: usize, per_dim: usize) -> usize {
        if m <= 2 {
            per_dim
        } else {
            ((4096f64).powf(1.0 / m as f64).floor() as usize).max(4)
        }
    }
}

/// Lower-level solver with the grid precomputed for one problem.
pub struct LowerLevelSolver<'p> {
    problem: &'p SipProblem,
    opts: LlOptions,
    grid: IndexGrid,
    local_box: (Vec<f64>, Vec<f64>),
}

impl<'p> LowerLevelSolver<'p> {
    pub fn new(problem: &'p SipProblem, opts: LlOptions) -> Result<Self, LowerLevelError> {
        let per_dim = IndexGrid::resolution(problem.m, opts.grid_per_dim);
        let grid = IndexGrid::new(problem, per_dim)?;
        if grid.nodes.is_empty() {
            return Err(LowerLevelError::EmptyIndexSet);
        }
        // Slightly wider than the box so the index constraints, not the
        // bounds, carry the multipliers.
        let local_box = grid
            .bbox
            .iter()
            .map(|b| {
                let pad = 0.01 * (b.hi - b.lo).max(1e-3);
                (b.lo - pad, b.hi + pad)
            })
            .unzip();
        Ok(Self {
            problem,
            opts,
            grid,
            local_box,
        })
    }

    pub fn problem(&self) -> &'p SipProblem {
        self.problem
    }

    pub fn options(&self) -> &LlOptions {
        &self.opts
    }

    pub fn grid(&self) -> &IndexGrid {
        &self.grid
    }

    /// Global solution of `Q_i(x)`.
    pub fn solve(&self, i: usize, x: &[f64]) -> Result<LowerLevelSolution, LowerLevelError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LowerLevelError::NonFinite);
        }
        let p = self.problem;
        let g = &p.si_constraints[i];
        let mut z = p.joint_point(x, &vec![0.0; p.m]);

        let mut scored: Vec<(usize, f64)> = self
            .grid
            .nodes
            .iter()
            .enumerate()
            .map(|(k, y)| {
                z[p.n..].copy_from_slice(y);
                (k, g.value(&z))
            })
            .filter(|(_, v)| v.is_finite())
            .collect();
        if scored.is_empty() {
            return Err(LowerLevelError::EmptyIndexSet);
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        let (best_node, best_node_value) = scored[0];

        let mut starts: Vec<&Vec<f64>> = Vec::new();
        for &(k, _) in &scored {
            if starts.len() >= self.opts.n_starts {
                break;
            }
            let y = &self.grid.nodes[k];
            if starts.iter().all(|s| euclidean(s, y) > 1e-3) {
                starts.push(y);
            }
        }

        let nlp_opts = NlpOptions {
            tol_kkt: self.opts.tol_kkt * 0.1,
            tol_feas: self.opts.tol_feas,
            tol_comp: self.opts.tol_kkt,
            max_iter: 100,
            ..NlpOptions::default()
        };
        let mut candidates: Vec<LocalMaximum> = Vec::new();
        for y0 in &starts {
            let local = self.local_solve(i, x, y0, &nlp_opts);
            if local.value.is_finite() && p.is_index_feasible(&local.y, self.opts.tol_feas) {
                candidates.push(local);
            }
        }
        if candidates.is_empty() {
            return Err(LowerLevelError::LocalSolvesFailed { i });
        }

        // Start order breaks ties, so equal values resolve to the best grid node.
        let mut best = 0;
        for (k, c) in candidates.iter().enumerate() {
            if c.value > candidates[best].value + self.opts.tol_tie {
                best = k;
            }
        }
        let mut winner = candidates[best].clone();
        if winner.value < best_node_value {
            winner = LocalMaximum {
                y: self.grid.nodes[best_node].clone(),
                value: best_node_value,
            };
        }
        let non_unique = candidates
            .iter()
            .any(|c| (c.value - winner.value).abs() <= self.opts.tol_tie && euclidean(&c.y, &winner.y) > 1e-4);

        let mut local_maxima: Vec<LocalMaximum> = vec![winner.clone()];
        let mut rest = candidates;
        rest.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap_or(Ordering::Equal));
        for c in rest {
            if local_maxima.iter().all(|l| euclidean(&l.y, &c.y) > 1e-6) {
                local_maxima.push(c);
            }
        }

        Ok(self.finish(i, x, winner, local_maxima, non_unique))
    }

    fn local_solve(&self, i: usize, x: &[f64], y0: &[f64], opts: &NlpOptions) -> LocalMaximum {
        let p = self.problem;
        let n = p.n;
        let m = p.m;
        let g = &p.si_constraints[i];
        let objective = move |y: &[f64]| {
            let e = g.eval(&p.joint_point(x, y));
            (-e.value, -e.gradient.rows(n, m).into_owned())
        };
        let mut nlp =
            NlpProblem::new(m, Box::new(objective)).with_bounds(self.local_box.0.clone(), self.local_box.1.clone());
        for v in &p.index_constraints {
            nlp = nlp.constraint(Box::new(move |y: &[f64]| {
                let e = v.eval(y);
                (e.value, e.gradient)
            }));
        }
        let sol = solve_nlp(&nlp, y0, opts);
        LocalMaximum {
            value: p.g_value(i, x, &sol.z),
            y: sol.z,
        }
    }

    fn finish(
        &self,
        i: usize,
        x: &[f64],
        winner: LocalMaximum,
        local_maxima: Vec<LocalMaximum>,
        non_unique: bool,
    ) -> LowerLevelSolution {
        let p = self.problem;
        let q = p.q();
        let y = &winner.y;
        let active_set: Vec<usize> = (0..q)
            .filter(|&l| p.index_constraints[l].value(y) >= -self.opts.tol_act)
            .collect();
        let ge = p.g_eval(i, x, y);
        let mut cols = DMatrix::zeros(p.m, active_set.len());
        for (c, &l) in active_set.iter().enumerate() {
            cols.set_column(c, &p.index_constraints[l].eval(y).gradient);
        }
        // grad_y g - sum mu_l grad v_l = 0  <=>  min |-grad_y g + V mu|
        let (mu_a, kkt_residual) = nonnegative_least_squares(&cols, &(-&ge.grad_y));
        let mut mu_star = vec![0.0; q];
        for (c, &l) in active_set.iter().enumerate() {
            mu_star[l] = mu_a[c];
        }
        let mut sol = LowerLevelSolution {
            i,
            x: x.to_vec(),
            y_star: winner.y.clone(),
            mu_star,
            value: winner.value,
            active_set,
            regularity: RegularityFlags::default(),
            kkt_residual,
            local_maxima,
            non_unique,
        };
        sol.regularity = check_regularity(p, &sol, &self.opts);
        sol
    }
}

/// One-shot convenience wrapper around [`LowerLevelSolver`].
pub fn solve_lower_level_global(
    p: &SipProblem,
    i: usize,
    x: &[f64],
    opts: &LlOptions,
) -> Result<LowerLevelSolution, LowerLevelError> {
    LowerLevelSolver::new(p, opts.clone())?.solve(i, x)
}

/// Pointwise check of LICQ, strict complementarity and the second-order
/// sufficient condition at `sol.y_star`.
pub fn check_regularity(p: &SipProblem, sol: &LowerLevelSolution, opts: &LlOptions) -> RegularityFlags {
    let m = p.m;
    let y = &sol.y_star;
    let grads: Vec<DVector<f64>> = sol
        .active_set
        .iter()
        .map(|&l| p.index_constraints[l].eval(y).gradient)
        .collect();

    let licq = if grads.is_empty() {
        true
    } else if grads.len() > m {
        false
    } else {
        let mat = DMatrix::from_columns(&grads);
        let sv = mat.singular_values();
        let smax = sv.max().max(1.0);
        sv.iter().filter(|&&s| s > 1e-8 * smax).count() == grads.len()
    };

    let strict_complementarity = sol.active_set.iter().all(|&l| sol.mu_star[l] >= opts.tol_sc);

    // Hessian of the lower-level Lagrangian g - sum mu_l v_l in y.
    let mut hess = p.g_eval(sol.i, &sol.x, y).hess_yy;
    for (l, v) in p.index_constraints.iter().enumerate() {
        if sol.mu_star[l] != 0.0 {
            if let Some(h) = v.eval(y).hessian {
                hess -= h * sol.mu_star[l];
            }
        }
    }
    let strong: Vec<DVector<f64>> = sol
        .active_set
        .iter()
        .zip(&grads)
        .filter(|(&l, _)| sol.mu_star[l] > opts.tol_sc)
        .map(|(_, g)| g.clone())
        .collect();
    let basis = null_space(&strong, m);
    let sosc = if basis.ncols() == 0 {
        true
    } else {
        let proj = -(basis.transpose() * &hess * &basis);
        let sym = (&proj + proj.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min() >= 1e-8
    };

    RegularityFlags {
        licq,
        strict_complementarity,
        sosc,
    }
}

/// Orthonormal basis of `{ d | g . d = 0 for all g }`.
pub(crate) fn null_space(vectors: &[DVector<f64>], m: usize) -> DMatrix<f64> {
    if vectors.is_empty() {
        return DMatrix::identity(m, m);
    }
    let mut gram = DMatrix::zeros(m, m);
    for g in vectors {
        gram += g * g.transpose();
    }
    let scale = gram.amax().max(1.0);
    let eig = SymmetricEigen::new(gram);
    let cols: Vec<DVector<f64>> = (0..m)
        .filter(|&k| eig.eigenvalues[k].abs() <= 1e-12 * scale)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(m, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)] // rounded reference values
mod tests {
    use super::*;
    use crate::model::{FieldEval, FnField};
    use crate::problems;

    #[test]
    fn example1_interior_vertex() {
        let p = problems::example1();
        let s = solve_lower_level_global(&p, 0, &[0.5, 0.0], &LlOptions::default()).unwrap();
        assert!((s.y_star[0] - 0.5).abs() < 1e-9, "{:?}", s.y_star);
        assert!((s.value - 0.25).abs() < 1e-12);
        assert_eq!(s.mu_star, vec![0.0, 0.0]);
        assert!(s.active_set.is_empty());
        assert!(s.regularity.all());
        assert!(s.kkt_residual <= 1e-9);
    }

    #[test]
    fn example1_boundary_maximizer_has_zero_multiplier() {
        // At x = (1, -1) the maximizer y = 1 sits on the bound with mu = 0.
        let p = problems::example1();
        let s = solve_lower_level_global(&p, 0, &[1.0, -1.0], &LlOptions::default()).unwrap();
        assert!((s.y_star[0] - 1.0).abs() < 1e-9);
        assert_eq!(s.active_set, vec![0]);
        assert!(s.regularity.licq);
        assert!(!s.regularity.strict_complementarity);
    }

    #[test]
    fn example2_maximizer_is_x1_squared() {
        let p = problems::example2();
        let s = solve_lower_level_global(&p, 0, &[0.707107, 0.0], &LlOptions::default()).unwrap();
        assert!((s.y_star[0] - 0.707107f64.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn design_centering_linear_over_disk() {
        let p = problems::design_centering();
        let s = solve_lower_level_global(&p, 2, &[0.0, 0.0, 1.0, 1.0, 0.0], &LlOptions::default()).unwrap();
        let norm = 17f64.sqrt() / 4.0;
        assert!((s.value - (norm - 0.75)).abs() < 1e-9, "{}", s.value);
        assert!((s.y_star[0] - 0.25 / norm).abs() < 1e-7);
        assert!((s.y_star[1] - 1.0 / norm).abs() < 1e-7);
        assert_eq!(s.active_set, vec![0]);
        assert!(s.regularity.all(), "{:?}", s.regularity);
    }

    #[test]
    fn design_centering_regular_at_solution() {
        let p = problems::design_centering();
        let x = p.known_solution.clone().unwrap().point;
        for i in 0..3 {
            let s = solve_lower_level_global(&p, i, &x, &LlOptions::default()).unwrap();
            assert!(s.value.abs() < 1e-8, "{i}: {}", s.value);
            assert!(s.mu_star[0] > 0.0);
            assert!(s.regularity.all(), "{i}: {:?}", s.regularity);
        }
    }

    #[test]
    fn duplicated_constraint_breaks_licq() {
        // max y s.t. y <= 0, -y <= 0 (Y = {0})
        let lin = |a: f64| {
            FnField::new(1, move |y: &[f64]| FieldEval {
                value: a * y[0],
                gradient: DVector::from_vec(vec![a]),
                hessian: Some(DMatrix::zeros(1, 1)),
            })
            .into_field()
        };
        let g = FnField::new(2, |z: &[f64]| FieldEval {
            value: z[1],
            gradient: DVector::from_vec(vec![0.0, 1.0]),
            hessian: Some(DMatrix::zeros(2, 2)),
        });
        let mut p = problems::example1();
        p.n = 1;
        p.si_constraints = vec![g.into_field()];
        p.index_constraints = vec![lin(1.0), lin(-1.0)];
        let sol = LowerLevelSolution {
            i: 0,
            x: vec![0.0],
            y_star: vec![0.0],
            mu_star: vec![1.0, 0.0],
            value: 0.0,
            active_set: vec![0, 1],
            regularity: RegularityFlags::default(),
            kkt_residual: 0.0,
            local_maxima: vec![],
            non_unique: false,
        };
        let flags = check_regularity(&p, &sol, &LlOptions::default());
        assert!(!flags.licq);
    }

    #[test]
    fn interval_bounds_are_recognized() {
        let p = problems::example2();
        let b = recognized_interval_bounds(&p);
        assert_eq!(b, vec![Interval::new(-1.0, 1.0)]);
    }

    #[test]
    fn disk_box_from_scan() {
        let p = problems::design_centering();
        let b = index_bounding_box(&p).unwrap();
        for iv in b {
            assert!(iv.lo < -1.0 && iv.lo > -1.3 && iv.hi > 1.0 && iv.hi < 1.3, "{iv:?}");
        }
    }

    #[test]
    fn grid_is_lexicographic_and_feasible() {
        let p = problems::design_centering();
        let grid = IndexGrid::new(&p, 16).unwrap();
        assert!(grid.nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(grid.nodes.iter().all(|y| y[0] * y[0] + y[1] * y[1] <= 1.0));
    }

    #[test]
    fn non_unique_maximizer_is_flagged() {
        // g = y^2 on [-1, 1]: maximizers at both ends.
        let mut p = problems::example1();
        p.si_constraints = vec![FnField::new(3, |z: &[f64]| FieldEval {
            value: z[2] * z[2],
            gradient: DVector::from_vec(vec![0.0, 0.0, 2.0 * z[2]]),
            hessian: Some(DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 2.0]))),
        })
        .into_field()];
        let s = solve_lower_level_global(&p, 0, &[0.0, 0.0], &LlOptions::default()).unwrap();
        assert!(s.non_unique);
        // Lowest lexicographic grid node wins.
        assert_eq!(s.y_star, vec![-1.0]);
    }
}

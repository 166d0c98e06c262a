//! Outer loops: the Blankenship–Falk exchange method and the quadratically
//! convergent adaptive discretization (QCAD).
//!
//! Both loops share the same skeleton. At iterate `x^k` every lower-level
//! problem is solved globally, the maximizers are added to the
//! discretization, and a finite master problem yields `x^{k+1}`. QCAD adds
//! one linearized Lagrangian constraint per regular constraint family to the
//! master; linearizations from earlier iterations are dropped.

use std::time::Instant;

use log::{debug, warn};
use serde::Serialize;

use crate::diagnostics::{
    compute_perturbation_params, feasibility_from, stationarity_from_solutions, MasterMultipliers,
};
use crate::lower_level::{LlOptions, LowerLevelError, LowerLevelSolution, LowerLevelSolver, RegularityFlags};
use crate::model::{euclidean, SipProblem};
use crate::nlp::{solve_nlp, NlpOptions, NlpProblem, NlpSolution, NlpStatus};
use crate::sensitivity::{compute_sensitivity, make_linearized_constraint, LinearizedConstraint};

/// Two refinement points closer than this are the same point.
pub const DUPLICATE_TOL: f64 = 1e-12;

/// The finite index sets `Y_i^k`, one per constraint family.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiscretizationState {
    pub points: Vec<Vec<Vec<f64>>>,
    pub k: usize,
}

impl DiscretizationState {
    pub fn empty(p: &SipProblem) -> Self {
        Self {
            points: vec![Vec::new(); p.p()],
            k: 0,
        }
    }

    /// Adds `y` to family `i` unless a point within [`DUPLICATE_TOL`] is
    /// already present. Returns whether it was added.
    pub fn add(&mut self, i: usize, y: &[f64]) -> bool {
        if self.points[i].iter().any(|z| euclidean(z, y) <= DUPLICATE_TOL) {
            return false;
        }
        self.points[i].push(y.to_vec());
        true
    }

    pub fn total(&self) -> usize {
        self.points.iter().map(Vec::len).sum()
    }

    /// Every point of `earlier` is present here.
    pub fn contains(&self, earlier: &DiscretizationState) -> bool {
        earlier.points.len() == self.points.len()
            && earlier
                .points
                .iter()
                .zip(&self.points)
                .all(|(a, b)| a.iter().all(|y| b.iter().any(|z| z == y)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "bf")]
    BlankenshipFalk,
    Qcad,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::BlankenshipFalk => "bf",
            Algorithm::Qcad => "qcad",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TerminationMode {
    /// Stop once `|x^k - x*| <= tol_dist`. Requires a known solution.
    Known { tol_dist: f64 },
    /// Stop once feasibility and the stationarity residual are both small.
    Practical { tol_feas: f64, tol_stat: f64 },
}

impl Default for TerminationMode {
    fn default() -> Self {
        TerminationMode::Practical {
            tol_feas: 1e-6,
            tol_stat: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriverOptions {
    pub termination: TerminationMode,
    pub max_iter: usize,
    pub lower_level: LlOptions,
    pub nlp: NlpOptions,
    /// Indices with `g_i(x, y) >= -tol_act` count as active in the
    /// stationarity residual.
    pub tol_act: f64,
    /// Also start each master solve from the center of the x box and keep
    /// the better KKT point.
    pub master_multistart: bool,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            termination: TerminationMode::default(),
            max_iter: 50,
            lower_level: LlOptions::default(),
            nlp: NlpOptions::default(),
            tol_act: 1e-6,
            master_multistart: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    ToleranceMet,
    MaxIter,
    SubsolverFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerLevelSummary {
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub value: f64,
    pub regularity: RegularityFlags,
    pub non_unique: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterateRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub objective: f64,
    pub feasibility: f64,
    pub stationarity_residual: f64,
    pub dist_to_known: Option<f64>,
    pub step_norm: Option<f64>,
    pub beta_norm: Option<f64>,
    pub alpha_max: Option<f64>,
    /// Constraints of the master problem that produced this iterate.
    pub n_master_constraints: usize,
    /// Seconds since the start of the run.
    pub wall_time: f64,
    pub lower_level: Vec<LowerLevelSummary>,
    /// Families linearized at this iterate (QCAD only).
    pub diff_indices: Vec<usize>,
    pub master_status: Option<NlpStatus>,
    pub master_multipliers: Option<MasterMultipliers>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub history: Vec<IterateRecord>,
    pub final_status: FinalStatus,
    pub final_discretization: DiscretizationState,
    pub warnings: Vec<String>,
    /// Every linearized constraint built, tagged with the iteration of its
    /// base point.
    pub linearizations: Vec<(usize, LinearizedConstraint)>,
}

impl RunResult {
    pub fn last(&self) -> &IterateRecord {
        self.history.last().expect("history is nonempty")
    }

    pub fn iterations(&self) -> usize {
        self.last().k
    }

    pub fn errors(&self) -> Option<Vec<f64>> {
        self.history.iter().map(|r| r.dist_to_known).collect()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DriverError {
    #[error("start point has {got} entries, problem has n = {n}")]
    DimensionMismatch { n: usize, got: usize },
    #[error("start point is not finite")]
    NonFinite,
    #[error("discretization has {got} families, problem has {p}")]
    DiscretizationMismatch { p: usize, got: usize },
    #[error("termination by distance needs a known solution")]
    NoKnownSolution,
    #[error(transparent)]
    LowerLevel(#[from] LowerLevelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationDecision {
    Continue,
    Stop(FinalStatus),
}

pub fn check_termination(history: &[IterateRecord], opts: &DriverOptions) -> TerminationDecision {
    let Some(r) = history.last() else {
        return TerminationDecision::Continue;
    };
    let met = match opts.termination {
        TerminationMode::Known { tol_dist } => r.dist_to_known.is_some_and(|d| d <= tol_dist),
        TerminationMode::Practical { tol_feas, tol_stat } => {
            r.feasibility <= tol_feas && r.stationarity_residual <= tol_stat
        }
    };
    if met {
        TerminationDecision::Stop(FinalStatus::ToleranceMet)
    } else if r.k >= opts.max_iter {
        TerminationDecision::Stop(FinalStatus::MaxIter)
    } else {
        TerminationDecision::Continue
    }
}

pub fn run_blankenship_falk(
    p: &SipProblem,
    x0: &[f64],
    d0: DiscretizationState,
    opts: &DriverOptions,
) -> Result<RunResult, DriverError> {
    run(Algorithm::BlankenshipFalk, p, x0, d0, opts)
}

pub fn run_qcad(
    p: &SipProblem,
    x0: &[f64],
    d0: DiscretizationState,
    opts: &DriverOptions,
) -> Result<RunResult, DriverError> {
    run(Algorithm::Qcad, p, x0, d0, opts)
}

struct MasterOutcome {
    sol: NlpSolution,
    multipliers: MasterMultipliers,
    n_constraints: usize,
}

pub fn run(
    alg: Algorithm,
    p: &SipProblem,
    x0: &[f64],
    d0: DiscretizationState,
    opts: &DriverOptions,
) -> Result<RunResult, DriverError> {
    if x0.len() != p.n {
        return Err(DriverError::DimensionMismatch { n: p.n, got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(DriverError::NonFinite);
    }
    if d0.points.len() != p.p() {
        return Err(DriverError::DiscretizationMismatch {
            p: p.p(),
            got: d0.points.len(),
        });
    }
    if matches!(opts.termination, TerminationMode::Known { .. }) && p.known_solution.is_none() {
        return Err(DriverError::NoKnownSolution);
    }
    let solver = LowerLevelSolver::new(p, opts.lower_level.clone())?;
    let start = Instant::now();

    let mut disc = d0;
    let mut x = p.clamp_x(x0);
    let mut history: Vec<IterateRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut linearizations = Vec::new();
    let mut last_master: Option<MasterOutcome> = None;
    let mut stagnant = 0usize;
    let mut k = 0usize;

    let final_status = loop {
        let sols: Result<Vec<LowerLevelSolution>, _> = (0..p.p()).map(|i| solver.solve(i, &x)).collect();
        let sols = match sols {
            Ok(s) => s,
            Err(e) => {
                warnings.push(format!("k={k}: lower-level solve failed: {e}"));
                break FinalStatus::SubsolverFailure;
            }
        };
        let feasibility = feasibility_from(&sols);
        let stat = stationarity_from_solutions(p, &x, &sols, opts.tol_act);
        let pert = last_master
            .as_ref()
            .map(|m| compute_perturbation_params(p, &x, &sols, &m.multipliers));
        for s in &sols {
            if s.non_unique {
                warnings.push(format!(
                    "k={k}: constraint {} has a non-unique lower-level maximizer",
                    s.i
                ));
            }
        }

        let mut lins = Vec::new();
        let mut diff_indices = Vec::new();
        let mut record = IterateRecord {
            k,
            objective: p.objective.value(&x),
            feasibility,
            stationarity_residual: stat.residual,
            dist_to_known: p.dist_to_known(&x),
            step_norm: history.last().map(|r| euclidean(&r.x, &x)),
            beta_norm: pert.as_ref().map(|q| q.beta_norm),
            alpha_max: pert.as_ref().map(|q| q.alpha_max()),
            n_master_constraints: last_master.as_ref().map_or(0, |m| m.n_constraints),
            wall_time: start.elapsed().as_secs_f64(),
            lower_level: sols
                .iter()
                .map(|s| LowerLevelSummary {
                    y: s.y_star.clone(),
                    mu: s.mu_star.clone(),
                    value: s.value,
                    regularity: s.regularity,
                    non_unique: s.non_unique,
                })
                .collect(),
            diff_indices: Vec::new(),
            master_status: last_master.as_ref().map(|m| m.sol.status),
            master_multipliers: last_master.as_ref().map(|m| m.multipliers.clone()),
            x: x.clone(),
        };
        debug!(
            "{} k={k} x={:?} feas={:.3e} stat={:.3e} dist={:?}",
            alg.label(),
            record.x,
            feasibility,
            stat.residual,
            record.dist_to_known
        );

        let prev_feas = history.last().map(|r| r.feasibility);
        history.push(record.clone());
        if let TerminationDecision::Stop(s) = check_termination(&history, opts) {
            break s;
        }

        if alg == Algorithm::Qcad {
            for s in &sols {
                if !s.regularity.all() {
                    warnings.push(format!(
                        "k={k}: constraint {} not linearized (licq={}, strict_complementarity={}, sosc={})",
                        s.i, s.regularity.licq, s.regularity.strict_complementarity, s.regularity.sosc
                    ));
                    continue;
                }
                match compute_sensitivity(p, s) {
                    Ok(sens) => {
                        diff_indices.push(s.i);
                        lins.push(make_linearized_constraint(s, sens));
                    }
                    Err(e) => warnings.push(format!("k={k}: constraint {} not linearized: {e}", s.i)),
                }
            }
            record.diff_indices = diff_indices.clone();
            history.last_mut().expect("just pushed").diff_indices = diff_indices;
        }

        let mut added = false;
        for s in &sols {
            added |= disc.add(s.i, &s.y_star);
        }
        disc.k = k + 1;
        let progress = prev_feas.is_none_or(|f| feasibility < f - 1e-12);
        if !added && !progress && feasibility > 1e-6 {
            stagnant += 1;
            if stagnant >= 3 {
                warnings.push(format!(
                    "k={k}: no new refinement points and no feasibility progress for 3 iterations"
                ));
                break FinalStatus::SubsolverFailure;
            }
        } else {
            stagnant = 0;
        }

        let outcome = match solve_master(p, &disc, &lins, &x, opts) {
            Some(o) => o,
            None if !lins.is_empty() => {
                warnings.push(format!(
                    "k={k}: master problem with linearized constraints failed; retried without them"
                ));
                match solve_master(p, &disc, &[], &x, opts) {
                    Some(o) => o,
                    None => {
                        warnings.push(format!("k={k}: master problem failed"));
                        break FinalStatus::SubsolverFailure;
                    }
                }
            }
            None => {
                warnings.push(format!("k={k}: master problem failed"));
                break FinalStatus::SubsolverFailure;
            }
        };
        if !outcome.sol.converged() {
            warnings.push(format!(
                "k={k}: master problem ended with status {:?} (violation {:.2e})",
                outcome.sol.status, outcome.sol.max_violation
            ));
        }
        linearizations.extend(lins.into_iter().map(|l| (k, l)));
        x = outcome.sol.z.clone();
        last_master = Some(outcome);
        k += 1;
    };

    for w in &warnings {
        warn!("{w}");
    }
    Ok(RunResult {
        algorithm: alg,
        history,
        final_status,
        final_discretization: disc,
        warnings,
        linearizations,
    })
}

/// Constraint layout: discretization points family by family, then the
/// linearized constraints, then the finite constraints.
fn build_master<'a>(
    p: &'a SipProblem,
    disc: &'a DiscretizationState,
    lins: &'a [LinearizedConstraint],
) -> NlpProblem<'a> {
    let bounds = p.master_bounds();
    let mut nlp = NlpProblem::new(
        p.n,
        Box::new(move |x: &[f64]| {
            let e = p.objective.eval(x);
            (e.value, e.gradient)
        }),
    )
    .with_bounds(
        bounds.iter().map(|b| b.lo).collect(),
        bounds.iter().map(|b| b.hi).collect(),
    );
    for (i, pts) in disc.points.iter().enumerate() {
        for y in pts {
            nlp = nlp.constraint(Box::new(move |x: &[f64]| {
                let e = p.g_eval(i, x, y);
                (e.value, e.grad_x)
            }));
        }
    }
    for lc in lins {
        nlp = nlp.constraint(Box::new(move |x: &[f64]| lc.eval(p, x)));
    }
    for c in &p.finite_constraints {
        nlp = nlp.constraint(Box::new(move |x: &[f64]| {
            let e = c.eval(x);
            (e.value, e.gradient)
        }));
    }
    nlp
}

fn solve_master(
    p: &SipProblem,
    disc: &DiscretizationState,
    lins: &[LinearizedConstraint],
    warm: &[f64],
    opts: &DriverOptions,
) -> Option<MasterOutcome> {
    let nlp = build_master(p, disc, lins);
    let mut starts = vec![warm.to_vec()];
    if opts.master_multistart {
        let center: Vec<f64> = p.master_bounds().iter().map(|b| b.mid()).collect();
        if euclidean(&center, warm) > 1e-12 {
            starts.push(center);
        }
    }
    let mut best: Option<NlpSolution> = None;
    for z0 in &starts {
        let s = solve_nlp(&nlp, z0, &opts.nlp);
        let acceptable = s.converged() || s.max_violation <= 1e-7;
        if !acceptable || !s.objective.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                (s.converged() && !b.converged())
                    || (s.converged() == b.converged() && s.objective < b.objective - 1e-9 * (1.0 + b.objective.abs()))
            }
        };
        if better {
            best = Some(s);
        }
    }
    let sol = best?;

    let mut multipliers = MasterMultipliers {
        discretization: Vec::with_capacity(p.p()),
        linearized: vec![None; p.p()],
        finite: Vec::new(),
        lower: sol.lower_multipliers.clone(),
        upper: sol.upper_multipliers.clone(),
    };
    let mut offset = 0;
    for pts in &disc.points {
        multipliers
            .discretization
            .push(sol.multipliers[offset..offset + pts.len()].to_vec());
        offset += pts.len();
    }
    for lc in lins {
        multipliers.linearized[lc.i] = Some(sol.multipliers[offset]);
        offset += 1;
    }
    multipliers.finite = sol.multipliers[offset..].to_vec();
    Some(MasterOutcome {
        n_constraints: nlp.constraints.len(),
        multipliers,
        sol,
    })
}

#[cfg(test)]
#[allow(clippy::approx_constant)] // rounded reference values
mod tests {
    use super::*;
    use crate::model::{FieldEval, FnField, Interval};
    use crate::problems;
    use nalgebra::{DMatrix, DVector};

    fn known(tol: f64, max_iter: usize) -> DriverOptions {
        DriverOptions {
            termination: TerminationMode::Known { tol_dist: tol },
            max_iter,
            ..Default::default()
        }
    }

    #[test]
    fn bf_example1_first_iterates() {
        let p = problems::example1();
        let r = run_blankenship_falk(&p, &[1.0, -1.0], DiscretizationState::empty(&p), &known(1e-9, 3)).unwrap();
        let h = &r.history;
        assert_eq!(h[0].x, vec![1.0, -1.0]);
        assert!((h[0].lower_level[0].y[0] - 1.0).abs() < 1e-9);
        assert!(euclidean(&h[1].x, &[0.0, -1.0]) < 1e-7, "{:?}", h[1].x);
        assert!(h[1].lower_level[0].y[0].abs() < 1e-9);
    }

    #[test]
    fn qcad_example2_table() {
        let p = problems::example2();
        let r = run_qcad(&p, &[1.0, -1.0], DiscretizationState::empty(&p), &known(1e-4, 50)).unwrap();
        let xs: Vec<_> = r.history.iter().map(|h| h.x.clone()).collect();
        assert!(euclidean(&xs[1], &[0.0, -1.0]) <= 1e-8, "{xs:?}");
        assert!(euclidean(&xs[2], &[0.707107, 0.0]) < 1e-3, "{xs:?}");
        assert!(euclidean(&xs[3], &[0.573761, 0.108057]) < 1e-3, "{xs:?}");
        assert!(euclidean(&xs[4], &[0.57735, 0.111111]) < 1e-4, "{xs:?}");
        assert_eq!(r.final_status, FinalStatus::ToleranceMet);
        assert!(r.warnings.iter().any(|w| w.contains("not linearized")));
    }

    #[test]
    fn discretization_is_nested_and_deduplicated() {
        let p = problems::example1();
        let mut d = DiscretizationState::empty(&p);
        assert!(d.add(0, &[0.5]));
        let before = d.clone();
        assert!(!d.add(0, &[0.5 + 1e-13]));
        assert!(d.add(0, &[0.25]));
        assert!(d.contains(&before));
        assert!(!before.contains(&d));
    }

    #[test]
    fn termination_policy() {
        let p = problems::example1();
        let r = run_blankenship_falk(&p, &[1.0, -1.0], DiscretizationState::empty(&p), &known(1e-9, 2)).unwrap();
        assert_eq!(r.final_status, FinalStatus::MaxIter);
        assert_eq!(r.iterations(), 2);
        let mut rec = r.history[0].clone();
        rec.dist_to_known = Some(2.2e-7);
        assert_eq!(
            check_termination(&[rec.clone()], &known(1e-4, 50)),
            TerminationDecision::Stop(FinalStatus::ToleranceMet)
        );
        rec.feasibility = 1e-3;
        rec.stationarity_residual = 0.0;
        assert_eq!(
            check_termination(&[rec], &DriverOptions::default()),
            TerminationDecision::Continue
        );
    }

    #[test]
    fn known_mode_needs_known_solution() {
        let mut p = problems::example1();
        p.known_solution = None;
        let e = run_qcad(&p, &[1.0, -1.0], DiscretizationState::empty(&p), &known(1e-4, 5));
        assert_eq!(e.unwrap_err(), DriverError::NoKnownSolution);
        let e = run_qcad(&p, &[1.0], DiscretizationState::empty(&p), &DriverOptions::default());
        assert!(matches!(e, Err(DriverError::DimensionMismatch { .. })));
    }

    fn x_independent() -> SipProblem {
        // g = -y^2 - x1 over Y = [-1, 1]; y* = 0 for every x.
        let g = FnField::new(2, |z| FieldEval {
            value: -z[1] * z[1] - z[0],
            gradient: DVector::from_vec(vec![-1.0, -2.0 * z[1]]),
            hessian: Some(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -2.0])),
        })
        .into_field();
        let v1 = FnField::new(1, |y| FieldEval {
            value: y[0] - 1.0,
            gradient: DVector::from_vec(vec![1.0]),
            hessian: Some(DMatrix::zeros(1, 1)),
        })
        .into_field();
        let v2 = FnField::new(1, |y| FieldEval {
            value: -y[0] - 1.0,
            gradient: DVector::from_vec(vec![-1.0]),
            hessian: Some(DMatrix::zeros(1, 1)),
        })
        .into_field();
        let f = FnField::new(1, |x| FieldEval {
            value: x[0],
            gradient: DVector::from_vec(vec![1.0]),
            hessian: Some(DMatrix::zeros(1, 1)),
        })
        .into_field();
        SipProblem {
            name: "x_independent".into(),
            n: 1,
            m: 1,
            objective: f,
            si_constraints: vec![g],
            index_constraints: vec![v1, v2],
            finite_constraints: vec![],
            x_bounds: vec![Interval::new(-1.0, 1.0)],
            known_solution: None,
            initial_point: None,
        }
    }

    #[test]
    fn exact_linearization_converges_in_one_step() {
        let p = x_independent();
        let r = run_qcad(&p, &[1.0], DiscretizationState::empty(&p), &DriverOptions::default()).unwrap();
        assert_eq!(r.final_status, FinalStatus::ToleranceMet);
        assert_eq!(r.iterations(), 1);
        assert!(r.last().x[0].abs() < 1e-9);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = problems::design_centering();
        let x0 = p.initial_point.clone().unwrap();
        let a = run_qcad(&p, &x0, DiscretizationState::empty(&p), &known(1e-4, 10)).unwrap();
        let b = run_qcad(&p, &x0, DiscretizationState::empty(&p), &known(1e-4, 10)).unwrap();
        let xa: Vec<_> = a.history.iter().map(|h| h.x.clone()).collect();
        let xb: Vec<_> = b.history.iter().map(|h| h.x.clone()).collect();
        assert_eq!(xa, xb);
    }
}

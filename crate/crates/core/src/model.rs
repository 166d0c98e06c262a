//! Problem representation for semi-infinite programs.
//!
//! A [`SipProblem`] is
//!
//! ```text
//!     minimize     f(x)
//!     subject to   g_i(x, y) <= 0   for all i, all y in Y
//!                  c_j(x) <= 0      (finite constraints)
//!                  lo <= x <= hi
//! ```
//!
//! with `Y = { y | v_l(y) <= 0 }`. Every function is a [`ScalarField`] that
//! returns its value together with derivatives. Semi-infinite constraints take
//! the concatenated point `[x; y]`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// Value, gradient and (optionally) Hessian of a scalar function at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

impl FieldEval {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.as_ref().is_none_or(|h| h.iter().all(|v| v.is_finite()))
    }
}

/// A twice differentiable function `R^arity -> R`.
///
/// Implementations must be pure: the same point always produces bit-identical
/// output. Evaluation outside the function's domain yields non-finite values
/// rather than an error; callers check [`FieldEval::is_finite`].
pub trait ScalarField: Send + Sync {
    fn arity(&self) -> usize;

    fn eval(&self, point: &[f64]) -> FieldEval;

    fn value(&self, point: &[f64]) -> f64 {
        self.eval(point).value
    }
}

pub type Field = Arc<dyn ScalarField>;

type EvalFn = dyn Fn(&[f64]) -> FieldEval + Send + Sync;
type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A [`ScalarField`] backed by closures. Used for hand-coded problems.
pub struct FnField {
    arity: usize,
    eval: Box<EvalFn>,
    value: Option<Box<ValueFn>>,
}

impl FnField {
    pub fn new(arity: usize, eval: impl Fn(&[f64]) -> FieldEval + Send + Sync + 'static) -> Self {
        Self {
            arity,
            eval: Box::new(eval),
            value: None,
        }
    }

    /// Supplies a cheaper value-only evaluation used by grid scans.
    pub fn with_value(mut self, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.value = Some(Box::new(value));
        self
    }

    pub fn into_field(self) -> Field {
        Arc::new(self)
    }
}

impl ScalarField for FnField {
    fn arity(&self) -> usize {
        self.arity
    }

    fn eval(&self, point: &[f64]) -> FieldEval {
        (self.eval)(point)
    }

    fn value(&self, point: &[f64]) -> f64 {
        match &self.value {
            Some(v) => v(point),
            None => (self.eval)(point).value,
        }
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField").field("arity", &self.arity).finish()
    }
}

/// Closed interval; either end may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Default box used when a problem leaves x unbounded.
pub const DEFAULT_X_BOUND: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct KnownSolution {
    pub point: Vec<f64>,
    pub objective: Option<f64>,
}

/// A semi-infinite program. Immutable after construction.
#[derive(Clone)]
pub struct SipProblem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub objective: Field,
    pub si_constraints: Vec<Field>,
    pub index_constraints: Vec<Field>,
    pub finite_constraints: Vec<Field>,
    pub x_bounds: Vec<Interval>,
    pub known_solution: Option<KnownSolution>,
    /// Starting point used by the CLI when none is given.
    pub initial_point: Option<Vec<f64>>,
}

impl fmt::Debug for SipProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SipProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.si_constraints.len())
            .field("q", &self.index_constraints.len())
            .field("x_bounds", &self.x_bounds)
            .finish()
    }
}

impl SipProblem {
    /// Number of semi-infinite constraint families.
    pub fn p(&self) -> usize {
        self.si_constraints.len()
    }

    /// Number of index-set constraints.
    pub fn q(&self) -> usize {
        self.index_constraints.len()
    }

    /// x bounds with infinite ends replaced by the default master box.
    pub fn master_bounds(&self) -> Vec<Interval> {
        self.x_bounds
            .iter()
            .map(|b| {
                Interval::new(
                    if b.lo.is_finite() { b.lo } else { -DEFAULT_X_BOUND },
                    if b.hi.is_finite() { b.hi } else { DEFAULT_X_BOUND },
                )
            })
            .collect()
    }

    pub fn clamp_x(&self, x: &[f64]) -> Vec<f64> {
        self.master_bounds().iter().zip(x).map(|(b, &v)| b.clamp(v)).collect()
    }

    pub fn joint_point(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n + self.m);
        z.extend_from_slice(x);
        z.extend_from_slice(y);
        z
    }

    pub fn g_value(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        self.si_constraints[i].value(&self.joint_point(x, y))
    }

    pub fn g_eval(&self, i: usize, x: &[f64], y: &[f64]) -> SplitEval {
        SplitEval::split(self.si_constraints[i].eval(&self.joint_point(x, y)), self.n)
    }

    pub fn is_index_feasible(&self, y: &[f64], tol: f64) -> bool {
        self.index_constraints.iter().all(|v| v.value(y) <= tol)
    }

    pub fn dist_to_known(&self, x: &[f64]) -> Option<f64> {
        self.known_solution.as_ref().map(|k| euclidean(&k.point, x))
    }
}

/// Evaluation of `g_i` split into its x- and y-blocks.
#[derive(Clone, Debug)]
pub struct SplitEval {
    pub value: f64,
    /// D_1 g (gradient in x)
    pub grad_x: DVector<f64>,
    /// D_2 g (gradient in y)
    pub grad_y: DVector<f64>,
    /// D^2_yy g, m x m
    pub hess_yy: DMatrix<f64>,
    /// D^2_yx g, m x n
    pub hess_yx: DMatrix<f64>,
}

impl SplitEval {
    pub fn split(e: FieldEval, n: usize) -> Self {
        let total = e.gradient.len();
        let m = total - n;
        let hess = e
            .hessian
            .unwrap_or_else(|| DMatrix::from_element(total, total, f64::NAN));
        Self {
            value: e.value,
            grad_x: e.gradient.rows(0, n).into_owned(),
            grad_y: e.gradient.rows(n, m).into_owned(),
            hess_yy: hess.view((n, n), (m, m)).into_owned(),
            hess_yx: hess.view((n, 0), (m, n)).into_owned(),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValidationIssue {
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    MissingDerivatives {
        what: String,
    },
    NonFinite {
        what: String,
    },
    EmptyIndexSet,
    UnboundedIndexSet {
        witness: Vec<f64>,
    },
    BadBounds {
        coordinate: usize,
    },
    KnownSolutionDimension {
        found: usize,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimensionMismatch { what, expected, found } => {
                write!(f, "{what}: expected dimension {expected}, found {found}")
            }
            Self::MissingDerivatives { what } => write!(f, "{what}: missing Hessian"),
            Self::NonFinite { what } => write!(f, "{what}: non-finite evaluation at probe point"),
            Self::EmptyIndexSet => write!(f, "index set has no feasible probe point"),
            Self::UnboundedIndexSet { witness } => {
                write!(f, "index set is unbounded (feasible point {witness:?})")
            }
            Self::BadBounds { coordinate } => write!(f, "x bound {} has lo > hi", coordinate + 1),
            Self::KnownSolutionDimension { found } => {
                write!(f, "known solution has dimension {found}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

fn check_field(
    issues: &mut Vec<ValidationIssue>,
    what: String,
    field: &Field,
    arity: usize,
    probe: &[f64],
    need_hessian: bool,
) {
    if field.arity() != arity {
        issues.push(ValidationIssue::DimensionMismatch {
            what,
            expected: arity,
            found: field.arity(),
        });
        return;
    }
    let e = field.eval(probe);
    if e.gradient.len() != arity {
        issues.push(ValidationIssue::DimensionMismatch {
            what: format!("{what} gradient"),
            expected: arity,
            found: e.gradient.len(),
        });
        return;
    }
    match &e.hessian {
        Some(h) if h.nrows() != arity || h.ncols() != arity => {
            issues.push(ValidationIssue::DimensionMismatch {
                what: format!("{what} Hessian"),
                expected: arity,
                found: h.nrows().max(h.ncols()),
            });
            return;
        }
        None if need_hessian => {
            issues.push(ValidationIssue::MissingDerivatives { what });
            return;
        }
        _ => {}
    }
    if !e.is_finite() {
        issues.push(ValidationIssue::NonFinite { what });
    }
}

/// Radii at which a feasible index point counts as evidence that Y is unbounded.
const UNBOUNDED_PROBE_RADII: [f64; 3] = [1e2, 1e4, 1e6];

/// Checks dimensions, derivative availability and boundedness of `Y`.
pub fn validate_problem(p: &SipProblem) -> ValidationReport {
    let mut issues = Vec::new();
    let bounds = p.master_bounds();
    if p.x_bounds.len() != p.n {
        issues.push(ValidationIssue::DimensionMismatch {
            what: "x_bounds".into(),
            expected: p.n,
            found: p.x_bounds.len(),
        });
    }
    for (j, b) in p.x_bounds.iter().enumerate() {
        if b.lo > b.hi {
            issues.push(ValidationIssue::BadBounds { coordinate: j });
        }
    }
    let x_probe: Vec<f64> = (0..p.n)
        .map(|j| bounds.get(j).map_or(0.0, |b| b.lo + 0.37 * (b.hi - b.lo)))
        .collect();
    let y_probe = vec![0.1; p.m];
    let xy_probe = p.joint_point(&x_probe, &y_probe);

    check_field(&mut issues, "objective".into(), &p.objective, p.n, &x_probe, false);
    for (i, g) in p.si_constraints.iter().enumerate() {
        check_field(
            &mut issues,
            format!("si_constraint {}", i + 1),
            g,
            p.n + p.m,
            &xy_probe,
            true,
        );
    }
    for (l, v) in p.index_constraints.iter().enumerate() {
        check_field(
            &mut issues,
            format!("index_constraint {}", l + 1),
            v,
            p.m,
            &y_probe,
            true,
        );
    }
    for (j, c) in p.finite_constraints.iter().enumerate() {
        check_field(
            &mut issues,
            format!("finite_constraint {}", j + 1),
            c,
            p.n,
            &x_probe,
            false,
        );
    }
    if let Some(k) = &p.known_solution {
        if k.point.len() != p.n {
            issues.push(ValidationIssue::KnownSolutionDimension { found: k.point.len() });
        }
    }

    let index_ok = p.index_constraints.iter().all(|v| v.arity() == p.m);
    if index_ok && p.m > 0 {
        if let Some(w) = far_feasible_point(p) {
            issues.push(ValidationIssue::UnboundedIndexSet { witness: w });
        } else if crate::lower_level::scan_feasible_hull(p, 10.0, 64).is_none() {
            issues.push(ValidationIssue::EmptyIndexSet);
        }
    }
    ValidationReport { issues }
}

/// Probes axis and diagonal directions far from the origin for feasible index points.
fn far_feasible_point(p: &SipProblem) -> Option<Vec<f64>> {
    let m = p.m;
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for j in 0..m {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; m];
            d[j] = s;
            dirs.push(d);
        }
    }
    if m <= 4 {
        for mask in 0..(1usize << m) {
            let d: Vec<f64> = (0..m)
                .map(|j| if mask & (1 << j) != 0 { 1.0 } else { -1.0 } / (m as f64).sqrt())
                .collect();
            dirs.push(d);
        }
    }
    let r = *UNBOUNDED_PROBE_RADII.last().unwrap();
    for d in &dirs {
        let feasible_everywhere = UNBOUNDED_PROBE_RADII.iter().all(|&r| {
            let y: Vec<f64> = d.iter().map(|c| c * r).collect();
            p.is_index_feasible(&y, 0.0)
        });
        if feasible_everywhere {
            return Some(d.iter().map(|c| c * r).collect());
        }
    }
    None
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DerivativeCheckError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("probe point {index} has dimension {found}, field arity is {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("evaluation failed at probe point {index}")]
    Evaluation { index: usize },
}

/// Largest relative deviation of the supplied gradient and Hessian from
/// central differences with step `h`.
///
/// The gradient is compared against differences of the value; the Hessian
/// against differences of the supplied gradient. Errors are scaled by
/// `max(1, |reference|)` per entry.
pub fn verify_derivatives(field: &dyn ScalarField, points: &[Vec<f64>], h: f64) -> Result<f64, DerivativeCheckError> {
    if !(h > 0.0) {
        return Err(DerivativeCheckError::BadStep(h));
    }
    let d = field.arity();
    let mut worst = 0.0f64;
    for (index, pt) in points.iter().enumerate() {
        if pt.len() != d {
            return Err(DerivativeCheckError::Dimension {
                index,
                expected: d,
                found: pt.len(),
            });
        }
        let base = field.eval(pt);
        if !base.is_finite() || base.gradient.len() != d {
            return Err(DerivativeCheckError::Evaluation { index });
        }
        let mut probe = pt.clone();
        for j in 0..d {
            probe[j] = pt[j] + h;
            let plus = field.eval(&probe);
            probe[j] = pt[j] - h;
            let minus = field.eval(&probe);
            probe[j] = pt[j];
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DerivativeCheckError::Evaluation { index });
            }
            let fd = (plus.value - minus.value) / (2.0 * h);
            worst = worst.max(rel_err(base.gradient[j], fd));
            if let (Some(hess), Some(_), Some(_)) = (&base.hessian, &plus.hessian, &minus.hessian) {
                for r in 0..d {
                    let fd2 = (plus.gradient[r] - minus.gradient[r]) / (2.0 * h);
                    worst = worst.max(rel_err(hess[(r, j)], fd2));
                }
            }
        }
    }
    Ok(worst)
}

fn rel_err(supplied: f64, reference: f64) -> f64 {
    (supplied - reference).abs() / reference.abs().max(1.0)
}

/// Deterministic low-discrepancy points in a box (Halton sequence).
pub fn halton_points(bounds: &[Interval], count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    (1..=count as u64)
        .map(|idx| {
            bounds
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let base = PRIMES[j % PRIMES.len()];
                    let mut f = 1.0;
                    let mut r = 0.0;
                    let mut i = idx;
                    while i > 0 {
                        f /= base as f64;
                        r += f * (i % base) as f64;
                        i /= base;
                    }
                    b.lo + r * (b.hi - b.lo)
                })
                .collect()
        })
        .collect()
}

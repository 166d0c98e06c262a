//! Registry of benchmark problems with hand-coded derivatives.
//!
//! * `example1`: a two-dimensional problem whose lower-level maximizer is
//!   `y = x1`; Blankenship–Falk bisects towards `(1/3, 1/9)`.
//! * `example2`: the same problem with `x1` replaced by `x1^2`.
//! * `design_centering`: the largest ellipse inside a triangle. The volume
//!   `pi * x3 * x4` is maximized, so the stored objective is its negation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::model::{FieldEval, FnField, Interval, KnownSolution, SipProblem};

pub const REGISTRY_NAMES: [&str; 3] = ["example1", "example2", "design_centering"];

pub type Constructor = fn() -> SipProblem;

pub fn registry() -> Vec<(&'static str, Constructor)> {
    vec![
        ("example1", example1 as fn() -> SipProblem),
        ("example2", example2),
        ("design_centering", design_centering),
    ]
}

pub fn by_name(name: &str) -> Option<SipProblem> {
    registry().into_iter().find(|(n, _)| *n == name).map(|(_, ctor)| ctor())
}

fn eval(value: f64, gradient: Vec<f64>, hessian: Option<DMatrix<f64>>) -> FieldEval {
    FieldEval {
        value,
        gradient: DVector::from_vec(gradient),
        hessian,
    }
}

/// `Y = [-1, 1]` written as `y - 1 <= 0`, `-y - 1 <= 0`.
fn unit_interval_constraints() -> Vec<crate::model::Field> {
    vec![
        FnField::new(1, |y| eval(y[0] - 1.0, vec![1.0], Some(DMatrix::zeros(1, 1)))).into_field(),
        FnField::new(1, |y| eval(-y[0] - 1.0, vec![-1.0], Some(DMatrix::zeros(1, 1)))).into_field(),
    ]
}

pub fn example1() -> SipProblem {
    let objective = FnField::new(2, |x| eval(-x[0] + 1.5 * x[1], vec![-1.0, 1.5], None));
    // z = (x1, x2, y)
    let g = FnField::new(3, |z| {
        let (x1, x2, y) = (z[0], z[1], z[2]);
        let hess = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0, 0.0, -2.0]);
        eval(
            -y * y + 2.0 * y * x1 - x2,
            vec![2.0 * y, -1.0, -2.0 * y + 2.0 * x1],
            Some(hess),
        )
    })
    .with_value(|z| -z[2] * z[2] + 2.0 * z[2] * z[0] - z[1]);
    SipProblem {
        name: "example1".into(),
        n: 2,
        m: 1,
        objective: objective.into_field(),
        si_constraints: vec![g.into_field()],
        index_constraints: unit_interval_constraints(),
        finite_constraints: vec![],
        x_bounds: vec![Interval::new(-1.0, 1.0); 2],
        known_solution: Some(KnownSolution {
            point: vec![1.0 / 3.0, 1.0 / 9.0],
            objective: Some(-1.0 / 3.0 + 1.5 / 9.0),
        }),
        initial_point: Some(vec![1.0, -1.0]),
    }
}

pub fn example2() -> SipProblem {
    let objective = FnField::new(2, |x| eval(-x[0] * x[0] + 1.5 * x[1], vec![-2.0 * x[0], 1.5], None));
    let g = FnField::new(3, |z| {
        let (x1, x2, y) = (z[0], z[1], z[2]);
        let hess = DMatrix::from_row_slice(3, 3, &[4.0 * y, 0.0, 4.0 * x1, 0.0, 0.0, 0.0, 4.0 * x1, 0.0, -2.0]);
        eval(
            -y * y + 2.0 * y * x1 * x1 - x2,
            vec![4.0 * y * x1, -1.0, -2.0 * y + 2.0 * x1 * x1],
            Some(hess),
        )
    })
    .with_value(|z| -z[2] * z[2] + 2.0 * z[2] * z[0] * z[0] - z[1]);
    let x1 = 1.0 / 3f64.sqrt();
    SipProblem {
        name: "example2".into(),
        n: 2,
        m: 1,
        objective: objective.into_field(),
        si_constraints: vec![g.into_field()],
        index_constraints: unit_interval_constraints(),
        finite_constraints: vec![],
        x_bounds: vec![Interval::new(0.0, 1.0), Interval::new(-1.0, 1.0)],
        known_solution: Some(KnownSolution {
            point: vec![x1, 1.0 / 9.0],
            objective: Some(-1.0 / 3.0 + 1.5 / 9.0),
        }),
        initial_point: Some(vec![1.0, -1.0]),
    }
}

/// Triangle side `a . t + b <= 0` composed with the ellipse map
/// `t(x, y) = A(x) y + c(x)`, `A = [[x3, x5], [0, x4]]`, `c = (x1, x2)`.
fn triangle_side(a: [f64; 2], b: f64) -> FnField {
    let [a1, a2] = a;
    let value = move |z: &[f64]| {
        let t1 = z[2] * z[5] + z[4] * z[6] + z[0];
        let t2 = z[3] * z[6] + z[1];
        a1 * t1 + a2 * t2 + b
    };
    FnField::new(7, move |z| {
        let (y1, y2) = (z[5], z[6]);
        let gradient = vec![a1, a2, a1 * y1, a2 * y2, a1 * y2, a1 * z[2], a1 * z[4] + a2 * z[3]];
        let mut hess = DMatrix::zeros(7, 7);
        for (r, c, v) in [(2, 5, a1), (4, 6, a1), (3, 6, a2)] {
            hess[(r, c)] = v;
            hess[(c, r)] = v;
        }
        eval(value(z), gradient, Some(hess))
    })
    .with_value(value)
}

pub fn design_centering() -> SipProblem {
    let objective = FnField::new(5, |x| {
        eval(-PI * x[2] * x[3], vec![0.0, 0.0, -PI * x[3], -PI * x[2], 0.0], None)
    });
    let disk = FnField::new(2, |y| {
        eval(
            y[0] * y[0] + y[1] * y[1] - 1.0,
            vec![2.0 * y[0], 2.0 * y[1]],
            Some(DMatrix::from_diagonal_element(2, 2, 2.0)),
        )
    });
    let s3 = 3f64.sqrt();
    let x_star = vec![5.0 / 3.0, -1.0 / 3.0, 4.0 * s3 / 3.0, 2.0 / 3.0, -4.0 / 3.0];
    let f_star = -PI * x_star[2] * x_star[3];
    SipProblem {
        name: "design_centering".into(),
        n: 5,
        m: 2,
        objective: objective.into_field(),
        si_constraints: vec![
            triangle_side([-1.0, 0.0], -1.0).into_field(),
            triangle_side([0.0, -1.0], -1.0).into_field(),
            triangle_side([0.25, 1.0], -0.75).into_field(),
        ],
        index_constraints: vec![disk.into_field()],
        finite_constraints: vec![],
        x_bounds: vec![
            Interval::new(-10.0, 10.0),
            Interval::new(-10.0, 10.0),
            Interval::new(1e-4, 10.0),
            Interval::new(1e-4, 10.0),
            Interval::new(-10.0, 10.0),
        ],
        known_solution: Some(KnownSolution {
            point: x_star,
            objective: Some(f_star),
        }),
        initial_point: Some(vec![0.0, 0.0, 1.0, 1.0, 0.0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{halton_points, validate_problem, verify_derivatives};

    #[test]
    fn registry_has_exactly_the_three_problems() {
        let names: Vec<_> = registry().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, REGISTRY_NAMES);
        assert!(by_name("nosuch").is_none());
    }

    #[test]
    fn every_problem_validates() {
        for (name, ctor) in registry() {
            let report = validate_problem(&ctor());
            assert!(report.is_valid(), "{name}: {:?}", report.issues);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for (name, ctor) in registry() {
            let p = ctor();
            let mut boxes = p.master_bounds();
            boxes.extend(std::iter::repeat_n(Interval::new(-1.0, 1.0), p.m));
            let xy_pts = halton_points(&boxes, 100);
            let x_pts: Vec<Vec<f64>> = xy_pts.iter().map(|z| z[..p.n].to_vec()).collect();
            let y_pts: Vec<Vec<f64>> = xy_pts.iter().map(|z| z[p.n..].to_vec()).collect();
            let mut worst = verify_derivatives(p.objective.as_ref(), &x_pts, 1e-5).unwrap();
            for g in &p.si_constraints {
                worst = worst.max(verify_derivatives(g.as_ref(), &xy_pts, 1e-5).unwrap());
            }
            for v in &p.index_constraints {
                worst = worst.max(verify_derivatives(v.as_ref(), &y_pts, 1e-5).unwrap());
            }
            assert!(worst <= 1e-5, "{name}: {worst}");
        }
    }

    #[test]
    fn example1_g_vanishes_at_active_index() {
        let p = example1();
        assert!(p.g_value(0, &[1.0 / 3.0, 1.0 / 9.0], &[1.0 / 3.0]).abs() < 1e-15);
    }

    #[test]
    fn example1_gradient_matches_hand_formula() {
        let p = example1();
        let e = p.g_eval(0, &[0.5, 0.0], &[0.3]);
        // (2y, -1, -2y + 2 x1)
        assert!((e.grad_x[0] - 0.6).abs() < 1e-15);
        assert!((e.grad_x[1] + 1.0).abs() < 1e-15);
        assert!((e.grad_y[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn known_solution_of_example2_matches_limit() {
        let p = example2();
        let k = p.known_solution.unwrap();
        assert!((k.point[0] - 0.57735).abs() < 5e-6);
        assert!((k.point[1] - 0.111111).abs() < 5e-6);
    }

    #[test]
    fn design_centering_objective_at_solution() {
        let p = design_centering();
        let k = p.known_solution.unwrap();
        let f = p.objective.value(&k.point);
        assert!((f + 4.8368).abs() < 1e-4, "{f}");
    }

    #[test]
    fn evaluations_are_pure() {
        let p = design_centering();
        let z = [0.3, -0.2, 1.1, 0.9, 0.4, 0.6, -0.7];
        assert_eq!(p.si_constraints[2].eval(&z), p.si_constraints[2].eval(&z));
    }
}

use sip_core::diagnostics::{feasibility_measure, solve_all};
use sip_core::driver::{run, Algorithm, DiscretizationState, DriverOptions, RunResult, TerminationMode};
use sip_core::lower_level::{LlOptions, LowerLevelSolver};
use sip_core::model::{euclidean, SipProblem};
use sip_core::problems;

fn solve(alg: Algorithm, p: &SipProblem, tol_dist: f64, max_iter: usize) -> RunResult {
    let opts = DriverOptions {
        termination: TerminationMode::Known { tol_dist },
        max_iter,
        ..DriverOptions::default()
    };
    let x0 = p.initial_point.clone().unwrap();
    run(alg, p, &x0, DiscretizationState::empty(p), &opts).unwrap()
}

#[test]
fn qcad_tail_is_quadratic() {
    for p in [problems::example2(), problems::design_centering()] {
        let e = solve(Algorithm::Qcad, &p, 1e-4, 50).errors().unwrap();
        assert!(e.len() >= 4, "{}: {e:?}", p.name);
        for w in e[e.len() - 3..].windows(2) {
            assert!(w[1] <= 100.0 * w[0] * w[0], "{}: {e:?}", p.name);
        }
    }
}

#[test]
fn bf_example1_ratios_reflect_bisection() {
    // Past about k = 22 the remaining cut violation drops below the master
    // tolerance and the iterates freeze, so stop at 20.
    let e = solve(Algorithm::BlankenshipFalk, &problems::example1(), 0.0, 20)
        .errors()
        .unwrap();
    for k in 5..e.len() - 1 {
        let r = e[k + 1] / e[k];
        assert!((0.2..=0.9).contains(&r), "k={k}: ratio {r}");
    }
    assert!(e[20] > 1e-7);
}

#[test]
fn bf_design_centering_iteration_band() {
    let r = solve(Algorithm::BlankenshipFalk, &problems::design_centering(), 1e-4, 50);
    assert!((10..=18).contains(&r.iterations()), "{} iterations", r.iterations());
    assert!(r.last().dist_to_known.unwrap() < 1e-4);
}

#[test]
fn qcad_is_faster_than_bf_on_every_registry_problem() {
    for (name, make) in problems::registry() {
        let p = make();
        let q = solve(Algorithm::Qcad, &p, 1e-4, 50);
        let b = solve(Algorithm::BlankenshipFalk, &p, 1e-4, 50);
        assert!(
            q.iterations() <= b.iterations(),
            "{name}: {} vs {}",
            q.iterations(),
            b.iterations()
        );
    }
}

#[test]
fn example2_beta_shrinks_with_the_step() {
    let r = solve(Algorithm::Qcad, &problems::example2(), 1e-4, 50);
    let h = &r.history;
    assert_eq!(h.len(), 5);
    for k in 3..=4 {
        let step = euclidean(&h[k].x, &h[k - 1].x);
        let beta = h[k].beta_norm.unwrap();
        assert!(beta <= 100.0 * step * step, "k={k}: beta {beta}, step {step}");
    }
    let tail: Vec<f64> = h[2..].iter().map(|r| r.beta_norm.unwrap()).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]), "{tail:?}");
    assert!(*tail.last().unwrap() <= 1e-4);
}

#[test]
fn limits_are_feasible() {
    for (name, make) in problems::registry() {
        let p = make();
        let r = solve(Algorithm::Qcad, &p, 1e-4, 50);
        let feas = feasibility_measure(&p, &r.last().x).unwrap();
        assert!(feas <= 1e-6, "{name}: {feas}");
    }
}

#[test]
fn feasibility_measure_reproduced_at_argmax() {
    let p = problems::design_centering();
    let solver = LowerLevelSolver::new(&p, LlOptions::default()).unwrap();
    let x = [0.3, -0.2, 1.5, 0.8, 0.1];
    let sols = solve_all(&solver, &x).unwrap();
    let best = sols
        .iter()
        .map(|s| p.g_value(s.i, &x, &s.y_star))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((feasibility_measure(&p, &x).unwrap() - best).abs() <= 1e-12);
}

#[test]
fn iterates_satisfy_their_master_cuts() {
    for (name, make) in problems::registry() {
        let p = make();
        let r = solve(Algorithm::Qcad, &p, 1e-4, 50);
        for (k, lc) in &r.linearizations {
            let Some(next) = r.history.get(k + 1) else { continue };
            let (g, _) = lc.eval(&p, &next.x);
            assert!(g <= 1e-6, "{name} k={k}: G = {g}");
            assert!(p.g_value(lc.i, &next.x, &lc.y_base) <= 1e-6, "{name} k={k}");
        }
    }
}

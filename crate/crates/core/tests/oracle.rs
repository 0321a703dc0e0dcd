//! Matrix-free solvers against the dense space-time reference on 8x8, nt=4.

mod common;

use common::*;

const TOL: f64 = 1e-8;

const SYMMETRIC: &str = r#"
[costs]
alpha = 0.5
[[regions.followers]]
control = [0.55, 0.9, 0.1, 0.45]
core = [0.0, 1.0, 0.0, 1.0]
[[regions.followers]]
control = [0.55, 0.9, 0.55, 0.9]
core = [0.0, 1.0, 0.0, 1.0]
"#;

fn both_schemes(extra: &str, check: impl Fn(&Dense, &oldnash::runner::Scenario)) {
    for scheme in ["ode", "trapezoid"] {
        let s = small_scenario(scheme, extra);
        let d = Dense::new(&s.model);
        check(&d, &s);
    }
}

#[test]
fn forward_map() {
    both_schemes("", |d, s| {
        let e = forward_error(d, s, 1);
        assert!(e < TOL, "{:?}: {e:e}", s.model.scheme);
    });
}

#[test]
fn backward_solve_is_the_transpose() {
    both_schemes("", |d, s| {
        let e = adjoint_error(d, s, 2);
        assert!(e < TOL, "{:?}: {e:e}", s.model.scheme);
    });
}

#[test]
fn follower_operator() {
    both_schemes("", |d, s| {
        let e = apply_a_error(d, s, 3);
        assert!(e < TOL, "{:?}: {e:e}", s.model.scheme);
    });
}

#[test]
fn nash_solve_gmres() {
    both_schemes("[costs]\nalphas = [0.3, 0.05]\n", |d, s| {
        let (sol, rhs) = nash_errors(d, s, 4);
        assert!(rhs < TOL, "rhs {rhs:e}");
        assert!(sol < TOL, "{:?}: {sol:e}", s.model.scheme);
    });
}

#[test]
fn nash_solve_cg() {
    both_schemes(SYMMETRIC, |d, s| {
        assert!(s.cost.symmetric());
        let (sol, rhs) = nash_errors(d, s, 5);
        assert!(rhs < TOL && sol < TOL, "{sol:e} {rhs:e}");
    });
}

#[test]
fn coupled_leader_adjoint_pair() {
    both_schemes("[costs]\nalphas = [0.3, 0.05]\n", |d, s| {
        let e = pair_error(d, s, 6);
        assert!(e < TOL, "{:?}: {e:e}", s.model.scheme);
    });
}

#[test]
fn tracking_equilibrium() {
    both_schemes("[costs]\ntracking = true\nmus = [0.5, 2.0]\n", |d, s| {
        let e = tracking_error(d, s, 7);
        assert!(e < TOL, "{:?}: {e:e}", s.model.scheme);
    });
}

#[test]
fn leader_dual_solution() {
    use oldnash::leader::{gramian_apply, minimize_dual, LeaderProblem};
    let s = small_scenario("ode", "");
    let d = Dense::new(&s.model);
    let dl = dense_leader(&d, &s);
    // L* is the adjoint of L between <.,.> (space-time) and (.,.)_H
    let adj = rel_mat(&dl.lstar, &(dl.l.transpose() / d.dt));
    assert!(adj < TOL, "adjointness {adj:e}");
    let lam = &dl.l * &dl.lstar;
    let problem = LeaderProblem::new(s.model.clone(), s.cost.clone(), 0.2).unwrap();
    assert!(rel(&vf(&problem.shifted_target()), &dl.b) < TOL);
    let f = random_field(&s, 8);
    let got = gramian_apply(&f, &problem).unwrap();
    assert!(rel(&vf(&got.value), &(&lam * vf(&f))) < TOL);

    let sol = minimize_dual(&problem).unwrap();
    let f_star = discrepancy_solution(&lam, &dl.b, 0.2, d.vol);
    let v_star = &dl.lstar * &f_star;
    let e = rel(&st(&sol.v), &v_star);
    assert!(e < 1e-5, "leader control {e:e}");
    assert!((sol.distance - 0.2).abs() < 1e-6 * 0.2, "{}", sol.distance);
}

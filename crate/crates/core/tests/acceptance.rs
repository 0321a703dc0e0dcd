//! Acceptance run: one line per criterion, tolerances pinned below.
//! Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use oldnash::diagnostics::{
    adjoint_identity_check, appendix_smallness_check, energy_monitor, fubini_check, memory_consistency,
};
use oldnash::leader::{check_variational_inequality, controllability_sweep, minimize_dual, LeaderProblem};
use oldnash::nash::{
    beta0_estimate, coercivity_samples, nash_inequality_check, rhs_scale, solve_nash, solve_nash_via_optimality_system,
};
use oldnash::solvers::solve_follower_adjoint;

const ADJOINT_TOL: f64 = 1e-9;
const ADJOINT_SECONDS: f64 = 60.0;
const DENSE_TOL: f64 = 1e-8;
const DENSE_SECONDS: f64 = 120.0;
const EL_TOL: f64 = 1e-8;
const ROUTE_TOL: f64 = 1e-6;
const COERCIVITY_SLACK: f64 = 1e-8;
const TARGET_BETA0: f64 = 0.5;
const SWEEP: [f64; 4] = [0.5, 0.2, 0.1, 0.05];
const DISTANCE_FACTOR: f64 = 1.01;
const GAP_TOL: f64 = 1e-4;
const VI_TOL: f64 = 1e-6;
const ORDER_RANGE: (f64, f64) = (1.8, 2.2);
const GAMMA0_TOL: f64 = 1e-10;
const FUBINI_TOL: f64 = 1e-10;

struct Tally {
    failed: usize,
}

impl Tally {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        println!("[{}] {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn main() {
    let mut t = Tally { failed: 0 };
    let base = scenario("");
    let (m, cost) = (&base.model, &base.cost);
    let g = &m.grid;

    // 1. adjoint identity
    let clock = Instant::now();
    let adj = adjoint_identity_check(cost, m, 10, 5).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    t.line(
        "C1 adjoint identity (16x16, nt=16, N=2, 10 trials)",
        adj.max_relative_error <= ADJOINT_TOL && secs <= ADJOINT_SECONDS,
        format!("max rel err {:.2e} <= {ADJOINT_TOL:e}, {secs:.1}s <= {ADJOINT_SECONDS}s", adj.max_relative_error),
    );

    // 2. dense oracle
    let clock = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for scheme in ["ode", "trapezoid"] {
        let s = small_scenario(scheme, "[costs]\nalphas = [0.3, 0.05]\n");
        let d = Dense::new(&s.model);
        let (nash, rhs) = nash_errors(&d, &s, 4);
        let errs = [
            ("forward", forward_error(&d, &s, 1)),
            ("backward", adjoint_error(&d, &s, 2)),
            ("apply_A", apply_a_error(&d, &s, 3)),
            ("nash", nash.max(rhs)),
            ("pair", pair_error(&d, &s, 6)),
        ];
        for (name, e) in errs {
            worst = worst.max(e);
            parts.push(format!("{scheme}/{name} {e:.1e}"));
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    t.line(
        "C2 dense-oracle equivalence (8x8, nt=4)",
        worst <= DENSE_TOL && secs <= DENSE_SECONDS,
        format!("max rel err {worst:.2e} <= {DENSE_TOL:e}, {secs:.1}s <= {DENSE_SECONDS}s [{}]", parts.join(", ")),
    );

    // 3. Nash certificate
    let v = &base.leader_control;
    let nash = solve_nash(v, cost, m).unwrap();
    let scale = rhs_scale(v, cost, m).unwrap();
    let el = nash.el_residuals.iter().fold(0.0f64, |a, b| a.max(*b)) / scale;
    let ineq = nash_inequality_check(v, &nash, cost, m, 20, 5).unwrap();
    let os = solve_nash_via_optimality_system(v, cost, m).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in os.w.iter().zip(&nash.w) {
        let mut diff = a.clone();
        diff.axpy(-1.0, b);
        num += diff.dot(&diff, g);
        den += b.dot(b, g);
    }
    let route = (num / den).sqrt();
    t.line(
        "C3 Nash certificate",
        el <= EL_TOL && ineq.decreases == 0 && route <= ROUTE_TOL,
        format!(
            "EL residual {el:.2e} <= {EL_TOL:e}; {} of {} perturbations decrease J_i (min increase {:.2e}); routes differ {route:.2e} <= {ROUTE_TOL:e}",
            ineq.decreases,
            ineq.samples_per_follower * cost.n(),
            ineq.min_increase
        ),
    );

    // 4. coercivity, with weights scaled so that beta0 is about 0.5
    let b0 = beta0_estimate(cost, m, 0).unwrap().beta0;
    let c = (TARGET_BETA0 / b0).sqrt();
    let mut strong = cost.clone();
    for w in &mut strong.weights {
        w.values.iter_mut().for_each(|x| *x *= c);
    }
    let b0_strong = beta0_estimate(&strong, m, 0).unwrap().beta0;
    let min_strong = coercivity_samples(&strong, m, 50, 5).unwrap().into_iter().fold(f64::INFINITY, f64::min);
    let mut same = strong.clone();
    same.weights[1] = same.weights[0].clone();
    let min_same = coercivity_samples(&same, m, 50, 6).unwrap().into_iter().fold(f64::INFINITY, f64::min);
    t.line(
        "C4 coercivity",
        min_strong >= 1.0 - b0_strong - COERCIVITY_SLACK && min_same >= 1.0 - COERCIVITY_SLACK,
        format!(
            "beta0 {b0_strong:.3}: min ratio {min_strong:.6} >= {:.6}; identical weights: min ratio {min_same:.6} >= 1 - {COERCIVITY_SLACK:e}",
            1.0 - b0_strong - COERCIVITY_SLACK
        ),
    );

    // 5. epsilon sweeps
    for (label, target, strict) in [("reachable", "reachable", false), ("generic", "smooth_random", true)] {
        let clock = Instant::now();
        let s = scenario(&format!("[costs]\ntarget = \"{target}\"\n"));
        let problem = LeaderProblem::new(s.model.clone(), s.cost.clone(), SWEEP[0]).unwrap();
        let table = controllability_sweep(problem.target(), &SWEEP, &problem, 100).unwrap();
        let close = table
            .rows
            .iter()
            .all(|r| r.error.is_none() && r.distance <= DISTANCE_FACTOR * r.epsilon);
        let monotone = if strict { table.cost_strictly_increasing } else { table.cost_nondecreasing };
        let rows: Vec<String> = table
            .rows
            .iter()
            .map(|r| format!("eps {}: dist {:.4} J {:.4e} ({} it)", r.epsilon, r.distance, r.leader_cost, r.iters))
            .collect();
        t.line(
            &format!("C5 epsilon sweep, {label} target"),
            close && monotone,
            format!(
                "dist <= {DISTANCE_FACTOR} eps in every row: {close}; J {}: {monotone}; {:.0}s [{}]",
                if strict { "strictly increasing" } else { "nondecreasing" },
                clock.elapsed().as_secs_f64(),
                rows.join("; ")
            ),
        );
    }

    // 6. duality
    let problem = LeaderProblem::new(m.clone(), cost.clone(), 0.2).unwrap();
    let sol = minimize_dual(&problem).unwrap();
    let vi = check_variational_inequality(&sol, &problem, 100, 5).unwrap();
    let gap_bound = GAP_TOL * sol.leader_cost.max(1.0);
    t.line(
        "C6 duality (eps = 0.2)",
        sol.gap.abs() <= gap_bound && vi.min_value >= -VI_TOL * vi.scale,
        format!(
            "|J + F| {:.2e} <= {gap_bound:.2e}; VI min over 100 samples {:.2e} >= {:.2e}",
            sol.gap.abs(),
            vi.min_value,
            -VI_TOL * vi.scale
        ),
    );

    // 7. memory consistency
    let mem = memory_consistency(m, &[8, 16, 32]).unwrap();
    let orders_ok = mem.observed_orders.iter().all(|o| (ORDER_RANGE.0..=ORDER_RANGE.1).contains(o));
    t.line(
        "C7 memory consistency (dt = 1/8, 1/16, 1/32)",
        orders_ok && mem.gamma0_error <= GAMMA0_TOL,
        format!(
            "orders {:?} in [{}, {}]; gamma=0 vs memory-free {:.1e} <= {GAMMA0_TOL:e}",
            mem.observed_orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>(),
            ORDER_RANGE.0,
            ORDER_RANGE.1,
            mem.gamma0_error
        ),
    );

    // 8. energy and smallness bounds
    let f = m.project(&random_field(&base, 9)).unwrap();
    let energy = energy_monitor(&solve_follower_adjoint(&f, m).unwrap(), m);
    let small = appendix_smallness_check(cost, m, &f).unwrap();
    let fub = fubini_check(m, 4, 5).unwrap();
    t.line(
        "C8 energy and smallness bounds",
        energy.bound_ok
            && energy.max_balance_residual <= energy.balance_tolerance
            && small.beta > 0.0
            && small.bound_ok
            && fub <= FUBINI_TOL,
        format!(
            "energy ratio {:.3} <= {:.3}, balance {:.1e} <= {:.1e}; beta {:.3} > 0, measured {:.3e} <= {:.3e}; fubini {fub:.1e} <= {FUBINI_TOL:e}",
            energy.max_ratio,
            energy.bound,
            energy.max_balance_residual,
            energy.balance_tolerance,
            small.beta,
            small.measured,
            small.bound
        ),
    );

    // 9. determinism of `verify` across runs and thread counts
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.toml");
    std::fs::write(&config, "[run]\nseed = 5\n").unwrap();
    let runs: Vec<_> = [("a", "1"), ("b", "4"), ("c", "1")]
        .iter()
        .map(|(name, threads)| {
            let out = dir.path().join(name);
            let status = Command::new(env!("CARGO_BIN_EXE_oldnash"))
                .args(["verify", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .env("RAYON_NUM_THREADS", threads)
                .output()
                .unwrap()
                .status;
            (status.code(), out)
        })
        .collect();
    let read = |out: &Path| {
        ["report.json", "tables/verify.csv"]
            .iter()
            .map(|p| std::fs::read(out.join(p)).unwrap_or_default())
            .collect::<Vec<_>>()
    };
    let first = read(&runs[0].1);
    let identical = runs.iter().all(|(_, out)| read(out) == first) && first.iter().all(|b| !b.is_empty());
    let codes: Vec<_> = runs.iter().map(|r| r.0).collect();
    t.line(
        "C9 determinism of verify",
        identical && codes.iter().all(|c| *c == Some(0)),
        format!("report.json and verify.csv bitwise identical across 3 runs (threads 1, 4, 1): {identical}; exit codes {codes:?}"),
    );

    println!("{} of 10 criteria failed", t.failed);
    if t.failed > 0 {
        std::process::exit(1);
    }
}

//! The leader's approximate-controllability problem, solved through its
//! Fenchel dual.
//!
//! With the followers at their Nash equilibrium the terminal state is affine
//! in the leader control: `u(T; v) = L v + z0`, where `z0` is the
//! equilibrium state for `v = 0`. The dual functional is
//!
//! `F(f) = 1/2 (Lambda f, f) + eps |f| - (f, u^T - z0)`, `Lambda = L L*`,
//!
//! and the optimal control is `v = L* f = phi chi_O` with `phi` from the
//! coupled leader-adjoint pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot_h, norm_h, VelocityField};
use crate::nash::{beta0_estimate, solve_nash_via_optimality_system, CostParams};
use crate::par_map;
use crate::solvers::{solve_leader_adjoint_pair, Model, SpaceTimeField};

#[derive(Debug, Clone)]
pub struct LeaderProblem {
    pub model: Model,
    /// Followers' game; `cost.target` is also the leader's target `u^T`.
    pub cost: CostParams,
    pub epsilon: f64,
    /// Smoothing levels as multiples of `|u^T - z0|`.
    pub smoothing_stages: Vec<f64>,
    pub max_iter_per_stage: usize,
    pub method: DualMethod,
    /// Follower-only equilibrium state `z0`.
    pub z0: VelocityField,
    pub beta0: f64,
}

/// How [`minimize_dual`] minimizes `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMethod {
    /// Lanczos on `Lambda` from `b`, `F` minimized exactly on the Krylov space.
    #[default]
    Krylov,
    /// Nonlinear CG on the smoothed functional over decreasing smoothing.
    Continuation,
}

pub const DEFAULT_STAGES: [f64; 5] = [1.0, 0.1, 0.01, 1e-3, 1e-4];
pub const TOL_ACCEPT: f64 = 1e-2;

impl LeaderProblem {
    /// Refuses to build when the followers' game is not certified
    /// (`beta0 >= 1`).
    pub fn new(model: Model, cost: CostParams, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let beta0 = beta0_estimate(&cost, &model, 0)?.beta0;
        if beta0 >= 1.0 {
            return Err(Error::NotCoercive(beta0));
        }
        let z0 = solve_nash_via_optimality_system(&SpaceTimeField::zeros(&model.grid), &cost, &model)?.state_t;
        Ok(Self {
            model,
            cost,
            epsilon,
            smoothing_stages: DEFAULT_STAGES.to_vec(),
            max_iter_per_stage: 2000,
            method: DualMethod::default(),
            z0,
            beta0,
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            ..self.clone()
        })
    }

    pub fn target(&self) -> &VelocityField {
        &self.cost.target
    }

    /// `b = u^T - z0`, the part of the target the leader has to reach.
    pub fn shifted_target(&self) -> VelocityField {
        self.cost.target.sub(&self.z0)
    }

    fn zero_target_cost(&self) -> CostParams {
        self.cost.with_target(VelocityField::zeros(&self.model.grid))
    }
}

#[derive(Debug, Clone)]
pub struct GramianOutput {
    /// `Lambda f`.
    pub value: VelocityField,
    /// `L* f = phi chi_O`.
    pub control: SpaceTimeField,
    /// `int_{O x (0,T)} phi^2`.
    pub control_energy: f64,
}

/// `L* f`: the leader control generated by dual datum `f`.
pub fn leader_control_of(f: &VelocityField, problem: &LeaderProblem) -> Result<SpaceTimeField> {
    let pair = solve_leader_adjoint_pair(f, &problem.cost.alphas, &problem.cost.weights, &problem.model)?;
    Ok(pair.phi.slot_values().masked(&problem.model.leader_mask))
}

/// `Lambda f = u(T; v = L* f)` with the followers at equilibrium for a zero
/// target.
pub fn gramian_apply(f: &VelocityField, problem: &LeaderProblem) -> Result<GramianOutput> {
    let g = &problem.model.grid;
    if !f.matches(g) {
        return Err(Error::GridMismatch);
    }
    let control = leader_control_of(f, problem)?;
    let value = solve_nash_via_optimality_system(&control, &problem.zero_target_cost(), &problem.model)?.state_t;
    let control_energy = control.dot(&control, g);
    Ok(GramianOutput {
        value,
        control,
        control_energy,
    })
}

/// `F(f) = 1/2 (Lambda f, f) + eps |f| - (f, u^T - z0)`.
pub fn dual_functional_f(f: &VelocityField, problem: &LeaderProblem) -> Result<f64> {
    let g = &problem.model.grid;
    let lam = gramian_apply(f, problem)?;
    Ok(dual_from_parts(dot_h(&lam.value, f, g), norm_h(f, g), dot_h(f, &problem.shifted_target(), g), problem.epsilon))
}

fn dual_from_parts(quad: f64, fnorm: f64, lin: f64, eps: f64) -> f64 {
    0.5 * quad + eps * fnorm - lin
}

#[derive(Debug, Clone, Serialize)]
pub struct StageLog {
    pub eta: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct LeaderSolution {
    pub epsilon: f64,
    pub f: VelocityField,
    pub v: SpaceTimeField,
    /// `u(T)` from a fresh equilibrium solve with `v`.
    pub state_t: VelocityField,
    pub distance: f64,
    /// `J(v) = 1/2 int_{O x (0,T)} v^2`.
    pub leader_cost: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub iterations: usize,
    pub stages: Vec<StageLog>,
}

/// Minimize `F`, then recover `v = L* f` and check the constraint with a
/// fresh equilibrium solve.
pub fn minimize_dual(problem: &LeaderProblem) -> Result<LeaderSolution> {
    match problem.method {
        DualMethod::Krylov => minimize_dual_krylov(problem),
        DualMethod::Continuation => minimize_dual_continuation(problem),
    }
}

/// Lanczos with full reorthogonalization on `Lambda`, started from `b`.
/// On `V_k` the functional is `1/2 y'T y + eps |y| - |b| y_1`, minimized
/// exactly through `(T + sI) y = |b| e_1`, `s |y| = eps`. The residual of the
/// Lanczos relation gives the full gradient norm `|beta_k y_k|` for free, so
/// the loop stops as soon as the true (unsmoothed) gradient is below
/// tolerance. Recorded as a single stage with `eta = 0`.
pub fn minimize_dual_krylov(problem: &LeaderProblem) -> Result<LeaderSolution> {
    let g = &problem.model.grid;
    let eps = problem.epsilon;
    let b = problem.shifted_target();
    let bnorm = norm_h(&b, g);
    let tol = 1e-8 * norm_h(problem.target(), g).max(1.0);
    if bnorm <= eps {
        return finish(problem, VelocityField::zeros(g), 0, Vec::new());
    }
    let kmax = g.n_dof().min(problem.max_iter_per_stage);
    let mut basis = vec![b.scaled(1.0 / bnorm)];
    let (mut diag, mut off) = (Vec::new(), Vec::new());
    let y = loop {
        let k = basis.len();
        let mut w = gramian_apply(&basis[k - 1], problem)?.value;
        diag.push(dot_h(&w, &basis[k - 1], g));
        for _ in 0..2 {
            for q in &basis {
                let c = dot_h(&w, q, g);
                w.axpy(-c, q);
            }
        }
        let beta = norm_h(&w, g);
        let (y, projected) = projected_minimizer(&diag, &off, bnorm, eps);
        let grad = (projected * projected + (beta * y[k - 1]).powi(2)).sqrt();
        if grad <= tol || k >= kmax || beta == 0.0 {
            break y;
        }
        off.push(beta);
        basis.push(w.scaled(1.0 / beta));
    };
    let mut f = VelocityField::zeros(g);
    for (q, c) in basis.iter().zip(&y) {
        f.axpy(*c, q);
    }
    let lf = gramian_apply(&f, problem)?.value;
    let fnorm = norm_h(&f, g);
    let mut grad = lf.sub(&b);
    if fnorm > 0.0 {
        grad.axpy(eps / fnorm, &f);
    }
    let stage = StageLog {
        eta: 0.0,
        iterations: basis.len(),
        grad_norm: norm_h(&grad, g),
        gap: dot_h(&lf, &f, g) + eps * fnorm - dot_h(&f, &b, g),
    };
    finish(problem, f, basis.len(), vec![stage])
}

/// Minimizer of `1/2 y'T y + eps |y| - c y_1` for the symmetric tridiagonal
/// `T` (`diag`, `off`), and the norm of the projected gradient there.
fn projected_minimizer(diag: &[f64], off: &[f64], c: f64, eps: f64) -> (Vec<f64>, f64) {
    let k = diag.len();
    if c <= eps {
        return (vec![0.0; k], 0.0);
    }
    // (T + sI) y = c e_1 by the Thomas algorithm; T is semidefinite
    let solve = |s: f64| -> Vec<f64> {
        let mut dd: Vec<f64> = diag.iter().map(|d| d + s).collect();
        let mut rhs = vec![0.0; k];
        rhs[0] = c;
        for i in 1..k {
            let m = off[i - 1] / dd[i - 1];
            dd[i] -= m * off[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        let mut y = vec![0.0; k];
        y[k - 1] = rhs[k - 1] / dd[k - 1];
        for i in (0..k - 1).rev() {
            y[i] = (rhs[i] - off[i] * y[i + 1]) / dd[i];
        }
        y
    };
    let norm = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>().sqrt();
    // s |y(s)| increases from the unreachable part of c e_1 (s -> 0) to c
    let tmax = (0..k)
        .map(|i| diag[i].abs() + if i > 0 { off[i - 1] } else { 0.0 } + if i + 1 < k { off[i] } else { 0.0 })
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut hi = (2.0 * eps * tmax / (c - eps)).ln() + 1.0;
    let mut lo = hi - 100.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s = mid.exp();
        if s * norm(&solve(s)) > eps {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let s = (0.5 * (lo + hi)).exp();
    let y = solve(s);
    let yn = norm(&y);
    // projected gradient T y + eps y/|y| - c e_1
    let mut r2 = 0.0;
    for i in 0..k {
        let mut r = diag[i] * y[i] + eps * y[i] / yn;
        if i > 0 {
            r += off[i - 1] * y[i - 1];
        }
        if i + 1 < k {
            r += off[i] * y[i + 1];
        }
        if i == 0 {
            r -= c;
        }
        r2 += r * r;
    }
    (y, r2.sqrt())
}

/// Minimize `F` by nonlinear conjugate gradients on the smoothed functional
/// `eps sqrt(|f|^2 + eta^2)`, continuing over decreasing `eta`.
///
/// `Lambda` is linear, so `Lambda f` and `Lambda d` are carried along and the
/// line search along `d` is an exact one-dimensional minimization; every
/// iteration costs a single `Lambda` application.
pub fn minimize_dual_continuation(problem: &LeaderProblem) -> Result<LeaderSolution> {
    let g = &problem.model.grid;
    let eps = problem.epsilon;
    let b = problem.shifted_target();
    let bnorm = norm_h(&b, g);
    let tol = 1e-8 * norm_h(problem.target(), g).max(1.0);
    let mut f = VelocityField::zeros(g);
    let mut lf = VelocityField::zeros(g);
    let mut stages = Vec::new();
    let mut total = 0;
    if bnorm > eps {
        for &stage in &problem.smoothing_stages {
            let eta = stage * bnorm;
            let smoothed_grad = |f: &VelocityField, lf: &VelocityField| {
                let rho = (dot_h(f, f, g) + eta * eta).sqrt();
                let mut gr = lf.sub(&b);
                gr.axpy(eps / rho, f);
                gr
            };
            let mut grad = smoothed_grad(&f, &lf);
            let mut dir = grad.scaled(-1.0);
            let mut it = 0;
            let mut gnorm = norm_h(&grad, g);
            while gnorm > tol && it < problem.max_iter_per_stage {
                let ld = gramian_apply(&dir, problem)?.value;
                let t = line_search(&f, &lf, &dir, &ld, &b, eps, eta, g);
                f.axpy(t, &dir);
                lf.axpy(t, &ld);
                let new_grad = smoothed_grad(&f, &lf);
                // Polak–Ribiere with restart
                let beta = (dot_h(&new_grad, &new_grad.sub(&grad), g) / dot_h(&grad, &grad, g)).max(0.0);
                let mut nd = new_grad.scaled(-1.0);
                nd.axpy(beta, &dir);
                if dot_h(&nd, &new_grad, g) >= 0.0 {
                    nd = new_grad.scaled(-1.0);
                }
                dir = nd;
                grad = new_grad;
                gnorm = norm_h(&grad, g);
                it += 1;
                // refresh the carried Lambda f against drift
                if it % 50 == 0 {
                    lf = gramian_apply(&f, problem)?.value;
                    grad = smoothed_grad(&f, &lf);
                    gnorm = norm_h(&grad, g);
                }
            }
            lf = gramian_apply(&f, problem)?.value;
            total += it;
            let fn_ = norm_h(&f, g);
            stages.push(StageLog {
                eta,
                iterations: it,
                grad_norm: norm_h(&smoothed_grad(&f, &lf), g),
                gap: dot_h(&lf, &f, g) + eps * fn_ - dot_h(&f, &b, g),
            });
        }
    }
    finish(problem, f, total, stages)
}

/// Exact minimizer along `f + t d` of the smoothed functional; the
/// derivative is increasing in `t`, so a bracketed Newton iteration is safe.
#[allow(clippy::too_many_arguments)]
fn line_search(
    f: &VelocityField,
    lf: &VelocityField,
    d: &VelocityField,
    ld: &VelocityField,
    b: &VelocityField,
    eps: f64,
    eta: f64,
    g: &crate::geometry::Grid,
) -> f64 {
    let a2 = dot_h(ld, d, g);
    let a1 = dot_h(lf, d, g) - dot_h(b, d, g);
    let ff = dot_h(f, f, g);
    let fd = dot_h(f, d, g);
    let dd = dot_h(d, d, g);
    let deriv = |t: f64| {
        let rho = (ff + 2.0 * t * fd + t * t * dd + eta * eta).sqrt();
        (a2 * t + a1 + eps * (fd + t * dd) / rho, a2 + eps * (dd * rho * rho - (fd + t * dd).powi(2)) / rho.powi(3))
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while deriv(hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e30 {
            return hi;
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (d1, d2) = deriv(t);
        if d1 > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let newton = t - d1 / d2;
        t = if d2 > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo) <= 1e-15 * hi.abs() || d1 == 0.0 {
            break;
        }
        if d1.abs() <= 1e-15 * (a1.abs() + a2.abs() * t.abs() + eps * dd.sqrt()) {
            break;
        }
    }
    t
}

fn finish(problem: &LeaderProblem, f: VelocityField, iterations: usize, stages: Vec<StageLog>) -> Result<LeaderSolution> {
    let g = &problem.model.grid;
    let eps = problem.epsilon;
    let lam = gramian_apply(&f, problem)?;
    let v = lam.control;
    let state_t = solve_nash_via_optimality_system(&v, &problem.cost, &problem.model)?.state_t;
    let distance = norm_h(&state_t.sub(problem.target()), g);
    let leader_cost = 0.5 * v.dot(&v, g);
    let dual_value = dual_from_parts(
        dot_h(&lam.value, &f, g),
        norm_h(&f, g),
        dot_h(&f, &problem.shifted_target(), g),
        eps,
    );
    let gap = leader_cost + dual_value;
    if distance > eps * (1.0 + TOL_ACCEPT) {
        return Err(Error::DualMinimization {
            distance,
            epsilon: eps,
            gap,
        });
    }
    Ok(LeaderSolution {
        epsilon: eps,
        f,
        v,
        state_t,
        distance,
        leader_cost,
        dual_value,
        gap,
        iterations,
        stages,
    })
}

/// Primal-dual gap `J(v*) + F(f*)`.
pub fn duality_gap(sol: &LeaderSolution) -> f64 {
    sol.gap
}

#[derive(Debug, Clone, Serialize)]
pub struct ViReport {
    pub samples: usize,
    pub min_value: f64,
    pub scale: f64,
    pub passed: bool,
}

/// Sample `(u(T) - u^T, fh - f) + eps |fh| - eps |f|` over `fh = f`, `0`,
/// `2f` and projected white noise scaled to `{0.1, 1, 10} |f|`.
pub fn check_variational_inequality(
    sol: &LeaderSolution,
    problem: &LeaderProblem,
    n_samples: usize,
    seed: u64,
) -> Result<ViReport> {
    let g = &problem.model.grid;
    let eps = sol.epsilon;
    let miss = sol.state_t.sub(problem.target());
    let fnorm = norm_h(&sol.f, g);
    let base = if fnorm > 0.0 { fnorm } else { norm_h(problem.target(), g).max(1.0) };
    let value = |fh: &VelocityField| dot_h(&miss, &fh.sub(&sol.f), g) + eps * norm_h(fh, g) - eps * fnorm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_value = f64::INFINITY;
    let fixed = [sol.f.clone(), VelocityField::zeros(g), sol.f.scaled(2.0)];
    let mut count = 0;
    for fh in fixed.iter().take(n_samples) {
        min_value = min_value.min(value(fh));
        count += 1;
    }
    let scales = [0.1, 1.0, 10.0];
    while count < n_samples {
        let noise = problem
            .model
            .project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0)))?;
        let nn = norm_h(&noise, g);
        let fh = noise.scaled(scales[count % 3] * base / nn);
        min_value = min_value.min(value(&fh));
        count += 1;
    }
    let scale = base.max(1.0) * eps.max(norm_h(problem.target(), g));
    Ok(ViReport {
        samples: count,
        min_value,
        scale,
        passed: min_value >= -1e-6 * scale,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub distance: f64,
    pub leader_cost: f64,
    pub gap: f64,
    pub vi_min: f64,
    pub iters: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub all_feasible: bool,
    pub cost_nondecreasing: bool,
    pub cost_strictly_increasing: bool,
}

/// Solve the leader problem for every `eps` (strictly decreasing). Failed
/// entries are recorded and the sweep continues.
pub fn controllability_sweep(
    target: &VelocityField,
    eps_list: &[f64],
    problem: &LeaderProblem,
    vi_samples: usize,
) -> Result<SweepTable> {
    if eps_list.windows(2).any(|w| w[1] >= w[0]) || eps_list.iter().any(|e| e.is_nan() || *e <= 0.0) {
        return Err(Error::Invalid("epsilon list must be positive and strictly decreasing".into()));
    }
    let base = if target == problem.target() {
        problem.clone()
    } else {
        LeaderProblem {
            method: problem.method,
            ..LeaderProblem::new(problem.model.clone(), problem.cost.with_target(target.clone()), problem.epsilon)?
        }
    };
    let rows = par_map(eps_list, |&eps| {
        let outcome = base.with_epsilon(eps).and_then(|p| {
            let sol = minimize_dual(&p)?;
            let vi = check_variational_inequality(&sol, &p, vi_samples, 101)?;
            Ok((sol, vi))
        });
        match outcome {
            Ok((sol, vi)) => SweepRow {
                epsilon: eps,
                distance: sol.distance,
                leader_cost: sol.leader_cost,
                gap: sol.gap,
                vi_min: vi.min_value,
                iters: sol.iterations,
                error: None,
            },
            Err(e) => SweepRow {
                epsilon: eps,
                distance: f64::NAN,
                leader_cost: f64::NAN,
                gap: f64::NAN,
                vi_min: f64::NAN,
                iters: 0,
                error: Some(e.to_string()),
            },
        }
    });
    let all_feasible = rows
        .iter()
        .all(|r| r.error.is_none() && r.distance <= r.epsilon * (1.0 + TOL_ACCEPT));
    let costs: Vec<f64> = rows.iter().map(|r| r.leader_cost).collect();
    Ok(SweepTable {
        all_feasible,
        cost_nondecreasing: costs.windows(2).all(|w| w[1] >= w[0]),
        cost_strictly_increasing: costs.windows(2).all(|w| w[1] > w[0]),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_weight, Region};
    use crate::kernel::MemoryScheme;
    use crate::solvers::tests::model;

    fn problem(target_scale: f64, eps: f64) -> LeaderProblem {
        let m = model(8, 4, MemoryScheme::Ode);
        let g = &m.grid;
        let weights = m.follower_regions.iter().map(|r| make_weight(r, r, g).unwrap()).collect();
        let target = m
            .project(&VelocityField::from_fn(g, |x, y, c| {
                let s = (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin();
                if c == 0 { s } else { -0.5 * s }
            }))
            .unwrap()
            .scaled(target_scale);
        let cost = CostParams::new(vec![0.05, 0.05], target, weights).unwrap();
        LeaderProblem::new(m, cost, eps).unwrap()
    }

    #[test]
    fn gramian_symmetric_and_psd() {
        let p = problem(1.0, 0.1);
        let g = &p.model.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f1 = p.model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0))).unwrap();
        let f2 = p.model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0))).unwrap();
        let l1 = gramian_apply(&f1, &p).unwrap();
        let l2 = gramian_apply(&f2, &p).unwrap();
        let (a, b) = (dot_h(&l1.value, &f2, g), dot_h(&f1, &l2.value, g));
        assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()));
        let q = dot_h(&l1.value, &f1, g);
        assert!(q >= 0.0);
        assert!((q - l1.control_energy).abs() <= 1e-10 * q);
        assert_eq!(gramian_apply(&VelocityField::zeros(g), &p).unwrap().value.max_abs(), 0.0);
    }

    #[test]
    fn small_target_needs_no_control() {
        let p = problem(1e-3, 0.5);
        let sol = minimize_dual(&p).unwrap();
        assert_eq!(sol.f.max_abs(), 0.0);
        assert_eq!(sol.leader_cost, 0.0);
        assert_eq!(sol.gap, 0.0);
        assert_eq!(dual_functional_f(&sol.f, &p).unwrap(), 0.0);
    }

    #[test]
    fn solution_is_feasible_and_certified() {
        for method in [DualMethod::Krylov, DualMethod::Continuation] {
            let p = LeaderProblem {
                method,
                ..problem(1.0, 0.05)
            };
            let sol = minimize_dual(&p).unwrap();
            assert!(sol.distance <= p.epsilon * (1.0 + TOL_ACCEPT));
            assert!(sol.gap.abs() <= 1e-4 * sol.leader_cost.max(1.0), "gap {}", sol.gap);
            let vi = check_variational_inequality(&sol, &p, 30, 3).unwrap();
            assert!(vi.passed, "{vi:?}");
            for w in sol.stages.windows(2) {
                assert!(w[1].gap.abs() <= w[0].gap.abs() + 1e-12, "{:?}", sol.stages);
            }
        }
    }

    #[test]
    fn methods_agree() {
        let p = problem(1.0, 0.1);
        let k = minimize_dual(&p).unwrap();
        let c = minimize_dual(&LeaderProblem {
            method: DualMethod::Continuation,
            ..p.clone()
        })
        .unwrap();
        let g = &p.model.grid;
        let diff = norm_h(&k.f.sub(&c.f), g) / norm_h(&k.f, g);
        assert!(diff < 1e-4, "{diff:e}");
        assert!((k.leader_cost - c.leader_cost).abs() <= 1e-6 * k.leader_cost);
        // the Krylov space of an 8x8 grid is exhausted well before n_dof
        assert!(k.iterations < g.n_dof() / 2, "{}", k.iterations);
        assert!(k.stages[0].grad_norm <= 1e-7);
    }

    #[test]
    fn projected_problem_on_diagonal() {
        // T = diag(1, 0.01): y_i = c_i / (t_i + s) with s |y| = eps
        let (y, r) = projected_minimizer(&[1.0, 0.01], &[0.0], 2.0, 0.5);
        let s = 0.5 / (y[0] * y[0] + y[1] * y[1]).sqrt();
        assert!((y[0] - 2.0 / (1.0 + s)).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert!(r < 1e-12);
        assert_eq!(projected_minimizer(&[1.0], &[], 0.4, 0.5).0, vec![0.0]);
    }

    #[test]
    fn dual_convex_midpoint() {
        let p = problem(1.0, 0.1);
        let g = &p.model.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_f = || p.model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0))).unwrap();
        let (f1, f2) = (rand_f(), rand_f());
        let mid = f1.add(&f2).scaled(0.5);
        let fm = dual_functional_f(&mid, &p).unwrap();
        let (a, b) = (dual_functional_f(&f1, &p).unwrap(), dual_functional_f(&f2, &p).unwrap());
        assert!(fm <= 0.5 * (a + b) + 1e-10 * (a.abs() + b.abs()));
    }

    #[test]
    fn sweep_costs_monotone_in_epsilon() {
        let p = problem(1.0, 0.2);
        let table = controllability_sweep(&p.cost.target.clone(), &[0.4, 0.2, 0.1], &p, 10).unwrap();
        assert!(table.all_feasible, "{table:?}");
        assert!(table.cost_nondecreasing);
        let zero = VelocityField::zeros(&p.model.grid);
        let t0 = controllability_sweep(&zero, &[0.4, 0.2], &p, 5).unwrap();
        assert!(t0.rows.iter().all(|r| r.distance == 0.0 && r.leader_cost == 0.0));
        assert!(controllability_sweep(&zero, &[0.1, 0.2], &p, 5).is_err());
    }

    #[test]
    fn region_helper_is_used() {
        // weights built on the follower regions satisfy the plateau rule
        let p = problem(1.0, 0.1);
        let r: Region = p.model.follower_regions[0];
        let w = &p.cost.weights[0];
        for ((x, y), v) in p.model.grid.dof_coords().into_iter().zip(&w.values) {
            if r.contains(x, y) {
                assert_eq!(*v, 1.0);
            }
        }
    }
}

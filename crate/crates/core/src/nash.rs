//! The followers' game: costs `J_i`, Euler–Lagrange residuals, the Nash
//! operator `A`, the coercivity certificate and the optimality-system route,
//! plus the tracking-cost variant.
//!
//! Notation: `B` maps a space-time forcing to the terminal state, `B*` is
//! its discrete adjoint (a backward solve), `C_i` is the mask of follower
//! region `i`, and `L_i = B C_i`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{dot_h, norm_h, GridMask, VelocityField, WeightField};
use crate::krylov;
use crate::par_range;
use crate::solvers::{forward_terminal, ControlSet, Model, SpaceTimeField, SystemKind};

/// Tracking-cost data: follower `i` acts on `control_masks[i]` and tracks
/// `targets[i]` on `observation_masks[i]` with cost weights
/// `alphas[i]` (tracking) and `mus[i]` (control).
#[derive(Debug, Clone)]
pub struct TrackingData {
    pub alphas: Vec<f64>,
    pub mus: Vec<f64>,
    pub targets: Vec<SpaceTimeField>,
    pub control_masks: Vec<GridMask>,
    pub observation_masks: Vec<GridMask>,
}

#[derive(Debug, Clone)]
pub struct CostParams {
    pub alphas: Vec<f64>,
    pub target: VelocityField,
    pub weights: Vec<WeightField>,
    pub tracking: Option<TrackingData>,
}

impl CostParams {
    pub fn new(alphas: Vec<f64>, target: VelocityField, weights: Vec<WeightField>) -> Result<Self> {
        if alphas.len() != weights.len() {
            return Err(Error::Invalid("one alpha per weight required".into()));
        }
        if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Invalid("alphas must be finite and nonnegative".into()));
        }
        Ok(Self {
            alphas,
            target,
            weights,
            tracking: None,
        })
    }

    pub fn n(&self) -> usize {
        self.alphas.len()
    }

    pub fn equal_alpha(&self) -> bool {
        self.alphas.windows(2).all(|w| w[0] == w[1])
    }

    /// `A` is self-adjoint exactly when `alpha_i rho_i^2` is the same
    /// function for every follower.
    pub fn symmetric(&self) -> bool {
        let first = |k: usize| self.alphas[0] * self.weights[0].values[k].powi(2);
        (1..self.n()).all(|i| {
            self.weights[i]
                .values
                .iter()
                .enumerate()
                .all(|(k, r)| self.alphas[i] * r * r == first(k))
        })
    }

    pub fn with_target(&self, target: VelocityField) -> Self {
        Self {
            target,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct NashSolution {
    pub w: Vec<SpaceTimeField>,
    pub state_t: VelocityField,
    pub iterations: usize,
    pub relative_residual: f64,
    pub el_residuals: Vec<f64>,
    pub method: &'static str,
}

fn check(model: &Model, cost: &CostParams) -> Result<()> {
    if cost.n() != model.n_followers() || !cost.target.matches(&model.grid) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// `J_i = 1/2 |w_i|^2 + alpha_i/2 |rho_i (u(T) - u^T)|^2` with `state_t = u(T)`.
pub fn cost_j_i(i: usize, controls: &ControlSet, cost: &CostParams, state_t: &VelocityField, model: &Model) -> f64 {
    let g = &model.grid;
    let wi = controls.w[i].masked(&model.follower_masks[i]);
    let miss = cost.weights[i].apply(&state_t.sub(&cost.target));
    0.5 * wi.dot(&wi, g) + 0.5 * cost.alphas[i] * dot_h(&miss, &miss, g)
}

/// Gradient of `J_i` with respect to `w_i`:
/// `C_i w_i + alpha_i C_i B*(rho_i^2 (u(T) - u^T))`.
pub fn el_gradient(i: usize, controls: &ControlSet, cost: &CostParams, model: &Model) -> Result<SpaceTimeField> {
    check(model, cost)?;
    let u_t = forward_terminal(controls, model)?;
    el_gradient_at(i, &controls.w[i], &u_t, cost, model)
}

fn el_gradient_at(
    i: usize,
    w_i: &SpaceTimeField,
    u_t: &VelocityField,
    cost: &CostParams,
    model: &Model,
) -> Result<SpaceTimeField> {
    let mask = &model.follower_masks[i];
    let mut grad = w_i.masked(mask);
    if cost.alphas[i] != 0.0 {
        let psi = model.adjoint_slots(&cost.weights[i].apply_squared(&u_t.sub(&cost.target)))?;
        grad.axpy(cost.alphas[i], &psi.masked(mask));
    }
    Ok(grad)
}

/// Space-time norm of [`el_gradient`].
pub fn el_residual(i: usize, controls: &ControlSet, cost: &CostParams, model: &Model) -> Result<f64> {
    Ok(el_gradient(i, controls, cost, model)?.norm(&model.grid))
}

fn combined_forcing(w: &[SpaceTimeField], model: &Model) -> SpaceTimeField {
    let mut f = SpaceTimeField::zeros(&model.grid);
    for (wi, m) in w.iter().zip(&model.follower_masks) {
        f.axpy(1.0, &wi.masked(m));
    }
    f
}

/// `(A w)_i = C_i w_i + alpha_i C_i B*(rho_i^2 sum_j L_j w_j)`.
pub fn apply_a(w: &[SpaceTimeField], cost: &CostParams, model: &Model) -> Result<Vec<SpaceTimeField>> {
    check(model, cost)?;
    let u_t = model.terminal_of(&combined_forcing(w, model))?;
    par_range(cost.n(), |i| {
        let mask = &model.follower_masks[i];
        let mut out = w[i].masked(mask);
        if cost.alphas[i] != 0.0 {
            let psi = model.adjoint_slots(&cost.weights[i].apply_squared(&u_t))?;
            out.axpy(cost.alphas[i], &psi.masked(mask));
        }
        Ok(out)
    })
    .into_iter()
    .collect()
}

/// `rhs_i = alpha_i C_i B*(rho_i^2 (u^T - z^T))`, `z^T = B C_O v`.
pub fn nash_rhs(v: &SpaceTimeField, cost: &CostParams, model: &Model) -> Result<Vec<SpaceTimeField>> {
    check(model, cost)?;
    let z_t = model.terminal_of(&v.masked(&model.leader_mask))?;
    let miss = cost.target.sub(&z_t);
    par_range(cost.n(), |i| {
        let mask = &model.follower_masks[i];
        if cost.alphas[i] == 0.0 {
            return Ok(SpaceTimeField::zeros(&model.grid));
        }
        let psi = model.adjoint_slots(&cost.weights[i].apply_squared(&miss))?;
        Ok(psi.masked(mask).scaled(cost.alphas[i]))
    })
    .into_iter()
    .collect()
}

fn flatten(w: &[SpaceTimeField]) -> Vec<f64> {
    w.iter().flat_map(|f| f.to_flat()).collect()
}

fn unflatten(flat: &[f64], model: &Model) -> Vec<SpaceTimeField> {
    let len = model.grid.n_dof() * model.grid.nt();
    flat.chunks(len).map(|c| SpaceTimeField::from_flat(&model.grid, c)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct NashOptions {
    pub rtol: f64,
    pub max_iter: usize,
    pub restart: usize,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            max_iter: 500,
            restart: 60,
        }
    }
}

/// Solve `A w = rhs` with CG when `A` is self-adjoint, GMRES otherwise.
pub fn solve_nash(v: &SpaceTimeField, cost: &CostParams, model: &Model) -> Result<NashSolution> {
    solve_nash_with(v, cost, model, NashOptions::default(), None)
}

pub fn solve_nash_with(
    v: &SpaceTimeField,
    cost: &CostParams,
    model: &Model,
    opts: NashOptions,
    initial: Option<&[SpaceTimeField]>,
) -> Result<NashSolution> {
    let rhs = nash_rhs(v, cost, model)?;
    let b = flatten(&rhs);
    let x0 = initial.map(flatten);
    let op = |x: &[f64]| Ok(flatten(&apply_a(&unflatten(x, model), cost, model)?));
    let symmetric = cost.symmetric();
    let out = if symmetric {
        krylov::cg(op, &b, x0.as_deref(), opts.rtol, opts.max_iter)?
    } else {
        krylov::gmres(op, &b, x0.as_deref(), opts.rtol, opts.restart, opts.max_iter)?
    };
    if !out.converged {
        let beta0 = beta0_estimate(cost, model, 0).map(|r| r.beta0).unwrap_or(f64::NAN);
        return Err(Error::Stagnation {
            iterations: out.iterations,
            residual: out.relative_residual,
            beta0,
        });
    }
    let w = unflatten(&out.x, model);
    let mut controls = ControlSet {
        v: v.clone(),
        w,
    };
    let state_t = forward_terminal(&controls, model)?;
    let el_residuals = (0..cost.n())
        .map(|i| Ok(el_gradient_at(i, &controls.w[i], &state_t, cost, model)?.norm(&model.grid)))
        .collect::<Result<Vec<_>>>()?;
    Ok(NashSolution {
        w: std::mem::take(&mut controls.w),
        state_t,
        iterations: out.iterations,
        relative_residual: out.relative_residual,
        el_residuals,
        method: if symmetric { "cg" } else { "gmres" },
    })
}

/// Space-time norm of the Nash right-hand side, the natural scale for the
/// Euler–Lagrange residuals.
pub fn rhs_scale(v: &SpaceTimeField, cost: &CostParams, model: &Model) -> Result<f64> {
    let rhs = nash_rhs(v, cost, model)?;
    Ok(rhs.iter().map(|r| r.dot(r, &model.grid)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct Beta0Report {
    /// `max_i lambda_max(L_i L_i*)`.
    pub c0_sq: f64,
    pub alpha: f64,
    pub rho_diff: f64,
    pub rho_max: f64,
    pub beta0: f64,
    pub equal_alpha: bool,
    /// Minimum of `(Aw, w)/|w|^2` over the sampled `w`.
    pub empirical_min_ratio: f64,
    pub samples: usize,
}

/// Largest eigenvalue of `L_i L_i* = B C_i B*` on H.
pub fn gramian_norm_sq(i: usize, model: &Model, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let g = &model.grid;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + i as u64));
    let start = model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0)))?;
    let mask = &model.follower_masks[i];
    let (lambda, _) = krylov::power_iteration(
        |x| {
            let f = VelocityField::from_vec(g, x.to_vec())?;
            let slots = model.adjoint_slots(&f)?.masked(mask);
            Ok(model.terminal_of(&slots)?.data)
        },
        &start.data,
        1e-10,
        2000,
    )?;
    Ok(lambda)
}

/// Smallness certificate `beta0 = C0^2 alpha max|rho_i - rho_j| max|rho_i|`
/// plus the sampled coercivity ratio over `samples` random controls.
pub fn beta0_estimate(cost: &CostParams, model: &Model, samples: usize) -> Result<Beta0Report> {
    check(model, cost)?;
    let n = cost.n();
    let c0_sq = par_range(n, |i| gramian_norm_sq(i, model, 17))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let alpha = cost.alphas.iter().copied().fold(0.0, f64::max);
    let mut rho_diff: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            rho_diff = rho_diff.max(cost.weights[i].sup_distance(&cost.weights[j]));
        }
    }
    let rho_max = cost.weights.iter().map(|w| w.sup_norm()).fold(0.0, f64::max);
    let empirical_min_ratio = if samples > 0 {
        coercivity_samples(cost, model, samples, 23)?
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    } else {
        f64::NAN
    };
    Ok(Beta0Report {
        c0_sq,
        alpha,
        rho_diff,
        rho_max,
        beta0: c0_sq * alpha * rho_diff * rho_max,
        equal_alpha: cost.equal_alpha(),
        empirical_min_ratio,
        samples,
    })
}

/// `(Aw, w)/|w|^2` for `samples` random masked `w`.
pub fn coercivity_samples(cost: &CostParams, model: &Model, samples: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    let g = &model.grid;
    par_range(samples, |s| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(s as u64));
        let w: Vec<SpaceTimeField> = model
            .follower_masks
            .iter()
            .map(|m| SpaceTimeField::from_fn(g, |_, _, _, _| rng.random_range(-1.0..1.0)).masked(m))
            .collect();
        let aw = apply_a(&w, cost, model)?;
        let num: f64 = aw.iter().zip(&w).map(|(a, b)| a.dot(b, g)).sum();
        let den: f64 = w.iter().map(|b| b.dot(b, g)).sum();
        Ok(num / den)
    })
    .into_iter()
    .collect()
}

const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_MAX: usize = 300;

/// Fixed point on `u(T)` for the coupled system with control law
/// `w_i = -alpha_i C_i psi_i`.
pub fn solve_nash_via_optimality_system(v: &SpaceTimeField, cost: &CostParams, model: &Model) -> Result<NashSolution> {
    check(model, cost)?;
    let g = &model.grid;
    let z_t = model.terminal_of(&v.masked(&model.leader_mask))?;
    let law = |u_t: &VelocityField| -> Result<Vec<SpaceTimeField>> {
        par_range(cost.n(), |i| {
            if cost.alphas[i] == 0.0 {
                return Ok(SpaceTimeField::zeros(g));
            }
            let psi = model.adjoint_slots(&cost.weights[i].apply_squared(&u_t.sub(&cost.target)))?;
            Ok(psi.masked(&model.follower_masks[i]).scaled(-cost.alphas[i]))
        })
        .into_iter()
        .collect()
    };
    let mut u_t = z_t.clone();
    let mut damping = 1.0;
    let mut prev = f64::INFINITY;
    let mut growth = 0;
    for it in 1..=FIXED_POINT_MAX {
        let w = law(&u_t)?;
        let mut next = z_t.clone();
        next.axpy(1.0, &model.terminal_of(&combined_forcing(&w, model))?);
        let update = norm_h(&next.sub(&u_t), g);
        let scale = norm_h(&next, g).max(norm_h(&cost.target, g));
        if update <= FIXED_POINT_TOL * scale || scale == 0.0 {
            // control law residual against the final state
            let w_final = law(&next)?;
            let el_residuals = w
                .iter()
                .zip(&w_final)
                .map(|(a, b)| {
                    let mut d = a.clone();
                    d.axpy(-1.0, b);
                    d.norm(g)
                })
                .collect();
            return Ok(NashSolution {
                w: w_final,
                state_t: next,
                iterations: it,
                relative_residual: if scale > 0.0 { update / scale } else { 0.0 },
                el_residuals,
                method: "optimality_system",
            });
        }
        if !update.is_finite() {
            break;
        }
        if update > prev {
            damping = 0.5;
            growth += 1;
            if growth > 20 {
                break;
            }
        }
        prev = update;
        let mut relaxed = u_t.scaled(1.0 - damping);
        relaxed.axpy(damping, &next);
        u_t = relaxed;
    }
    Err(Error::FixedPointDiverged {
        iterations: FIXED_POINT_MAX,
    })
}

/// Outcome of the sampled Nash-inequality check.
#[derive(Debug, Clone, Serialize)]
pub struct NashInequalityReport {
    pub samples_per_follower: usize,
    /// Smallest `J_i(perturbed) - J_i(w)` over all samples.
    pub min_increase: f64,
    pub decreases: usize,
}

/// Evaluate `J_i` at `w_i + s d` for `n` random unit directions `d` on
/// `O_i` with `s` log-spaced in `[1e-3, 1] |w|`.
pub fn nash_inequality_check(
    v: &SpaceTimeField,
    sol: &NashSolution,
    cost: &CostParams,
    model: &Model,
    n: usize,
    seed: u64,
) -> Result<NashInequalityReport> {
    use rand::SeedableRng;
    let g = &model.grid;
    let base = ControlSet {
        v: v.clone(),
        w: sol.w.clone(),
    };
    let u_t = forward_terminal(&base, model)?;
    let wnorm = sol.w.iter().map(|w| w.dot(w, g)).sum::<f64>().sqrt();
    let scale = if wnorm > 0.0 { wnorm } else { 1.0 };
    let results = par_range(cost.n() * n, |k| {
        let (i, s) = (k / n, k % n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
        let mut d = SpaceTimeField::from_fn(g, |_, _, _, _| rng.random_range(-1.0..1.0)).masked(&model.follower_masks[i]);
        let dn = d.norm(g);
        d = d.scaled(1.0 / dn);
        let frac = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.0 };
        let step = scale * 10f64.powf(-3.0 + 3.0 * frac);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut pert = base.clone();
        pert.w[i].axpy(sign * step, &d);
        let u_p = forward_terminal(&pert, model)?;
        Ok(cost_j_i(i, &pert, cost, &u_p, model) - cost_j_i(i, &base, cost, &u_t, model))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(NashInequalityReport {
        samples_per_follower: n,
        min_increase: results.iter().copied().fold(f64::INFINITY, f64::min),
        decreases: results.iter().filter(|&&d| d < 0.0).count(),
    })
}

/// Tracking-variant equilibrium: followers `v^i = -(1/mu_i) q^i chi_{omega_i}`
/// with `q^i` backward-driven by `alpha_i (u - u_{i,d}) chi_{omega_{i,d}}`.
pub fn solve_nash_tracking(f_leader: &SpaceTimeField, model: &Model, tracking: &TrackingData) -> Result<NashSolution> {
    let g = &model.grid;
    let n = tracking.alphas.len();
    if tracking.mus.len() != n
        || tracking.targets.len() != n
        || tracking.control_masks.len() != n
        || tracking.observation_masks.len() != n
    {
        return Err(Error::Invalid("tracking data lengths differ".into()));
    }
    if tracking.mus.iter().any(|m| m.is_nan() || *m <= 0.0) {
        return Err(Error::Invalid("tracking control weights must be positive".into()));
    }
    let leader = f_leader.masked(&model.leader_mask);
    let states_of = |forcing: &SpaceTimeField| -> Result<SpaceTimeField> { model.states_of(forcing) };
    let adjoints = |u: &SpaceTimeField| -> Result<Vec<SpaceTimeField>> {
        par_range(n, |i| {
            if tracking.alphas[i] == 0.0 {
                return Ok(SpaceTimeField::zeros(g));
            }
            let mut src = u.clone();
            src.axpy(-1.0, &tracking.targets[i]);
            let src = src.masked(&tracking.observation_masks[i]).scaled(tracking.alphas[i]);
            Ok(model
                .solve_backward(SystemKind::TrackingAdjoint(i), None, Some(&src), false)?
                .slot_values())
        })
        .into_iter()
        .collect()
    };
    let controls_of = |q: &[SpaceTimeField]| -> Vec<SpaceTimeField> {
        q.iter()
            .enumerate()
            .map(|(i, qi)| qi.masked(&tracking.control_masks[i]).scaled(-1.0 / tracking.mus[i]))
            .collect()
    };
    let total = |vs: &[SpaceTimeField]| {
        let mut f = leader.clone();
        for v in vs {
            f.axpy(1.0, v);
        }
        f
    };
    let mut u = states_of(&leader)?;
    let mut damping = 1.0;
    let mut prev = f64::INFINITY;
    let mut growth = 0;
    for it in 1..=FIXED_POINT_MAX {
        let vs = controls_of(&adjoints(&u)?);
        let next = states_of(&total(&vs))?;
        let mut diff = next.clone();
        diff.axpy(-1.0, &u);
        let update = diff.norm(g);
        let scale = next
            .norm(g)
            .max(tracking.targets.iter().map(|t| t.norm(g)).fold(0.0, f64::max));
        if update <= FIXED_POINT_TOL * scale || scale == 0.0 {
            let v_final = controls_of(&adjoints(&next)?);
            // residual against the adjoint of the state these controls produce
            let u_final = states_of(&total(&v_final))?;
            let q = adjoints(&u_final)?;
            let el_residuals = (0..n)
                .map(|i| {
                    let mut r = v_final[i].scaled(tracking.mus[i]);
                    r.axpy(1.0, &q[i].masked(&tracking.control_masks[i]));
                    r.norm(g)
                })
                .collect();
            let state_t = u_final.slots.last().cloned().unwrap_or_else(|| VelocityField::zeros(g));
            return Ok(NashSolution {
                w: v_final,
                state_t,
                iterations: it,
                relative_residual: if scale > 0.0 { update / scale } else { 0.0 },
                el_residuals,
                method: "tracking",
            });
        }
        if !update.is_finite() {
            break;
        }
        if update > prev {
            damping = 0.5;
            growth += 1;
            if growth > 20 {
                break;
            }
        }
        prev = update;
        let mut relaxed = u.scaled(1.0 - damping);
        relaxed.axpy(damping, &next);
        u = relaxed;
    }
    Err(Error::FixedPointDiverged {
        iterations: FIXED_POINT_MAX,
    })
}

/// Tracking cost `J_i = alpha_i/2 int |u - u_d|^2 on omega_d + mu_i/2 int |v^i|^2`.
pub fn tracking_cost(i: usize, states: &SpaceTimeField, v_i: &SpaceTimeField, tracking: &TrackingData, model: &Model) -> f64 {
    let g = &model.grid;
    let mut miss = states.clone();
    miss.axpy(-1.0, &tracking.targets[i]);
    let miss = miss.masked(&tracking.observation_masks[i]);
    let vi = v_i.masked(&tracking.control_masks[i]);
    0.5 * tracking.alphas[i] * miss.dot(&miss, g) + 0.5 * tracking.mus[i] * vi.dot(&vi, g)
}

//! Runtime monitors: discrete energy balance and Grönwall bound, the
//! smallness constant of the coupled leader-adjoint system, the Fubini
//! symmetry of the memory quadrature and the central adjoint identity
//! `(u(T), f)_H = int phi v chi_O`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{dot_h, h1_seminorm_sq, laplacian_unchecked, norm_h, VelocityField, WeightField};
use crate::kernel::{eval_kernel, MemoryScheme};
use crate::krylov::power_iteration;
use crate::nash::{solve_nash_via_optimality_system, CostParams};
use crate::par_range;
use crate::solvers::{memory_free_reference, solve_leader_adjoint_pair, Model, SpaceTimeField, Trajectory};
use crate::stokes::SaddleFactorization;

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    /// `|phi^n|^2` in the solver's time direction.
    pub kinetic: Vec<f64>,
    /// `||phi^n||^2 = (-lap phi^n, phi^n)`.
    pub h1: Vec<f64>,
    /// `(H^n, phi^n)`, the memory term paired with the state.
    pub memory: Vec<f64>,
    /// Residual of the discrete energy identity per step (entry 0 unused).
    pub balance_residual: Vec<f64>,
    pub max_balance_residual: f64,
    pub balance_tolerance: f64,
    /// `max_n |phi^n|^2 / |phi^0|^2`.
    pub max_ratio: f64,
    /// `exp(T)`.
    pub bound: f64,
    pub bound_ok: bool,
    pub monotone: bool,
}

/// Energy quantities of an unforced trajectory. The step identity
/// `(|u^n|^2 - |u^{n-1}|^2 + |u^n - u^{n-1}|^2)/(2dt) + mu ||u^n||^2 - (H^n, u^n) = 0`
/// holds exactly for the implemented scheme (pressure drops out by
/// orthogonality).
pub fn energy_monitor(traj: &Trajectory, model: &Model) -> EnergyReport {
    let g = &model.grid;
    let seq: Vec<&VelocityField> = traj.in_solver_time();
    let weights = model.lag_weights();
    let laps: Vec<VelocityField> = seq.iter().map(|u| laplacian_unchecked(u, g)).collect();
    let kinetic: Vec<f64> = seq.iter().map(|u| dot_h(u, u, g)).collect();
    let h1: Vec<f64> = seq.iter().map(|u| h1_seminorm_sq(u, g)).collect();
    let mut memory = vec![0.0];
    let mut balance = vec![0.0];
    for n in 1..seq.len() {
        let mut hist = VelocityField::zeros(g);
        for k in 1..=n {
            hist.axpy(weights[n - k], &laps[k]);
        }
        let mem = dot_h(&hist, seq[n], g);
        let jump = seq[n].sub(seq[n - 1]);
        let res = (kinetic[n] - kinetic[n - 1] + dot_h(&jump, &jump, g)) / (2.0 * g.dt) + model.kernel.mu * h1[n] - mem;
        memory.push(mem);
        balance.push(res);
    }
    let e0 = kinetic[0];
    let max_ratio = if e0 > 0.0 {
        kinetic.iter().fold(0.0f64, |m, k| m.max(k / e0))
    } else if kinetic.iter().all(|&k| k == 0.0) {
        0.0
    } else {
        f64::INFINITY
    };
    let bound = g.spec.t_final.exp();
    let scale = kinetic.iter().fold(0.0f64, |m, k| m.max(*k)) / g.dt;
    EnergyReport {
        max_balance_residual: balance.iter().fold(0.0f64, |m, r| m.max(r.abs())),
        balance_tolerance: 1e-10 * scale,
        monotone: kinetic.windows(2).all(|w| w[1] <= w[0]),
        bound_ok: max_ratio <= bound,
        kinetic,
        h1,
        memory,
        balance_residual: balance,
        max_ratio,
        bound,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AppendixConstants {
    /// `|u|^2 <= c0 ||u||^2` on divergence-free fields.
    pub c0: f64,
    /// `||L_i L_i* f||^2 <= K_i^2 |f|^2`.
    pub k_sq: Vec<f64>,
    /// `C1 = 2 mu max_i K_i^2`.
    pub c1: f64,
    pub rho4_sum: f64,
    pub alpha_sq_sum: f64,
    pub beta: f64,
}

/// Discrete constants of the smallness condition, from power iteration on
/// the grid operators.
pub fn appendix_constants(alphas: &[f64], weights: &[WeightField], model: &Model) -> Result<AppendixConstants> {
    let g = &model.grid;
    let mu = model.kernel.mu;
    let stokes = SaddleFactorization::with_coefficients(g, 0.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let start = model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0)))?;
    let (c0, _) = power_iteration(|x| Ok(stokes.solve_velocity(&VelocityField::from_vec(g, x.to_vec())?).data), &start.data, 1e-10, 5000)?;
    let k_sq = par_range(model.n_followers(), |i| {
        let mask = &model.follower_masks[i];
        let gram = |f: &VelocityField| -> Result<VelocityField> { model.terminal_of(&model.adjoint_slots(f)?.masked(mask)) };
        power_iteration(
            |x| {
                let y = gram(&VelocityField::from_vec(g, x.to_vec())?)?;
                let ly = laplacian_unchecked(&y, g).scaled(-1.0);
                Ok(gram(&ly)?.data)
            },
            &start.data,
            1e-10,
            5000,
        )
        .map(|(l, _)| l)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let c1 = 2.0 * mu * k_sq.iter().copied().fold(0.0, f64::max);
    let rho4_sum: f64 = weights.iter().map(|w| w.sup_norm().powi(4)).sum();
    let alpha_sq_sum: f64 = alphas.iter().map(|a| a * a).sum();
    Ok(AppendixConstants {
        c0,
        beta: 1.0 - c0 * c1 * rho4_sum * alpha_sq_sum / mu,
        k_sq,
        c1,
        rho4_sum,
        alpha_sq_sum,
    })
}

pub(crate) fn smallness_beta(alphas: &[f64], weights: &[WeightField], model: &Model) -> Result<f64> {
    Ok(appendix_constants(alphas, weights, model)?.beta)
}

#[derive(Debug, Clone, Serialize)]
pub struct SmallnessReport {
    pub constants: AppendixConstants,
    pub beta: f64,
    /// `sum_i ||xi_i(T)||^2` from the coupled solve.
    pub measured: f64,
    /// `C1 sum alpha_i^2 |f|^2 / (beta mu)`.
    pub bound: f64,
    pub bound_ok: bool,
    pub pair_iterations: usize,
}

/// Solve the coupled pair for `f` and compare the terminal follower energy
/// against the bound implied by the discrete constants.
pub fn appendix_smallness_check(cost: &CostParams, model: &Model, f: &VelocityField) -> Result<SmallnessReport> {
    let g = &model.grid;
    let constants = appendix_constants(&cost.alphas, &cost.weights, model)?;
    let beta = constants.beta;
    let pair = solve_leader_adjoint_pair(f, &cost.alphas, &cost.weights, model)?;
    let measured: f64 = pair.xi.iter().map(|x| h1_seminorm_sq(x.terminal(), g)).sum();
    let f_sq = dot_h(f, f, g);
    let bound = if constants.alpha_sq_sum == 0.0 {
        0.0
    } else {
        constants.c1 * constants.alpha_sq_sum * f_sq / (beta * model.kernel.mu)
    };
    Ok(SmallnessReport {
        bound_ok: beta > 0.0 && measured <= bound * (1.0 + 1e-12) + f64::MIN_POSITIVE,
        beta,
        measured,
        bound,
        pair_iterations: pair.iterations,
        constants,
    })
}

/// Trapezoid weight of node `k` in `0..=n`.
fn trap(k: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else if k == 0 || k == n {
        0.5
    } else {
        1.0
    }
}

/// Both orderings of the double sum
/// `sum_t sum_{s<=t} g(t-s) (lap a(s), b(t))` for random smooth histories;
/// returns the largest relative difference over `n_trials`.
pub fn fubini_check(model: &Model, n_trials: usize, seed: u64) -> Result<f64> {
    let g = &model.grid;
    let nt = g.nt();
    let dt = g.dt;
    let kern: Vec<f64> = (0..=nt)
        .map(|j| eval_kernel(&model.kernel, j as f64 * dt))
        .collect::<Result<_>>()?;
    let worst = par_range(n_trials, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64 * 104_729));
        let mut history = || -> Vec<VelocityField> {
            let (kx, ky) = (rng.random_range(1..4) as f64, rng.random_range(1..4) as f64);
            let (a, w, ph) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..4.0), rng.random_range(0.0..3.0));
            (0..=nt)
                .map(|n| {
                    let t = n as f64 * dt;
                    VelocityField::from_fn(g, |x, y, c| {
                        let base = (kx * std::f64::consts::PI * x).sin() * (ky * std::f64::consts::PI * y).sin();
                        (a + (w * t + ph).sin()) * if c == 0 { base } else { 0.5 * base + x * y }
                    })
                })
                .collect()
        };
        let (a, b) = (history(), history());
        let lap_a: Vec<VelocityField> = a.iter().map(|u| laplacian_unchecked(u, g)).collect();
        let lap_b: Vec<VelocityField> = b.iter().map(|u| laplacian_unchecked(u, g)).collect();
        let outer = |n: usize| trap(n, nt) * dt;
        let mut s1 = 0.0;
        for n in 0..=nt {
            for k in 0..=n {
                s1 += outer(n) * trap(k, n) * dt * kern[n - k] * dot_h(&lap_a[k], &b[n], g);
            }
        }
        let mut s2 = 0.0;
        for n in 0..=nt {
            for m in n..=nt {
                s2 += outer(m) * trap(n, m) * dt * kern[m - n] * dot_h(&lap_b[m], &a[n], g);
            }
        }
        let den = s1.abs().max(s2.abs());
        if den == 0.0 {
            0.0
        } else {
            (s1 - s2).abs() / den
        }
    });
    Ok(worst.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryConsistencyReport {
    pub nts: Vec<usize>,
    /// `max_n |u_ode^n - u_trap^n|` per refinement level.
    pub scheme_differences: Vec<f64>,
    pub observed_orders: Vec<f64>,
    /// Largest relative deviation of the `gamma = 0` run from the
    /// memory-free reference.
    pub gamma0_error: f64,
}

/// Forward solves under a smooth forcing with both memory schemes at each
/// `nt` in `nts` (same geometry and horizon), plus the `gamma = 0` run
/// against the plain Stokes stepper.
pub fn memory_consistency(model: &Model, nts: &[usize]) -> Result<MemoryConsistencyReport> {
    use std::f64::consts::PI;
    let forcing = |g: &crate::geometry::Grid| {
        SpaceTimeField::from_fn(g, |n, x, y, c| {
            let t = (n + 1) as f64 * g.dt;
            let s = (0.5 * PI * t).sin().powi(2);
            if c == 0 {
                s * (2.0 * PI * y).sin() * (PI * x).sin().powi(2)
            } else {
                -s * (2.0 * PI * x).sin() * (PI * y).sin().powi(2) + s * x * y
            }
        })
    };
    let at = |nt: usize, kernel, scheme| -> Result<Model> {
        let grid = crate::geometry::build_grid(crate::geometry::GridSpec { nt, ..model.grid.spec })?;
        Model::new(grid, kernel, scheme, model.leader_region, model.follower_regions.clone())
    };
    let scheme_differences = nts
        .iter()
        .map(|&nt| {
            let ode = at(nt, model.kernel, MemoryScheme::Ode)?;
            let trap = at(nt, model.kernel, MemoryScheme::Trapezoid)?;
            let f = forcing(&ode.grid);
            let (a, b) = (ode.states_of(&f)?, trap.states_of(&f)?);
            Ok(a.slots
                .iter()
                .zip(&b.slots)
                .map(|(x, y)| norm_h(&x.sub(y), &ode.grid))
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let observed_orders = scheme_differences.windows(2).map(|w| (w[0] / w[1]).log2()).collect();

    let plain = model.with_kernel(model.kernel.without_memory(), model.scheme)?;
    let f = forcing(&model.grid);
    let got = plain.states_of(&f)?;
    let reference = memory_free_reference(&f, model.kernel.mu, &model.grid)?;
    let scale = reference.iter().map(|r| norm_h(r, &model.grid)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let gamma0_error = got
        .slots
        .iter()
        .zip(&reference[1..])
        .map(|(a, b)| norm_h(&a.sub(b), &model.grid) / scale)
        .fold(0.0, f64::max);
    Ok(MemoryConsistencyReport {
        nts: nts.to_vec(),
        scheme_differences,
        observed_orders,
        gamma0_error,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjointTrial {
    pub lhs: f64,
    pub rhs: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjointReport {
    pub trials: Vec<AdjointTrial>,
    pub max_relative_error: f64,
}

/// For random `(v, f)`: `u(T)` from the followers' equilibrium (zero
/// target) with leader control `v`, `phi` from the coupled pair with datum
/// `f`; compares `(u(T), f)_H` with `<v chi_O, phi>`.
pub fn adjoint_identity_check(cost: &CostParams, model: &Model, n_trials: usize, seed: u64) -> Result<AdjointReport> {
    let g = &model.grid;
    let zero_target = cost.with_target(VelocityField::zeros(g));
    let trials = par_range(n_trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(t as u64));
        let v = SpaceTimeField::from_fn(g, |_, _, _, _| rng.random_range(-1.0..1.0)).masked(&model.leader_mask);
        let f = model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0)))?;
        let u_t = solve_nash_via_optimality_system(&v, &zero_target, model)?.state_t;
        let pair = solve_leader_adjoint_pair(&f, &cost.alphas, &cost.weights, model)?;
        let lhs = dot_h(&u_t, &f, g);
        let rhs = v.dot(&pair.phi.slot_values().masked(&model.leader_mask), g);
        let scale = norm_h(&u_t, g) * norm_h(&f, g);
        let den = lhs.abs().max(rhs.abs()).max(1e-3 * scale);
        Ok(AdjointTrial {
            lhs,
            rhs,
            relative_error: if den > 0.0 { (lhs - rhs).abs() / den } else { 0.0 },
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(AdjointReport {
        max_relative_error: trials.iter().map(|t| t.relative_error).fold(0.0, f64::max),
        trials,
    })
}

//! Browser front end: three operations returning JSON strings for the
//! static page in `www/`.

use oldnash::config::parse_config;
use oldnash::geometry::{norm_h, Grid};
use oldnash::kernel::{eval_kernel, kernel_params, lag_weights, MemoryScheme};
use oldnash::leader::{minimize_dual, LeaderProblem};
use oldnash::nash::{cost_j_i, solve_nash};
use oldnash::runner::build_scenario;
use oldnash::{ControlSet, VelocityField};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn to_js(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Cell-centred speed from face values (boundary normal faces are zero).
fn speed(u: &VelocityField, g: &Grid) -> Vec<f64> {
    let (nx, ny) = (g.nx(), g.ny());
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let uf = |i: usize| if i == 0 || i == nx { 0.0 } else { u.data[g.u_index(i, j)] };
            let vf = |jj: usize| if jj == 0 || jj == ny { 0.0 } else { u.data[g.v_index(i, jj)] };
            let (a, b) = (0.5 * (uf(i) + uf(i + 1)), 0.5 * (vf(j) + vf(j + 1)));
            out.push((a * a + b * b).sqrt());
        }
    }
    out
}

fn field_json(u: &VelocityField, g: &Grid) -> Value {
    json!({ "nx": g.nx(), "ny": g.ny(), "speed": speed(u, g) })
}

fn scenario_text(n: usize, nt: usize, nu: f64, k: f64, lambda: f64, alpha: f64, seed: u64) -> String {
    format!(
        "[grid]\nnx = {n}\nny = {n}\nnt = {nt}\n[kernel]\nnu = {nu:?}\nk = {k:?}\nlambda = {lambda:?}\n\
         [costs]\nalpha = {alpha:?}\n[run]\nseed = {seed}\n"
    )
}

/// Memory kernel `g(t)` on `samples` points of `[0, t_final]` and the lag
/// weights of both history schemes for `nt` steps.
#[wasm_bindgen]
pub fn kernel_curve(nu: f64, k: f64, lambda: f64, t_final: f64, nt: usize, samples: usize) -> String {
    to_js((|| {
        let p = kernel_params(nu, k, lambda).map_err(|e| e.to_string())?;
        let samples = samples.max(2);
        let t: Vec<f64> = (0..samples).map(|s| t_final * s as f64 / (samples - 1) as f64).collect();
        let g: Vec<f64> = t.iter().map(|&t| eval_kernel(&p, t).unwrap()).collect();
        let dt = t_final / nt.max(1) as f64;
        Ok(json!({
            "mu": p.mu, "gamma": p.gamma, "delta": p.delta, "t": t, "g": g,
            "weights_ode": lag_weights(&p, MemoryScheme::Ode, dt, nt),
            "weights_trapezoid": lag_weights(&p, MemoryScheme::Trapezoid, dt, nt),
        }))
    })())
}

/// Followers' Nash equilibrium for a random leader control.
#[wasm_bindgen]
pub fn nash_equilibrium(n: usize, nt: usize, nu: f64, k: f64, lambda: f64, alpha: f64, seed: u64) -> String {
    to_js((|| {
        let cfg = parse_config(&scenario_text(n, nt, nu, k, lambda, alpha, seed)).map_err(|e| e.to_string())?;
        let s = build_scenario(&cfg).map_err(|e| e.to_string())?;
        let (m, cost) = (&s.model, &s.cost);
        let sol = solve_nash(&s.leader_control, cost, m).map_err(|e| e.to_string())?;
        let controls = ControlSet {
            v: s.leader_control.clone(),
            w: sol.w.clone(),
        };
        let costs: Vec<f64> = (0..cost.n()).map(|i| cost_j_i(i, &controls, cost, &sol.state_t, m)).collect();
        Ok(json!({
            "method": sol.method, "iterations": sol.iterations, "costs": costs,
            "el_residuals": sol.el_residuals,
            "state": field_json(&sol.state_t, &m.grid),
            "target": field_json(&cost.target, &m.grid),
        }))
    })())
}

/// Leader control steering the equilibrium state into the `epsilon` ball
/// around a reachable target.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn leader_control(n: usize, nt: usize, nu: f64, k: f64, lambda: f64, alpha: f64, epsilon: f64, seed: u64) -> String {
    to_js((|| {
        let cfg = parse_config(&scenario_text(n, nt, nu, k, lambda, alpha, seed)).map_err(|e| e.to_string())?;
        let s = build_scenario(&cfg).map_err(|e| e.to_string())?;
        let g = &s.model.grid;
        let problem = LeaderProblem::new(s.model.clone(), s.cost.clone(), epsilon).map_err(|e| e.to_string())?;
        let sol = minimize_dual(&problem).map_err(|e| e.to_string())?;
        Ok(json!({
            "epsilon": epsilon, "distance": sol.distance, "leader_cost": sol.leader_cost,
            "gap": sol.gap, "iterations": sol.iterations,
            "target_norm": norm_h(problem.target(), g),
            "state": field_json(&sol.state_t, g),
            "target": field_json(problem.target(), g),
            "control_final": field_json(sol.v.slots.last().unwrap(), g),
        }))
    })())
}

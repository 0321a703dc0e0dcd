//! Exponential memory kernel `g(t) = gamma * exp(-delta t)` and the two
//! discrete evaluations of the history integral.
//!
//! Both schemes reduce, for trajectories starting from rest, to a Toeplitz
//! convolution `H^n = sum_{k=1..n} w_{n-k} lap u^k`. The weights are exposed
//! through [`lag_weights`] so that the backward solvers and the dense test
//! oracles can reuse exactly the same quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub nu: f64,
    pub k: f64,
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
    pub gamma: f64,
}

/// Physical constants to kernel constants: `mu = k/lambda`, `delta =
/// 1/lambda`, `gamma = (nu - k/lambda)/lambda`.
pub fn kernel_params(nu: f64, k: f64, lambda: f64) -> Result<KernelParams> {
    for (name, v) in [("nu", nu), ("k", k), ("lambda", lambda)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidKernel(format!("{name} must be positive, got {v}")));
        }
    }
    let excess = nu - k / lambda;
    if excess <= 0.0 {
        return Err(Error::NonDissipative(excess));
    }
    Ok(KernelParams {
        nu,
        k,
        lambda,
        mu: k / lambda,
        delta: 1.0 / lambda,
        gamma: excess / lambda,
    })
}

impl KernelParams {
    /// Build directly from `(mu, gamma, delta)`; allows `gamma = 0`, which
    /// switches the memory off.
    pub fn from_rates(mu: f64, gamma: f64, delta: f64) -> Result<Self> {
        if !(mu > 0.0 && delta > 0.0 && gamma >= 0.0) || ![mu, gamma, delta].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "need mu > 0, delta > 0, gamma >= 0 (got {mu}, {delta}, {gamma})"
            )));
        }
        let lambda = 1.0 / delta;
        Ok(Self {
            nu: mu + gamma * lambda,
            k: mu * lambda,
            lambda,
            mu,
            delta,
            gamma,
        })
    }

    pub fn without_memory(&self) -> Self {
        Self {
            gamma: 0.0,
            nu: self.mu,
            ..*self
        }
    }
}

pub fn eval_kernel(params: &KernelParams, t: f64) -> Result<f64> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    Ok(g(params, t))
}

#[inline]
fn g(params: &KernelParams, t: f64) -> f64 {
    params.gamma * (-params.delta * t).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryScheme {
    #[default]
    Ode,
    Trapezoid,
}

impl std::str::FromStr for MemoryScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(Self::Ode),
            "trapezoid" => Ok(Self::Trapezoid),
            other => Err(Error::Invalid(format!("unknown memory scheme '{other}'"))),
        }
    }
}

/// Per-trajectory memory: the auxiliary field `z` for the ODE scheme, the
/// stored Laplacian history for the trapezoid scheme.
#[derive(Debug, Clone)]
pub enum MemoryState {
    Ode { z: VelocityField },
    History { laps: Vec<VelocityField> },
}

impl MemoryState {
    pub fn new(scheme: MemoryScheme, zero: &VelocityField) -> Self {
        match scheme {
            MemoryScheme::Ode => Self::Ode { z: zero.clone() },
            MemoryScheme::Trapezoid => Self::History { laps: vec![zero.clone()] },
        }
    }
}

/// Exponential-integrator constants `(E, c)`: `E = exp(-delta dt)`,
/// `c = gamma (1 - E)/delta`.
pub fn ode_constants(params: &KernelParams, dt: f64) -> (f64, f64) {
    let e = (-params.delta * dt).exp();
    // 1 - exp(-x) without cancellation
    let c = params.gamma * (-(-params.delta * dt).exp_m1()) / params.delta;
    (e, c)
}

/// `z+ = E z + c * lap_u_mid`.
pub fn advance_memory_ode(
    z: &VelocityField,
    laplacian_u: &VelocityField,
    params: &KernelParams,
    dt: f64,
) -> VelocityField {
    let (e, c) = ode_constants(params, dt);
    let mut out = z.scaled(e);
    out.axpy(c, laplacian_u);
    out
}

/// Trapezoidal approximation of `int_0^t g(t - s) lap u(s) ds` at
/// `t = step_index * dt`, from `history[0..=step_index]`.
pub fn convolve_history(
    history: &[VelocityField],
    params: &KernelParams,
    step_index: usize,
    dt: f64,
) -> Result<VelocityField> {
    if history.is_empty() {
        return Err(Error::Invalid("empty history".into()));
    }
    if history.len() <= step_index {
        return Err(Error::Invalid(format!(
            "history has {} entries, need {}",
            history.len(),
            step_index + 1
        )));
    }
    let mut out = history[0].scaled(0.0);
    if step_index == 0 {
        return Ok(out);
    }
    for (k, lap) in history[..=step_index].iter().enumerate() {
        let end = if k == 0 || k == step_index { 0.5 } else { 1.0 };
        out.axpy(end * dt * g(params, (step_index - k) as f64 * dt), lap);
    }
    Ok(out)
}

/// Toeplitz weights `w_0..w_{n_lags-1}` of the history term for a
/// trajectory at rest at `t = 0`. `w_0` multiplies the current Laplacian
/// and is treated implicitly.
pub fn lag_weights(params: &KernelParams, scheme: MemoryScheme, dt: f64, n_lags: usize) -> Vec<f64> {
    match scheme {
        MemoryScheme::Ode => {
            let (e, c) = ode_constants(params, dt);
            let mut w = Vec::with_capacity(n_lags);
            if n_lags > 0 {
                w.push(0.5 * c);
            }
            let mut pow = 1.0;
            for _ in 1..n_lags {
                w.push(0.5 * c * pow * (1.0 + e));
                pow *= e;
            }
            w
        }
        MemoryScheme::Trapezoid => (0..n_lags)
            .map(|j| {
                let base = dt * g(params, j as f64 * dt);
                if j == 0 {
                    0.5 * base
                } else {
                    base
                }
            })
            .collect(),
    }
}

//! Time integrators for the state, the follower sensitivity and adjoint
//! systems, and the coupled leader-adjoint pair.
//!
//! Every system is advanced by the same implicit step. From rest, the
//! stepper realizes a block lower-triangular Toeplitz map `M` from forcing
//! slots to states whose blocks are self-adjoint in `(.,.)_H`; the exact
//! discrete adjoint is therefore `R M R` with `R` the time reversal, i.e. the
//! forward stepper run on reversed data. Backward systems are solved that
//! way, which makes all duality identities hold to roundoff.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    indicator, laplacian_unchecked, Grid, GridMask, PressureField, Projector, Region, VelocityField,
    WeightField,
};
use crate::kernel::{lag_weights, ode_constants, KernelParams, MemoryScheme, MemoryState};
use crate::par_range;
use crate::stokes::{assemble, SaddleFactorization};

/// Fields on the control slots `n = 1..nt` (stored at `n - 1`), paired by
/// `<F, G> = dt * sum_n (F^n, G^n)_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub slots: Vec<VelocityField>,
}

impl SpaceTimeField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            slots: vec![VelocityField::zeros(grid); grid.nt()],
        }
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(usize, f64, f64, usize) -> f64) -> Self {
        let mut slots = Vec::with_capacity(grid.nt());
        for n in 1..=grid.nt() {
            slots.push(VelocityField::from_fn(grid, |x, y, c| f(n, x, y, c)));
        }
        Self { slots }
    }

    pub fn dot(&self, other: &Self, grid: &Grid) -> f64 {
        let raw: f64 = self.slots.iter().zip(&other.slots).map(|(a, b)| a.raw_dot(b)).sum();
        grid.dt * grid.volume() * raw
    }

    pub fn norm(&self, grid: &Grid) -> f64 {
        self.dot(self, grid).sqrt()
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        for (y, x) in self.slots.iter_mut().zip(&x.slots) {
            y.axpy(a, x);
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            slots: self.slots.iter().map(|s| s.scaled(a)).collect(),
        }
    }

    pub fn masked(&self, mask: &GridMask) -> Self {
        Self {
            slots: self.slots.iter().map(|s| mask.apply(s)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|s| s.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.slots.iter().fold(0.0, |m, s| m.max(s.max_abs()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| s.data.iter().copied()).collect()
    }

    pub fn from_flat(grid: &Grid, flat: &[f64]) -> Self {
        let n = grid.n_dof();
        Self {
            slots: flat
                .chunks(n)
                .map(|c| VelocityField {
                    nx: grid.nx(),
                    ny: grid.ny(),
                    data: c.to_vec(),
                })
                .collect(),
        }
    }
}

/// Leader control `v` on the leader region and follower controls `w_i`.
/// Values outside the corresponding masks are ignored by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub v: SpaceTimeField,
    pub w: Vec<SpaceTimeField>,
}

impl ControlSet {
    pub fn zeros(model: &Model) -> Self {
        Self {
            v: SpaceTimeField::zeros(&model.grid),
            w: vec![SpaceTimeField::zeros(&model.grid); model.n_followers()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Forward,
    FollowerSensitivity(usize),
    FollowerAdjoint,
    LeaderAdjoint,
    LeaderSensitivity(usize),
    TrackingAdjoint(usize),
    MemoryFree,
}

/// Velocity snapshots at time levels `0..=nt` in physical time.
///
/// For backward systems `snapshots[n]`, `n < nt`, is the value that pairs
/// with control slot `n + 1`, and `snapshots[nt]` is the projected terminal
/// datum.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub system: SystemKind,
    pub backward: bool,
    pub snapshots: Vec<VelocityField>,
    pub pressures: Option<Vec<PressureField>>,
    pub memory: MemoryState,
    pub params_hash: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> &VelocityField {
        self.snapshots.last().expect("trajectory has nt + 1 snapshots")
    }

    pub fn initial(&self) -> &VelocityField {
        &self.snapshots[0]
    }

    /// Values on the control slots `1..=nt`.
    pub fn slot_values(&self) -> SpaceTimeField {
        let nt = self.snapshots.len() - 1;
        let range = if self.backward { 0..nt } else { 1..nt + 1 };
        SpaceTimeField {
            slots: self.snapshots[range].to_vec(),
        }
    }

    /// Snapshots in the solver's own time direction (`tau = T - t` for
    /// backward systems), starting from the initial/terminal datum.
    pub fn in_solver_time(&self) -> Vec<&VelocityField> {
        if self.backward {
            self.snapshots.iter().rev().collect()
        } else {
            self.snapshots.iter().collect()
        }
    }
}

/// Grid, kernel, memory scheme and control geometry, plus the cached step
/// factorization.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: Grid,
    pub kernel: KernelParams,
    pub scheme: MemoryScheme,
    pub leader_region: Region,
    pub follower_regions: Vec<Region>,
    pub leader_mask: GridMask,
    pub follower_masks: Vec<GridMask>,
    saddle: SaddleFactorization,
    projector: Projector,
    weights: Vec<f64>,
    decay: f64,
    ode_c: f64,
    hash: u64,
}

impl Model {
    pub fn new(
        grid: Grid,
        kernel: KernelParams,
        scheme: MemoryScheme,
        leader: Region,
        followers: Vec<Region>,
    ) -> Result<Self> {
        for (a, ra) in followers.iter().enumerate() {
            for rb in &followers[a + 1..] {
                if ra.overlaps(rb) {
                    return Err(Error::FollowersOverlap);
                }
            }
        }
        let leader_mask = indicator(&leader, &grid)?;
        let follower_masks = followers
            .iter()
            .map(|r| indicator(r, &grid))
            .collect::<Result<Vec<_>>>()?;
        let dt = grid.dt;
        let weights = lag_weights(&kernel, scheme, dt, grid.nt() + 1);
        let (decay, ode_c) = ode_constants(&kernel, dt);
        let saddle = assemble(&grid, dt, kernel.mu + weights[0])?;
        let projector = Projector::new(&grid)?;
        let mut hash = Fnv::default();
        for v in [kernel.mu, kernel.gamma, kernel.delta, grid.spec.lx, grid.spec.ly, grid.spec.t_final] {
            hash.write(&v.to_bits().to_le_bytes());
        }
        for v in [grid.nx(), grid.ny(), grid.nt(), scheme as usize] {
            hash.write(&(v as u64).to_le_bytes());
        }
        Ok(Self {
            grid,
            kernel,
            scheme,
            leader_region: leader,
            follower_regions: followers,
            leader_mask,
            follower_masks,
            saddle,
            projector,
            weights,
            decay,
            ode_c,
            hash: hash.0,
        })
    }

    /// Same geometry with a different kernel or scheme.
    pub fn with_kernel(&self, kernel: KernelParams, scheme: MemoryScheme) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            kernel,
            scheme,
            self.leader_region,
            self.follower_regions.clone(),
        )
    }

    pub fn n_followers(&self) -> usize {
        self.follower_masks.len()
    }

    pub fn project(&self, f: &VelocityField) -> Result<VelocityField> {
        self.projector.project(f)
    }

    /// Toeplitz history weights `w_0..w_nt` of the active scheme.
    pub fn lag_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn params_hash(&self) -> u64 {
        self.hash
    }

    /// Core stepper. `forcing(n, rhs)` adds the slot-`n` forcing (`n` in
    /// `1..=nt`) into the right-hand side.
    fn march(
        &self,
        system: SystemKind,
        keep_pressure: bool,
        forcing: &dyn Fn(usize, &mut VelocityField),
    ) -> Result<(Vec<VelocityField>, Option<Vec<PressureField>>, MemoryState)> {
        let grid = &self.grid;
        let nt = grid.nt();
        let dt = grid.dt;
        let zero = VelocityField::zeros(grid);
        let mut states = Vec::with_capacity(nt + 1);
        states.push(zero.clone());
        let mut pressures = keep_pressure.then(|| vec![PressureField::zeros(grid)]);
        let mut memory = MemoryState::new(self.scheme, &zero);
        let mut lap_prev = zero.clone();
        for n in 1..=nt {
            let mut rhs = states[n - 1].scaled(1.0 / dt);
            forcing(n, &mut rhs);
            match &memory {
                MemoryState::Ode { z } => {
                    rhs.axpy(self.decay, z);
                    rhs.axpy(0.5 * self.ode_c, &lap_prev);
                }
                MemoryState::History { laps } => {
                    for (k, lap) in laps.iter().enumerate().skip(1) {
                        rhs.axpy(self.weights[n - k], lap);
                    }
                }
            }
            let (u, p) = if keep_pressure {
                let (u, p) = self.saddle.solve(&rhs)?;
                (u, Some(p))
            } else {
                (self.saddle.solve_velocity(&rhs), None)
            };
            if !u.is_finite() {
                return Err(Error::NonFinite { system: system_name(system), step: n });
            }
            let lap = laplacian_unchecked(&u, grid);
            match &mut memory {
                MemoryState::Ode { z } => {
                    z.scale(self.decay);
                    z.axpy(0.5 * self.ode_c, &lap_prev);
                    z.axpy(0.5 * self.ode_c, &lap);
                }
                MemoryState::History { laps } => laps.push(lap.clone()),
            }
            lap_prev = lap;
            if let (Some(ps), Some(p)) = (pressures.as_mut(), p) {
                ps.push(p);
            }
            states.push(u);
        }
        Ok((states, pressures, memory))
    }

    fn forward_trajectory(
        &self,
        system: SystemKind,
        keep_pressure: bool,
        forcing: &dyn Fn(usize, &mut VelocityField),
    ) -> Result<Trajectory> {
        let (snapshots, pressures, memory) = self.march(system, keep_pressure, forcing)?;
        Ok(Trajectory {
            system,
            backward: false,
            snapshots,
            pressures,
            memory,
            params_hash: self.hash,
        })
    }

    /// Exact discrete adjoint of the forward map for the functional
    /// `(u^nt, terminal)_H + dt * sum_n (u^n, source^n)_H`.
    pub fn solve_backward(
        &self,
        system: SystemKind,
        terminal: Option<&VelocityField>,
        source: Option<&SpaceTimeField>,
        keep_pressure: bool,
    ) -> Result<Trajectory> {
        let grid = &self.grid;
        let nt = grid.nt();
        let inv_dt = 1.0 / grid.dt;
        let forcing = |m: usize, rhs: &mut VelocityField| {
            if m == 1 {
                if let Some(f) = terminal {
                    rhs.axpy(inv_dt, f);
                }
            }
            if let Some(s) = source {
                rhs.axpy(1.0, &s.slots[nt - m]);
            }
        };
        let (states, pressures, memory) = self.march(system, keep_pressure, &forcing)?;
        let mut snapshots = Vec::with_capacity(nt + 1);
        for k in 0..nt {
            snapshots.push(states[nt - k].clone());
        }
        snapshots.push(match terminal {
            Some(f) => self.project(f)?,
            None => VelocityField::zeros(grid),
        });
        let pressures = pressures.map(|ps| {
            let mut out: Vec<PressureField> = (0..nt).map(|k| ps[nt - k].clone()).collect();
            out.push(PressureField::zeros(grid));
            out
        });
        Ok(Trajectory {
            system,
            backward: true,
            snapshots,
            pressures,
            memory,
            params_hash: self.hash,
        })
    }

    /// Terminal state of the forward map for a raw (unmasked) forcing.
    pub fn terminal_of(&self, forcing: &SpaceTimeField) -> Result<VelocityField> {
        let traj = self.forward_trajectory(SystemKind::Forward, false, &|n, rhs| rhs.axpy(1.0, &forcing.slots[n - 1]))?;
        Ok(traj.snapshots[self.grid.nt()].clone())
    }

    /// States on slots `1..=nt` for a raw forcing.
    pub fn states_of(&self, forcing: &SpaceTimeField) -> Result<SpaceTimeField> {
        let traj = self.forward_trajectory(SystemKind::Forward, false, &|n, rhs| rhs.axpy(1.0, &forcing.slots[n - 1]))?;
        Ok(traj.slot_values())
    }

    /// Adjoint of [`Model::terminal_of`]: slot values of the backward solve.
    pub fn adjoint_slots(&self, terminal: &VelocityField) -> Result<SpaceTimeField> {
        Ok(self
            .solve_backward(SystemKind::FollowerAdjoint, Some(terminal), None, false)?
            .slot_values())
    }
}

fn system_name(s: SystemKind) -> &'static str {
    match s {
        SystemKind::Forward => "forward",
        SystemKind::FollowerSensitivity(_) => "follower sensitivity",
        SystemKind::FollowerAdjoint => "follower adjoint",
        SystemKind::LeaderAdjoint => "leader adjoint",
        SystemKind::LeaderSensitivity(_) => "leader sensitivity",
        SystemKind::TrackingAdjoint(_) => "tracking adjoint",
        SystemKind::MemoryFree => "memory-free reference",
    }
}

#[derive(Default)]
struct Fnv(u64);

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        if self.0 == 0 {
            self.0 = 0xcbf2_9ce4_8422_2325;
        }
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// State driven by `v chi_O + sum_i w_i chi_i` from rest.
pub fn solve_forward(controls: &ControlSet, model: &Model) -> Result<Trajectory> {
    check_controls(controls, model)?;
    model.forward_trajectory(SystemKind::Forward, true, &|n, rhs| {
        add_masked(rhs, &controls.v.slots[n - 1], &model.leader_mask);
        for (w, m) in controls.w.iter().zip(&model.follower_masks) {
            add_masked(rhs, &w.slots[n - 1], m);
        }
    })
}

/// Same as [`solve_forward`] without pressure snapshots.
pub fn forward_terminal(controls: &ControlSet, model: &Model) -> Result<VelocityField> {
    check_controls(controls, model)?;
    let traj = model.forward_trajectory(SystemKind::Forward, false, &|n, rhs| {
        add_masked(rhs, &controls.v.slots[n - 1], &model.leader_mask);
        for (w, m) in controls.w.iter().zip(&model.follower_masks) {
            add_masked(rhs, &w.slots[n - 1], m);
        }
    })?;
    Ok(traj.snapshots[model.grid.nt()].clone())
}

fn add_masked(rhs: &mut VelocityField, f: &VelocityField, mask: &GridMask) {
    for ((r, x), m) in rhs.data.iter_mut().zip(&f.data).zip(&mask.values) {
        *r += m * x;
    }
}

fn check_controls(controls: &ControlSet, model: &Model) -> Result<()> {
    let nt = model.grid.nt();
    let ok_field = |f: &SpaceTimeField| f.slots.len() == nt && f.slots.iter().all(|s| s.matches(&model.grid));
    if !ok_field(&controls.v) || controls.w.len() != model.n_followers() || !controls.w.iter().all(ok_field) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Response `u_hat_i` to a follower perturbation `w_hat_i chi_i`.
pub fn solve_follower_sensitivity(i: usize, w_hat: &SpaceTimeField, model: &Model) -> Result<Trajectory> {
    let mask = model
        .follower_masks
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("no follower {i}")))?;
    model.forward_trajectory(SystemKind::FollowerSensitivity(i), false, &|n, rhs| {
        add_masked(rhs, &w_hat.slots[n - 1], mask)
    })
}

/// Backward solve from terminal datum `terminal` with no source.
pub fn solve_follower_adjoint(terminal: &VelocityField, model: &Model) -> Result<Trajectory> {
    if !terminal.matches(&model.grid) {
        return Err(Error::GridMismatch);
    }
    model.solve_backward(SystemKind::FollowerAdjoint, Some(terminal), None, true)
}

/// Memory-free implicit Euler Stokes evolution from rest, written
/// independently of the memory stepper.
pub fn memory_free_reference(forcing: &SpaceTimeField, mu: f64, grid: &Grid) -> Result<Vec<VelocityField>> {
    let fact = assemble(grid, grid.dt, mu)?;
    let mut out = vec![VelocityField::zeros(grid)];
    for f in &forcing.slots {
        let mut rhs = out.last().unwrap().scaled(1.0 / grid.dt);
        rhs.axpy(1.0, f);
        out.push(fact.solve_velocity(&rhs));
    }
    Ok(out)
}

/// Result of the coupled leader-adjoint fixed point.
#[derive(Debug, Clone)]
pub struct LeaderAdjointPair {
    pub phi: Trajectory,
    pub xi: Vec<Trajectory>,
    /// `phi(T) = f + sum_i rho_i^2 xi_i(T)` before projection.
    pub terminal: VelocityField,
    pub iterations: usize,
    pub damping: f64,
}

pub(crate) const PAIR_TOL: f64 = 1e-12;
const PAIR_MAX_ITER: usize = 200;

/// Fixed point on the terminal coupling: `phi` backward from
/// `f + sum rho_i^2 xi_i(T)`, then each `xi_i` forward driven by
/// `-alpha_i phi chi_i`.
pub fn solve_leader_adjoint_pair(
    f: &VelocityField,
    alphas: &[f64],
    weights: &[WeightField],
    model: &Model,
) -> Result<LeaderAdjointPair> {
    let n = model.n_followers();
    if alphas.len() != n || weights.len() != n || !f.matches(&model.grid) {
        return Err(Error::GridMismatch);
    }
    let grid = &model.grid;
    let fnorm = crate::geometry::norm_h(f, grid);
    let coupled = alphas.iter().any(|&a| a != 0.0);
    let mut terminal = f.clone();
    let mut damping = 1.0;
    let mut prev_update = f64::INFINITY;
    let mut growth = 0;
    for it in 1..=PAIR_MAX_ITER {
        let phi = model.solve_backward(SystemKind::LeaderAdjoint, Some(&terminal), None, false)?;
        let phi_slots = phi.slot_values();
        let xi = par_range(n, |i| {
            let mask = &model.follower_masks[i];
            let a = alphas[i];
            model.forward_trajectory(SystemKind::LeaderSensitivity(i), false, &|k, rhs| {
                for ((r, x), m) in rhs.data.iter_mut().zip(&phi_slots.slots[k - 1].data).zip(&mask.values) {
                    *r -= a * m * x;
                }
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut next = f.clone();
        for (x, w) in xi.iter().zip(weights) {
            next.axpy(1.0, &w.apply_squared(x.terminal()));
        }
        let update = crate::geometry::norm_h(&next.sub(&terminal), grid);
        if !coupled || update <= PAIR_TOL * fnorm || fnorm == 0.0 {
            return Ok(LeaderAdjointPair {
                phi,
                xi,
                terminal,
                iterations: it,
                damping,
            });
        }
        if !update.is_finite() {
            break;
        }
        if update > prev_update {
            growth += 1;
            damping = 0.5;
            if growth > 20 {
                break;
            }
        }
        prev_update = update;
        let mut relaxed = terminal.scaled(1.0 - damping);
        relaxed.axpy(damping, &next);
        terminal = relaxed;
    }
    let beta = crate::diagnostics::smallness_beta(alphas, weights, model).unwrap_or(f64::NAN);
    Err(Error::SmallnessViolated { beta })
}

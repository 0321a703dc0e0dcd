//! Dense space-time reference built straight from the stencils: one
//! monolithic system for all steps (velocity, pressure and, for the ODE
//! scheme, the auxiliary memory variable as explicit unknowns), solved by
//! LU. Everything else (adjoints, the follower operator, the coupled pair)
//! is dense linear algebra on top of the resulting solution operator.

#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use oldnash::config::parse_config;
use oldnash::runner::{build_scenario, Scenario};
use oldnash::{MemoryScheme, Model, Region, SpaceTimeField, VelocityField};

pub fn scenario(extra: &str) -> Scenario {
    let text = format!("{extra}\n[run]\nseed = 5\n");
    build_scenario(&parse_config(&text).expect("config")).expect("scenario")
}

pub fn small_scenario(scheme: &str, extra: &str) -> Scenario {
    scenario(&format!("[grid]\nnx = 8\nny = 8\nnt = 4\n[memory]\nscheme = \"{scheme}\"\n{extra}"))
}

pub struct Dense {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub dt: f64,
    pub vol: f64,
    pub n_u: usize,
    pub n_dof: usize,
    pub lap: DMatrix<f64>,
    pub div: DMatrix<f64>,
    /// Forcing stack `(F^1..F^nt)` to velocity stack `(U^1..U^nt)`.
    pub s: DMatrix<f64>,
    coords: Vec<(f64, f64)>,
}

impl Dense {
    pub fn new(model: &Model) -> Self {
        let spec = model.grid.spec;
        let (nx, ny, nt) = (spec.nx, spec.ny, spec.nt);
        let (hx, hy) = (spec.lx / nx as f64, spec.ly / ny as f64);
        let dt = spec.t_final / nt as f64;
        let n_u = (nx - 1) * ny;
        let n_dof = n_u + nx * (ny - 1);
        let n_cells = nx * ny;
        let u_id = |i: usize, j: usize| j * (nx - 1) + (i - 1);
        let v_id = |i: usize, j: usize| n_u + (j - 1) * nx + i;

        let mut coords = vec![(0.0, 0.0); n_dof];
        let mut lap = DMatrix::zeros(n_dof, n_dof);
        for j in 0..ny {
            for i in 1..nx {
                let r = u_id(i, j);
                coords[r] = (i as f64 * hx, (j as f64 + 0.5) * hy);
                lap[(r, r)] -= 2.0 / (hx * hx) + 2.0 / (hy * hy);
                for ii in [i - 1, i + 1] {
                    if ii >= 1 && ii < nx {
                        lap[(r, u_id(ii, j))] += 1.0 / (hx * hx);
                    }
                }
                for jj in [j as isize - 1, j as isize + 1] {
                    if jj >= 0 && (jj as usize) < ny {
                        lap[(r, u_id(i, jj as usize))] += 1.0 / (hy * hy);
                    } else {
                        // wall half a cell away: reflected ghost value
                        lap[(r, r)] -= 1.0 / (hy * hy);
                    }
                }
            }
        }
        for j in 1..ny {
            for i in 0..nx {
                let r = v_id(i, j);
                coords[r] = ((i as f64 + 0.5) * hx, j as f64 * hy);
                lap[(r, r)] -= 2.0 / (hx * hx) + 2.0 / (hy * hy);
                for ii in [i as isize - 1, i as isize + 1] {
                    if ii >= 0 && (ii as usize) < nx {
                        lap[(r, v_id(ii as usize, j))] += 1.0 / (hx * hx);
                    } else {
                        lap[(r, r)] -= 1.0 / (hx * hx);
                    }
                }
                for jj in [j - 1, j + 1] {
                    if jj >= 1 && jj < ny {
                        lap[(r, v_id(i, jj))] += 1.0 / (hy * hy);
                    }
                }
            }
        }
        let mut div = DMatrix::zeros(n_cells, n_dof);
        for j in 0..ny {
            for i in 0..nx {
                let c = j * nx + i;
                if i + 1 < nx {
                    div[(c, u_id(i + 1, j))] += 1.0 / hx;
                }
                if i >= 1 {
                    div[(c, u_id(i, j))] -= 1.0 / hx;
                }
                if j + 1 < ny {
                    div[(c, v_id(i, j + 1))] += 1.0 / hy;
                }
                if j >= 1 {
                    div[(c, v_id(i, j))] -= 1.0 / hy;
                }
            }
        }

        let k = model.kernel;
        let (mu, delta) = (k.k / k.lambda, 1.0 / k.lambda);
        let gamma = (k.nu - k.k / k.lambda) / k.lambda;
        let kern = |t: f64| gamma * (-delta * t).exp();
        let ode = model.scheme == MemoryScheme::Ode;
        let e = (-delta * dt).exp();
        let c = gamma * (1.0 - e) / delta;

        let bs = n_dof + n_cells + if ode { n_dof } else { 0 };
        let size = nt * bs;
        let mut kmat = DMatrix::zeros(size, size);
        let u_off = |s: usize| s * bs;
        let p_off = |s: usize| s * bs + n_dof;
        let z_off = |s: usize| s * bs + n_dof + n_cells;
        for s in 0..nt {
            let n = s + 1;
            for r in 0..n_dof {
                kmat[(u_off(s) + r, u_off(s) + r)] += 1.0 / dt;
                if s > 0 {
                    kmat[(u_off(s) + r, u_off(s - 1) + r)] -= 1.0 / dt;
                }
                for q in 0..n_dof {
                    let l = lap[(r, q)];
                    if l == 0.0 {
                        continue;
                    }
                    kmat[(u_off(s) + r, u_off(s) + q)] -= mu * l;
                    if !ode {
                        kmat[(u_off(s) + r, u_off(s) + q)] -= 0.5 * dt * kern(0.0) * l;
                        for kk in 1..n {
                            kmat[(u_off(s) + r, u_off(kk - 1) + q)] -= dt * kern((n - kk) as f64 * dt) * l;
                        }
                    }
                }
                for cc in 0..n_cells {
                    kmat[(u_off(s) + r, p_off(s) + cc)] += div[(cc, r)];
                }
                if ode {
                    kmat[(u_off(s) + r, z_off(s) + r)] -= 1.0;
                    kmat[(z_off(s) + r, z_off(s) + r)] += 1.0;
                    if s > 0 {
                        kmat[(z_off(s) + r, z_off(s - 1) + r)] -= e;
                    }
                    for q in 0..n_dof {
                        let l = lap[(r, q)];
                        kmat[(z_off(s) + r, u_off(s) + q)] -= 0.5 * c * l;
                        if s > 0 {
                            kmat[(z_off(s) + r, u_off(s - 1) + q)] -= 0.5 * c * l;
                        }
                    }
                }
            }
            // continuity on all cells but the last (the sum is automatic),
            // zero-mean pressure in its place
            for cc in 0..n_cells - 1 {
                for r in 0..n_dof {
                    kmat[(p_off(s) + cc, u_off(s) + r)] = div[(cc, r)];
                }
            }
            for cc in 0..n_cells {
                kmat[(p_off(s) + n_cells - 1, p_off(s) + cc)] = 1.0;
            }
        }
        let mut rhs = DMatrix::zeros(size, nt * n_dof);
        for s in 0..nt {
            for r in 0..n_dof {
                rhs[(u_off(s) + r, s * n_dof + r)] = 1.0;
            }
        }
        let sol = kmat.lu().solve(&rhs).expect("space-time system is singular");
        let mut smat = DMatrix::zeros(nt * n_dof, nt * n_dof);
        for s in 0..nt {
            smat.view_mut((s * n_dof, 0), (n_dof, nt * n_dof))
                .copy_from(&sol.view((u_off(s), 0), (n_dof, nt * n_dof)));
        }
        Self {
            nx,
            ny,
            nt,
            dt,
            vol: hx * hy,
            n_u,
            n_dof,
            lap,
            div,
            s: smat,
            coords,
        }
    }

    pub fn st_len(&self) -> usize {
        self.nt * self.n_dof
    }

    /// Block row of `S` giving `U^nt`.
    pub fn terminal_map(&self) -> DMatrix<f64> {
        self.s.rows((self.nt - 1) * self.n_dof, self.n_dof).into_owned()
    }

    /// Space-time 0/1 mask of a region, from face coordinates.
    pub fn mask(&self, region: &Region) -> DVector<f64> {
        let one = DVector::from_iterator(
            self.n_dof,
            self.coords.iter().map(|&(x, y)| if region.contains(x, y) { 1.0 } else { 0.0 }),
        );
        self.repeat(&one)
    }

    pub fn repeat(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.st_len(), (0..self.nt).flat_map(|_| v.iter().copied()))
    }

    /// Adjoint of the terminal map in `(.,.)_H` against
    /// `<F, G> = dt vol sum F G`.
    pub fn terminal_adjoint(&self) -> DMatrix<f64> {
        self.terminal_map().transpose() / self.dt
    }
}

pub fn st(field: &SpaceTimeField) -> DVector<f64> {
    DVector::from_vec(field.to_flat())
}

pub fn vf(field: &VelocityField) -> DVector<f64> {
    DVector::from_vec(field.data.clone())
}

pub fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let den = a.norm().max(b.norm());
    if den == 0.0 {
        0.0
    } else {
        (a - b).norm() / den
    }
}

/// Dense follower operator `A` (block `i, j` on the full space-time index
/// set; off-support rows get the identity so the system is invertible) and
/// the right-hand side for leader control `v`.
pub struct DenseNash {
    pub a: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

pub fn dense_nash(d: &Dense, s: &Scenario, v: &DVector<f64>, target: &DVector<f64>) -> DenseNash {
    let m = &s.model;
    let n = m.n_followers();
    let len = d.st_len();
    let b = d.terminal_map();
    let bstar = d.terminal_adjoint();
    let masks: Vec<DVector<f64>> = m.follower_regions.iter().map(|r| d.mask(r)).collect();
    let lead = d.mask(&m.leader_region);
    let rho2: Vec<DVector<f64>> = s
        .cost
        .weights
        .iter()
        .map(|w| DVector::from_iterator(d.n_dof, w.values.iter().map(|r| r * r)))
        .collect();
    let mut a = DMatrix::zeros(n * len, n * len);
    let mut rhs = DVector::zeros(n * len);
    let z = &b * lead.component_mul(v);
    for i in 0..n {
        let alpha = s.cost.alphas[i];
        let left = DMatrix::from_diagonal(&masks[i]) * &bstar * DMatrix::from_diagonal(&rho2[i]) * alpha;
        for j in 0..n {
            let block = &left * &b * DMatrix::from_diagonal(&masks[j]);
            a.view_mut((i * len, j * len), (len, len)).copy_from(&block);
        }
        for k in 0..len {
            a[(i * len + k, i * len + k)] += 1.0;
        }
        rhs.rows_mut(i * len, len).copy_from(&(&left * (target - &z)));
    }
    DenseNash { a, rhs }
}

/// `phi(T)` and the slot values of `phi` for the coupled pair with datum
/// `f`: `(I + sum alpha_i rho_i^2 B C_i B*) phi_T = f`.
pub fn dense_pair(d: &Dense, s: &Scenario, f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let m = &s.model;
    let b = d.terminal_map();
    let bstar = d.terminal_adjoint();
    let mut op = DMatrix::identity(d.n_dof, d.n_dof);
    for (i, r) in m.follower_regions.iter().enumerate() {
        let rho2 = DVector::from_iterator(d.n_dof, s.cost.weights[i].values.iter().map(|r| r * r));
        op += DMatrix::from_diagonal(&rho2) * &b * DMatrix::from_diagonal(&d.mask(r)) * &bstar * s.cost.alphas[i];
    }
    let phi_t = op.lu().solve(f).expect("pair operator is singular");
    let slots = &bstar * &phi_t;
    (phi_t, slots)
}

pub fn random_st(s: &Scenario, seed: u64) -> SpaceTimeField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    SpaceTimeField::from_fn(&s.model.grid, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_field(s: &Scenario, seed: u64) -> VelocityField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    VelocityField::from_fn(&s.model.grid, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Forward trajectory under random leader and follower controls.
pub fn forward_error(d: &Dense, s: &Scenario, seed: u64) -> f64 {
    let m = &s.model;
    let controls = oldnash::ControlSet {
        v: random_st(s, seed),
        w: (0..m.n_followers()).map(|i| random_st(s, seed + 1 + i as u64)).collect(),
    };
    let traj = oldnash::solvers::solve_forward(&controls, m).unwrap();
    let mut forcing = d.mask(&m.leader_region).component_mul(&st(&controls.v));
    for (i, r) in m.follower_regions.iter().enumerate() {
        forcing += d.mask(r).component_mul(&st(&controls.w[i]));
    }
    let got = DVector::from_iterator(d.st_len(), traj.snapshots[1..].iter().flat_map(|u| u.data.iter().copied()));
    rel(&got, &(&d.s * forcing))
}

/// Backward solve with terminal datum and source against `S^T`.
pub fn adjoint_error(d: &Dense, s: &Scenario, seed: u64) -> f64 {
    let m = &s.model;
    let f = random_field(s, seed);
    let src = random_st(s, seed + 1);
    let traj = m
        .solve_backward(oldnash::solvers::SystemKind::FollowerAdjoint, Some(&f), Some(&src), false)
        .unwrap();
    let want = d.terminal_adjoint() * vf(&f) + d.s.transpose() * st(&src);
    rel(&st(&traj.slot_values()), &want)
}

fn stack(w: &[SpaceTimeField]) -> DVector<f64> {
    DVector::from_iterator(w.iter().map(|x| x.to_flat().len()).sum(), w.iter().flat_map(|x| x.to_flat()))
}

pub fn apply_a_error(d: &Dense, s: &Scenario, seed: u64) -> f64 {
    let m = &s.model;
    let w: Vec<SpaceTimeField> = (0..m.n_followers())
        .map(|i| random_st(s, seed + i as u64).masked(&m.follower_masks[i]))
        .collect();
    let got = stack(&oldnash::nash::apply_a(&w, &s.cost, m).unwrap());
    let dn = dense_nash(d, s, &DVector::zeros(d.st_len()), &DVector::zeros(d.n_dof));
    rel(&got, &(&dn.a * stack(&w)))
}

/// Nash controls for a random leader control, and the right-hand side.
pub fn nash_errors(d: &Dense, s: &Scenario, seed: u64) -> (f64, f64) {
    let m = &s.model;
    let v = random_st(s, seed);
    let dn = dense_nash(d, s, &st(&v), &vf(&s.cost.target));
    let rhs = stack(&oldnash::nash::nash_rhs(&v, &s.cost, m).unwrap());
    let sol = oldnash::nash::solve_nash(&v, &s.cost, m).unwrap();
    let want = dn.a.clone().lu().solve(&dn.rhs).unwrap();
    (rel(&stack(&sol.w), &want), rel(&rhs, &dn.rhs))
}

/// Terminal coupling and `phi` slot values of the leader-adjoint pair.
pub fn pair_error(d: &Dense, s: &Scenario, seed: u64) -> f64 {
    let m = &s.model;
    let f = random_field(s, seed);
    let pair = oldnash::solvers::solve_leader_adjoint_pair(&f, &s.cost.alphas, &s.cost.weights, m).unwrap();
    let (phi_t, slots) = dense_pair(d, s, &vf(&f));
    rel(&vf(&pair.terminal), &phi_t).max(rel(&st(&pair.phi.slot_values()), &slots))
}

/// Tracking-variant equilibrium state against the monolithic linear system
/// `(I + sum alpha_i/mu_i S C_i S^T D_i) u = S F + sum alpha_i/mu_i S C_i S^T D_i u_d`.
pub fn tracking_error(d: &Dense, s: &Scenario, seed: u64) -> f64 {
    let m = &s.model;
    let tr = s.cost.tracking.as_ref().expect("tracking data");
    let v = random_st(s, seed);
    let sol = oldnash::nash::solve_nash_tracking(&v, m, tr).unwrap();
    let len = d.st_len();
    let mut op = DMatrix::identity(len, len);
    let mut rhs = &d.s * d.mask(&m.leader_region).component_mul(&st(&v));
    for i in 0..m.n_followers() {
        let obs = DVector::from_vec(tr.observation_masks[i].values.clone());
        let ctl = d.repeat(&DVector::from_vec(tr.control_masks[i].values.clone()));
        let k = &d.s * DMatrix::from_diagonal(&ctl) * d.s.transpose() * DMatrix::from_diagonal(&d.repeat(&obs))
            * (tr.alphas[i] / tr.mus[i]);
        rhs += &k * st(&tr.targets[i]);
        op += k;
    }
    let u = op.lu().solve(&rhs).unwrap();
    let want_w: Vec<DVector<f64>> = (0..m.n_followers())
        .map(|i| {
            let ctl = d.repeat(&DVector::from_vec(tr.control_masks[i].values.clone()));
            let obs = d.repeat(&DVector::from_vec(tr.observation_masks[i].values.clone()));
            let q = d.s.transpose() * obs.component_mul(&(&u - st(&tr.targets[i]))) * tr.alphas[i];
            ctl.component_mul(&q) * (-1.0 / tr.mus[i])
        })
        .collect();
    let got_w = stack(&sol.w);
    let want = DVector::from_iterator(got_w.len(), want_w.iter().flat_map(|w| w.iter().copied()));
    rel(&got_w, &want).max(rel(&vf(&sol.state_t), &u.rows((d.nt - 1) * d.n_dof, d.n_dof).into_owned()))
}

/// Dense leader maps: `L` (leader control to equilibrium terminal state,
/// zero follower target), `L*` through the coupled pair, and the shifted
/// target `b = u^T - z0`.
pub struct DenseLeader {
    pub l: DMatrix<f64>,
    pub lstar: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn dense_leader(d: &Dense, s: &Scenario) -> DenseLeader {
    let m = &s.model;
    let n = m.n_followers();
    let len = d.st_len();
    let bmap = d.terminal_map();
    let lead = DMatrix::from_diagonal(&d.mask(&m.leader_region));
    let target = vf(&s.cost.target);
    let dn = dense_nash(d, s, &DVector::zeros(len), &target);
    let lu = dn.a.clone().lu();
    let z = &bmap * &lead;
    // rhs_i is linear in the terminal miss: columns for unit data
    let mut rows = DMatrix::zeros(n * len, len);
    let mut cols = DMatrix::zeros(n * len, d.n_dof);
    for k in 0..d.n_dof {
        let e = DVector::from_fn(d.n_dof, |r, _| if r == k { 1.0 } else { 0.0 });
        cols.set_column(k, &dense_nash(d, s, &DVector::zeros(len), &e).rhs);
    }
    rows -= &cols * &z;
    let w = lu.solve(&rows).unwrap();
    let mut l = z.clone();
    let w0 = lu.solve(&dn.rhs).unwrap();
    let mut z0 = DVector::zeros(d.n_dof);
    for (j, r) in m.follower_regions.iter().enumerate() {
        let cb = &bmap * DMatrix::from_diagonal(&d.mask(r));
        l += &cb * w.rows(j * len, len);
        z0 += &cb * w0.rows(j * len, len);
    }
    let mut lstar = DMatrix::zeros(len, d.n_dof);
    for k in 0..d.n_dof {
        let e = DVector::from_fn(d.n_dof, |r, _| if r == k { 1.0 } else { 0.0 });
        lstar.set_column(k, &(&lead * dense_pair(d, s, &e).1));
    }
    DenseLeader { l, lstar, b: target - z0 }
}

/// Minimizer of `1/2 (Lf, f) + eps |f| - (f, b)` for symmetric `lam`: the
/// `f = (lam + sI)^{-1} b` with `|s f|_H = eps` (zero if `|b|_H <= eps`).
pub fn discrepancy_solution(lam: &DMatrix<f64>, b: &DVector<f64>, eps: f64, vol: f64) -> DVector<f64> {
    let hn = |x: &DVector<f64>| x.norm() * vol.sqrt();
    if hn(b) <= eps {
        return DVector::zeros(b.len());
    }
    let eig = ((lam + lam.transpose()) * 0.5).symmetric_eigen();
    let c = eig.eigenvectors.transpose() * b;
    let solve = |s: f64| -> DVector<f64> {
        let y = DVector::from_fn(c.len(), |k, _| c[k] / (eig.eigenvalues[k].max(0.0) + s));
        &eig.eigenvectors * y
    };
    let (mut lo, mut hi) = (-60.0f64, 30.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s = mid.exp();
        if hn(&(solve(s) * s)) > eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    solve((0.5 * (lo + hi)).exp())
}

pub fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

//! One implicit step of the memory-Stokes operator as a sparse saddle-point
//! solve.
//!
//! The assembled matrix is
//!
//! ```text
//! [ mass*I - mu*lap   -D^T    ] [u]   [rhs]
//! [ -D                -e0 e0^T] [p] = [ 0 ]
//! ```
//!
//! The corner entry pins `p_0` (the divergence rows sum to zero, so the first
//! constraint is redundant); pressure is shifted to zero mean afterwards.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};
use crate::geometry::{Grid, PressureField, VelocityField};

#[derive(Debug, Clone)]
pub struct SaddleFactorization {
    pub mass: f64,
    pub mu: f64,
    n_dof: usize,
    n_cells: usize,
    nx: usize,
    ny: usize,
    triplets: Arc<Vec<(usize, usize, f64)>>,
    lu: Arc<faer::sparse::linalg::solvers::Lu<usize, f64>>,
}

/// Factorize `(I/dt - mu*lap)` with the divergence constraint.
pub fn assemble(grid: &Grid, dt: f64, mu: f64) -> Result<SaddleFactorization> {
    if !(dt > 0.0 && dt.is_finite()) || !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Invalid(format!("assemble needs dt, mu > 0 (got {dt}, {mu})")));
    }
    SaddleFactorization::with_coefficients(grid, 1.0 / dt, mu)
}

impl SaddleFactorization {
    /// Velocity block `mass*I - mu*lap`. `mass = 0` gives the stationary
    /// Stokes operator, `mu = 0` the Leray projection.
    pub fn with_coefficients(grid: &Grid, mass: f64, mu: f64) -> Result<Self> {
        let n_dof = grid.n_dof();
        let n_cells = grid.n_cells;
        let n = n_dof + n_cells;
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in grid.laplacian_matrix().triplets() {
            let mut val = -mu * v;
            if r == c {
                val += mass;
            }
            if val != 0.0 {
                trip.push((r, c, val));
            }
        }
        for (r, c, v) in grid.divergence_matrix().triplets() {
            trip.push((n_dof + r, c, -v));
            trip.push((c, n_dof + r, -v));
        }
        trip.push((n_dof, n_dof, -1.0));
        let ftrip: Vec<Triplet<usize, usize, f64>> =
            trip.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &ftrip)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self {
            mass,
            mu,
            n_dof,
            n_cells,
            nx: grid.nx(),
            ny: grid.ny(),
            triplets: Arc::new(trip),
            lu: Arc::new(lu),
        })
    }

    pub fn dimension(&self) -> usize {
        self.n_dof + self.n_cells
    }

    /// Assembled entries in insertion order (duplicates not merged).
    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.triplets
    }

    /// Solve for `(u, p)` with zero-mean pressure.
    pub fn solve(&self, rhs: &VelocityField) -> Result<(VelocityField, PressureField)> {
        if rhs.data.len() != self.n_dof || rhs.nx != self.nx || rhs.ny != self.ny {
            return Err(Error::GridMismatch);
        }
        let mut buf = vec![0.0; self.dimension()];
        buf[..self.n_dof].copy_from_slice(&rhs.data);
        self.solve_raw(&mut buf);
        let mut p = PressureField {
            data: buf[self.n_dof..].to_vec(),
        };
        p.remove_mean();
        buf.truncate(self.n_dof);
        Ok((
            VelocityField {
                nx: self.nx,
                ny: self.ny,
                data: buf,
            },
            p,
        ))
    }

    /// Velocity part only; skips the pressure copy.
    pub fn solve_velocity(&self, rhs: &VelocityField) -> VelocityField {
        let mut buf = vec![0.0; self.dimension()];
        buf[..self.n_dof].copy_from_slice(&rhs.data);
        self.solve_raw(&mut buf);
        buf.truncate(self.n_dof);
        VelocityField {
            nx: self.nx,
            ny: self.ny,
            data: buf,
        }
    }

    fn solve_raw(&self, buf: &mut [f64]) {
        let n = buf.len();
        let m = faer::MatMut::from_column_major_slice_mut(buf, n, 1);
        self.lu.solve_in_place(m);
    }
}

pub fn stokes_step(
    rhs: &VelocityField,
    fact: &SaddleFactorization,
) -> Result<(VelocityField, PressureField)> {
    fact.solve(rhs)
}

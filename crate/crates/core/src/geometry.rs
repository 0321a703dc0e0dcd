//! Rectangular domain, MAC staggered grid and the discrete function-space
//! operations on it.
//!
//! Velocity unknowns live on interior faces only: `u` on x-faces
//! `(i*hx, (j+1/2)*hy)` for `i = 1..nx-1`, `v` on y-faces
//! `((i+1/2)*hx, j*hy)` for `j = 1..ny-1`. Boundary faces carry the
//! homogeneous Dirichlet value and are never stored. Pressure is cell
//! centered. All faces have the same control volume `hx*hy`, so the
//! discrete H inner product is a uniformly weighted dot product and the
//! stencils below are symmetric in it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stokes::SaddleFactorization;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub nt: usize,
    pub t_final: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 16,
            ny: 16,
            lx: 1.0,
            ly: 1.0,
            nt: 16,
            t_final: 1.0,
        }
    }
}

/// Compressed sparse row matrix used for the fixed grid stencils.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Rows must be pushed in order.
    fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            nrows: rows.len(),
            ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *out = acc;
        }
    }

    /// `y = A^T x`
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.cols[k]] += self.vals[k] * xr;
            }
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }
}

/// An immutable staggered grid plus its stencils.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: GridSpec,
    pub hx: f64,
    pub hy: f64,
    pub dt: f64,
    pub n_u: usize,
    pub n_v: usize,
    pub n_cells: usize,
    laplacian: Csr,
    divergence: Csr,
}

pub fn build_grid(spec: GridSpec) -> Result<Grid> {
    if spec.nx < 4 || spec.ny < 4 {
        return Err(Error::GridTooCoarse {
            nx: spec.nx,
            ny: spec.ny,
        });
    }
    if spec.nt < 2 {
        return Err(Error::InvalidGrid(format!("nt = {} < 2", spec.nt)));
    }
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(spec.lx) || !positive(spec.ly) || !positive(spec.t_final) {
        return Err(Error::InvalidGrid(
            "lx, ly and t_final must be positive".into(),
        ));
    }
    let (nx, ny) = (spec.nx, spec.ny);
    let hx = spec.lx / nx as f64;
    let hy = spec.ly / ny as f64;
    let n_u = (nx - 1) * ny;
    let n_v = nx * (ny - 1);
    let n_cells = nx * ny;
    let mut grid = Grid {
        spec,
        hx,
        hy,
        dt: spec.t_final / spec.nt as f64,
        n_u,
        n_v,
        n_cells,
        laplacian: Csr::from_rows(0, vec![]),
        divergence: Csr::from_rows(0, vec![]),
    };
    grid.laplacian = grid.assemble_laplacian();
    grid.divergence = grid.assemble_divergence();
    Ok(grid)
}

impl Grid {
    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn ny(&self) -> usize {
        self.spec.ny
    }

    pub fn nt(&self) -> usize {
        self.spec.nt
    }

    /// Number of velocity unknowns.
    pub fn n_dof(&self) -> usize {
        self.n_u + self.n_v
    }

    /// Control volume of every face (and every cell).
    pub fn volume(&self) -> f64 {
        self.hx * self.hy
    }

    /// Index of the x-face `(i, j)`, `1 <= i < nx`.
    pub fn u_index(&self, i: usize, j: usize) -> usize {
        j * (self.spec.nx - 1) + (i - 1)
    }

    /// Index of the y-face `(i, j)`, `1 <= j < ny`.
    pub fn v_index(&self, i: usize, j: usize) -> usize {
        self.n_u + (j - 1) * self.spec.nx + i
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.spec.nx + i
    }

    /// Face-center coordinates of every velocity unknown, in storage order.
    pub fn dof_coords(&self) -> Vec<(f64, f64)> {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        let mut out = Vec::with_capacity(self.n_dof());
        for j in 0..ny {
            for i in 1..nx {
                out.push((i as f64 * self.hx, (j as f64 + 0.5) * self.hy));
            }
        }
        for j in 1..ny {
            for i in 0..nx {
                out.push(((i as f64 + 0.5) * self.hx, j as f64 * self.hy));
            }
        }
        out
    }

    pub fn cell_coords(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_cells);
        for j in 0..self.spec.ny {
            for i in 0..self.spec.nx {
                out.push(((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy));
            }
        }
        out
    }

    pub fn laplacian_matrix(&self) -> &Csr {
        &self.laplacian
    }

    pub fn divergence_matrix(&self) -> &Csr {
        &self.divergence
    }

    // Tangential walls use the ghost value -u (wall half a cell away), normal
    // walls coincide with the stored face and contribute zero.
    fn assemble_laplacian(&self) -> Csr {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        let (ax, ay) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        let mut rows = Vec::with_capacity(self.n_dof());
        for j in 0..ny {
            for i in 1..nx {
                let mut row = Vec::with_capacity(5);
                let mut diag = -2.0 * ax - 2.0 * ay;
                if j > 0 {
                    row.push((self.u_index(i, j - 1), ay));
                } else {
                    diag -= ay;
                }
                if i > 1 {
                    row.push((self.u_index(i - 1, j), ax));
                }
                row.push((self.u_index(i, j), diag));
                if i + 1 < nx {
                    row.push((self.u_index(i + 1, j), ax));
                }
                if j + 1 < ny {
                    row.push((self.u_index(i, j + 1), ay));
                } else {
                    diag -= ay;
                    let k = row.iter().position(|&(c, _)| c == self.u_index(i, j)).unwrap();
                    row[k].1 = diag;
                }
                rows.push(row);
            }
        }
        for j in 1..ny {
            for i in 0..nx {
                let mut row = Vec::with_capacity(5);
                let mut diag = -2.0 * ax - 2.0 * ay;
                if j > 1 {
                    row.push((self.v_index(i, j - 1), ay));
                }
                if i > 0 {
                    row.push((self.v_index(i - 1, j), ax));
                } else {
                    diag -= ax;
                }
                if i + 1 >= nx {
                    diag -= ax;
                }
                row.push((self.v_index(i, j), diag));
                if i + 1 < nx {
                    row.push((self.v_index(i + 1, j), ax));
                }
                if j + 1 < ny {
                    row.push((self.v_index(i, j + 1), ay));
                }
                rows.push(row);
            }
        }
        Csr::from_rows(self.n_dof(), rows)
    }

    fn assemble_divergence(&self) -> Csr {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        let mut rows = Vec::with_capacity(self.n_cells);
        for j in 0..ny {
            for i in 0..nx {
                let mut row = Vec::with_capacity(4);
                if i > 0 {
                    row.push((self.u_index(i, j), -1.0 / self.hx));
                }
                if i + 1 < nx {
                    row.push((self.u_index(i + 1, j), 1.0 / self.hx));
                }
                if j > 0 {
                    row.push((self.v_index(i, j), -1.0 / self.hy));
                }
                if j + 1 < ny {
                    row.push((self.v_index(i, j + 1), 1.0 / self.hy));
                }
                rows.push(row);
            }
        }
        Csr::from_rows(self.n_dof(), rows)
    }

    fn check_region(&self, r: &Region) -> Result<()> {
        let ok = r.x0 >= 0.0
            && r.y0 >= 0.0
            && r.x0 <= r.x1
            && r.y0 <= r.y1
            && r.x1 <= self.spec.lx
            && r.y1 <= self.spec.ly
            && [r.x0, r.x1, r.y0, r.y1].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::RegionOutsideDomain([r.x0, r.x1, r.y0, r.y1]))
        }
    }
}

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in domain coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Region {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn whole(grid: &Grid) -> Self {
        Self::new(0.0, grid.spec.lx, 0.0, grid.spec.ly)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    /// Open-set overlap test; rectangles sharing an edge are disjoint.
    pub fn overlaps(&self, other: &Region) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// 0/1 values at every velocity unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub values: Vec<f64>,
}

impl GridMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn apply(&self, field: &VelocityField) -> VelocityField {
        let mut out = field.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, field: &mut VelocityField) {
        for (x, m) in field.data.iter_mut().zip(&self.values) {
            *x *= m;
        }
    }
}

pub fn indicator(region: &Region, grid: &Grid) -> Result<GridMask> {
    grid.check_region(region)?;
    let values = grid
        .dof_coords()
        .into_iter()
        .map(|(x, y)| if region.contains(x, y) { 1.0 } else { 0.0 })
        .collect();
    Ok(GridMask { values })
}

/// Nonnegative weight sampled at every velocity unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub values: Vec<f64>,
}

impl WeightField {
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &WeightField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Pointwise multiplication by `rho^2`.
    pub fn apply_squared(&self, field: &VelocityField) -> VelocityField {
        let mut out = field.clone();
        for (x, r) in out.data.iter_mut().zip(&self.values) {
            *x *= r * r;
        }
        out
    }

    pub fn apply(&self, field: &VelocityField) -> VelocityField {
        let mut out = field.clone();
        for (x, r) in out.data.iter_mut().zip(&self.values) {
            *x *= r;
        }
        out
    }
}

fn taper_1d(x: f64, core: (f64, f64), support: (f64, f64)) -> f64 {
    use std::f64::consts::PI;
    if x >= core.0 && x < core.1 {
        1.0
    } else if x < support.0 || x >= support.1 {
        0.0
    } else if x < core.0 {
        0.5 * (1.0 - (PI * (x - support.0) / (core.0 - support.0)).cos())
    } else {
        0.5 * (1.0 + (PI * (x - core.1) / (support.1 - core.1)).cos())
    }
}

/// Weight equal to one on `core`, zero outside `support` and a cosine taper
/// in between (separable in x and y).
pub fn make_weight(core: &Region, support: &Region, grid: &Grid) -> Result<WeightField> {
    grid.check_region(core)?;
    grid.check_region(support)?;
    if !support.contains_region(core) {
        return Err(Error::CoreNotInSupport);
    }
    Ok(WeightField {
        values: grid
            .dof_coords()
            .into_iter()
            .map(|(x, y)| weight_at(core, support, x, y))
            .collect(),
    })
}

pub fn weight_at(core: &Region, support: &Region, x: f64, y: f64) -> f64 {
    taper_1d(x, (core.x0, core.x1), (support.x0, support.x1))
        * taper_1d(y, (core.y0, core.y1), (support.y0, support.y1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            nx: grid.spec.nx,
            ny: grid.spec.ny,
            data: vec![0.0; grid.n_dof()],
        }
    }

    pub fn from_vec(grid: &Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_dof() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            nx: grid.spec.nx,
            ny: grid.spec.ny,
            data,
        })
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(f64, f64, usize) -> f64) -> Self {
        let n_u = grid.n_u;
        let data = grid
            .dof_coords()
            .into_iter()
            .enumerate()
            .map(|(k, (x, y))| f(x, y, if k < n_u { 0 } else { 1 }))
            .collect();
        Self {
            nx: grid.spec.nx,
            ny: grid.spec.ny,
            data,
        }
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        self.nx == grid.spec.nx && self.ny == grid.spec.ny && self.data.len() == grid.n_dof()
    }

    pub fn axpy(&mut self, a: f64, x: &VelocityField) {
        for (y, x) in self.data.iter_mut().zip(&x.data) {
            *y += a * x;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn sub(&self, other: &VelocityField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &VelocityField) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Unweighted dot product; multiply by `grid.volume()` for `(.,.)_H`.
    pub fn raw_dot(&self, other: &VelocityField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressureField {
    pub data: Vec<f64>,
}

impl PressureField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            data: vec![0.0; grid.n_cells],
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn remove_mean(&mut self) {
        let m = self.mean();
        self.data.iter_mut().for_each(|p| *p -= m);
    }
}

pub fn inner_product_h(a: &VelocityField, b: &VelocityField, grid: &Grid) -> Result<f64> {
    if !a.matches(grid) || !b.matches(grid) {
        return Err(Error::GridMismatch);
    }
    Ok(grid.volume() * a.raw_dot(b))
}

/// `|a|_H`; panics in debug builds on shape mismatch.
pub fn norm_h(a: &VelocityField, grid: &Grid) -> f64 {
    debug_assert!(a.matches(grid));
    (grid.volume() * a.raw_dot(a)).sqrt()
}

pub fn dot_h(a: &VelocityField, b: &VelocityField, grid: &Grid) -> f64 {
    debug_assert!(a.matches(grid) && b.matches(grid));
    grid.volume() * a.raw_dot(b)
}

/// `(p, q)` over cells.
pub fn dot_cells(p: &PressureField, q: &PressureField, grid: &Grid) -> f64 {
    grid.volume() * p.data.iter().zip(&q.data).map(|(a, b)| a * b).sum::<f64>()
}

pub fn divergence(u: &VelocityField, grid: &Grid) -> Result<PressureField> {
    if !u.matches(grid) {
        return Err(Error::GridMismatch);
    }
    let mut out = PressureField::zeros(grid);
    grid.divergence.apply(&u.data, &mut out.data);
    Ok(out)
}

/// Discrete gradient, the negative transpose of [`divergence`].
pub fn gradient(p: &PressureField, grid: &Grid) -> Result<VelocityField> {
    if p.data.len() != grid.n_cells {
        return Err(Error::GridMismatch);
    }
    let mut out = VelocityField::zeros(grid);
    grid.divergence.apply_transpose(&p.data, &mut out.data);
    out.scale(-1.0);
    Ok(out)
}

pub fn laplacian(u: &VelocityField, grid: &Grid) -> Result<VelocityField> {
    if !u.matches(grid) {
        return Err(Error::GridMismatch);
    }
    Ok(laplacian_unchecked(u, grid))
}

pub(crate) fn laplacian_unchecked(u: &VelocityField, grid: &Grid) -> VelocityField {
    let mut out = VelocityField::zeros(grid);
    grid.laplacian.apply(&u.data, &mut out.data);
    out
}

/// `||u||^2 = (-lap u, u)_H`, the discrete H1 seminorm squared.
pub fn h1_seminorm_sq(u: &VelocityField, grid: &Grid) -> f64 {
    -dot_h(&laplacian_unchecked(u, grid), u, grid)
}

/// H-orthogonal projection onto discretely divergence-free fields.
#[derive(Debug, Clone)]
pub struct Projector {
    saddle: SaddleFactorization,
}

impl Projector {
    /// The projection is a saddle solve with identity velocity block.
    pub fn new(grid: &Grid) -> Result<Self> {
        Ok(Self {
            saddle: SaddleFactorization::with_coefficients(grid, 1.0, 0.0)?,
        })
    }

    pub fn project(&self, f: &VelocityField) -> Result<VelocityField> {
        Ok(self.saddle.solve(f)?.0)
    }
}

pub fn leray_project(f: &VelocityField, grid: &Grid) -> Result<VelocityField> {
    if !f.matches(grid) {
        return Err(Error::GridMismatch);
    }
    Projector::new(grid)?.project(f)
}

//! Stackelberg–Nash hierarchical control of the linearized Oldroyd fluid on a
//! MAC grid: state and adjoint solvers, the followers' Nash game, the
//! leader's approximate-controllability dual problem, and the diagnostics
//! that check the discrete duality identities.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod kernel;
pub mod krylov;
pub mod leader;
pub mod nash;
pub mod runner;
pub mod solvers;
pub mod stokes;

pub use error::{Error, Result};
pub use geometry::{
    build_grid, divergence, gradient, indicator, inner_product_h, laplacian, leray_project,
    make_weight, Grid, GridMask, GridSpec, PressureField, Region, VelocityField, WeightField,
};
pub use kernel::{eval_kernel, kernel_params, KernelParams, MemoryScheme};
pub use leader::{LeaderProblem, LeaderSolution};
pub use nash::{CostParams, NashSolution};
pub use solvers::{ControlSet, Model, SpaceTimeField, Trajectory};

/// Order-preserving map, parallel when the `parallel` feature is on. Results
/// are always combined in index order, so reductions stay deterministic.
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// `par_map` over `0..n`.
pub(crate) fn par_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    par_map(&idx, |&i| f(i))
}

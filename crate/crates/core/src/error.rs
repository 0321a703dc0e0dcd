use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid too coarse: need nx, ny >= 4 (got {nx}x{ny})")]
    GridTooCoarse { nx: usize, ny: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("region {0:?} is not inside the domain")]
    RegionOutsideDomain([f64; 4]),
    #[error("weight core region is not contained in its support")]
    CoreNotInSupport,
    #[error("follower domains must be disjoint")]
    FollowersOverlap,
    #[error("field shapes do not match the grid")]
    GridMismatch,
    #[error("non-dissipative parameters: nu - k/lambda = {0} must be positive")]
    NonDissipative(f64),
    #[error("invalid kernel parameters: {0}")]
    InvalidKernel(String),
    #[error("kernel evaluated at negative time {0}")]
    NegativeTime(f64),
    #[error("saddle-point factorization failed: {0}")]
    Factorization(String),
    #[error("non-finite value in {system} at step {step}")]
    NonFinite { system: &'static str, step: usize },
    #[error("smallness condition violated: terminal coupling diverged (appendix beta estimate {beta:.4e})")]
    SmallnessViolated { beta: f64 },
    #[error("optimality-system fixed point diverged after {iterations} iterations; use the operator route")]
    FixedPointDiverged { iterations: usize },
    #[error("Krylov iteration stagnated after {iterations} iterations (relative residual {residual:.3e}, beta0 {beta0:.3e})")]
    Stagnation {
        iterations: usize,
        residual: f64,
        beta0: f64,
    },
    #[error("power iteration did not converge in {0} iterations")]
    PowerIteration(usize),
    #[error("follower game is not coercive (beta0 = {0:.4e} >= 1); leader problem is ill-posed")]
    NotCoercive(f64),
    #[error("dual minimization failed: distance {distance:.6e} exceeds epsilon {epsilon:.6e} (gap {gap:.3e})")]
    DualMinimization {
        distance: f64,
        epsilon: f64,
        gap: f64,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("not a field checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    TruncatedCheckpoint,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::GridTooCoarse { .. } | Error::InvalidGrid(_) => "E_GRID",
            Error::RegionOutsideDomain(_) | Error::CoreNotInSupport | Error::FollowersOverlap => "E_REGION",
            Error::GridMismatch => "E_GRID_MISMATCH",
            Error::NonDissipative(_) | Error::InvalidKernel(_) | Error::NegativeTime(_) => "E_KERNEL",
            Error::Factorization(_) => "E_FACTORIZATION",
            Error::NonFinite { .. } => "E_NON_FINITE",
            Error::SmallnessViolated { .. } => "E_SMALLNESS",
            Error::FixedPointDiverged { .. } => "E_FIXED_POINT",
            Error::Stagnation { .. } => "E_STAGNATION",
            Error::PowerIteration(_) => "E_POWER_ITERATION",
            Error::NotCoercive(_) => "E_NOT_COERCIVE",
            Error::DualMinimization { .. } => "E_DUAL_MINIMIZATION",
            Error::Invalid(_) => "E_INVALID",
            Error::BadMagic | Error::UnsupportedVersion(_) | Error::TruncatedCheckpoint => "E_CHECKPOINT",
            Error::Io(_) => "E_IO",
        }
    }

    /// Process exit status: 3 for numerical failures, 4 for I/O, 2 for bad
    /// input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::BadMagic | Error::UnsupportedVersion(_) | Error::TruncatedCheckpoint => 4,
            Error::GridTooCoarse { .. }
            | Error::InvalidGrid(_)
            | Error::RegionOutsideDomain(_)
            | Error::CoreNotInSupport
            | Error::FollowersOverlap
            | Error::GridMismatch
            | Error::NonDissipative(_)
            | Error::InvalidKernel(_)
            | Error::NegativeTime(_)
            | Error::Invalid(_) => 2,
            _ => 3,
        }
    }
}

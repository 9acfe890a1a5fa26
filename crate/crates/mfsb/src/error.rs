use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("source integrates to {0:e}, expected zero")]
    NonZeroMass(f64),
    #[error("operands live on different grids")]
    GridMismatch,
    #[error("ensemble sizes differ ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("ensemble of {0} paths exceeds the assignment limit of {1}")]
    TooLarge(usize, usize),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid potential: {0}")]
    InvalidPotential(String),
    #[error("{what} did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },
    #[error("continuity equation violated: residual {0:e}")]
    ContinuityViolation(f64),
    #[error("drift step needs {needed} substeps, limit is {limit}")]
    CflViolation { needed: usize, limit: usize },
    #[error("infeasible endpoints: {0}")]
    InfeasibleEndpoints(String),
    #[error("operation requires kappa > 0")]
    NeedsConvexity,
}

pub type Result<T> = std::result::Result<T, Error>;

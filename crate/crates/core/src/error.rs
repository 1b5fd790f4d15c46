use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected} entries, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("time step {dt} violates the single-crossing bound dt*v_max < {limit}")]
    TimeStep { dt: f64, limit: f64 },

    #[error("time lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("iteration diverges: contraction ratio {ratio} >= 1 at iteration {iteration}")]
    Divergence { iteration: usize, ratio: f64 },

    #[error("backward flow leaves the positive cone: {0}")]
    Positivity(String),

    #[error("point outside the ensemble support")]
    OutsideSupport,

    #[error("rejection sampler acceptance {rate:.4} below 1%")]
    Rejection { rate: f64 },
}

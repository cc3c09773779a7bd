use thiserror::Error;

/// Errors raised by field generation, block solves, and the flow driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("{aborted} of {total} samples aborted by solver errors")]
    Reliability { aborted: usize, total: usize },

    /// The point estimates satisfy neither alternative of the scale
    /// selection. Exact monotone inputs never produce this.
    #[error("estimates are inconsistent with monotonicity (telescoping product {product:.6}, target {target:.6})")]
    NoiseInconsistency { product: f64, target: f64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

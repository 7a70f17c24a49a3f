use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid noise operator: {0}")]
    InvalidNoise(String),

    #[error("non-finite state at step {step} (t = {time})")]
    NonFinite { step: usize, time: f64 },

    #[error("optimizer did not converge after {iterations} iterations (best value {best_value})")]
    NotConverged { iterations: usize, best_value: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-elliptic coefficient: conductivity {value} at node {node} must be positive")]
    NonEllipticCoefficient { node: usize, value: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("covariance construction failed: {0}")]
    Construction(String),

    #[error("line search stagnated after {halvings} halvings at iteration {iteration} (objective {objective:e}, gradient norm {grad_norm:e})")]
    Stagnation {
        iteration: usize,
        halvings: usize,
        objective: f64,
        grad_norm: f64,
    },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

use thiserror::Error;

/// Errors raised anywhere in the flow machinery.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotSpd { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("conjugate gradient breakdown: search direction curvature {0:e} <= 0")]
    Breakdown(f64),

    #[error("Lanczos breakdown: {0}")]
    LanczosBreakdown(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported loss composition: {0}")]
    UnsupportedComposition(String),

    #[error("interaction kernel is not finite for pair ({0}, {1})")]
    SingularKernel(usize, usize),

    #[error("initial log-density unavailable: {0}")]
    DensityUnavailable(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { what: String, iterations: usize, residual: f64 },

    #[error("non-finite loss at JKO step {step}, inner iteration {iteration}")]
    NonFiniteLoss { step: usize, iteration: usize },

    #[error("empty particle cloud")]
    EmptyCloud,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::ConfigInvalid(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

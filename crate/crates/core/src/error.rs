use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: &'static str },

    #[error("toy iteration diverged at step {iteration} (q = {q}, mu = {mu})")]
    Divergence { iteration: usize, q: f64, mu: f64 },

    #[error("{what} did not converge in {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("no uniform minorization: every column minimum is zero")]
    NoMinorization,

    #[error("assumption regime violated: {0}")]
    AssumptionViolated(String),

    #[error("empty feasible weight interval: need W > {lower:e} and W < {upper:e}")]
    EmptyWeightInterval { lower: f64, upper: f64 },

    #[error("problem file error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

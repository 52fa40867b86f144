use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("minimizer {argmin} lies on the search window boundary [{lo}, {hi}]")]
    WindowTooSmall { argmin: f64, lo: f64, hi: f64 },

    #[error("singular linear system at row {row}")]
    SingularSystem { row: usize },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("negative intensity {0}")]
    NegativeIntensity(f64),

    #[error("need at least {needed} data points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("training diverged at outer iteration {outer}: {reason}")]
    Diverged { outer: usize, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

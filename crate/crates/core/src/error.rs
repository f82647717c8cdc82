use thiserror::Error;

/// Errors raised by the mixture algebra, estimators and training loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),

    #[error("component {component}: scale must be lower-triangular with positive diagonal")]
    InvalidScale { component: usize },

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("transform matrix is rank deficient")]
    RankDeficient,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training aborted at iteration {iteration} on task {task}: {reason}")]
    TrainingAborted {
        iteration: usize,
        task: String,
        reason: String,
        theta: Vec<f64>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

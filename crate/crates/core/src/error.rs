use thiserror::Error;

/// Errors surfaced by the estimation workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("constraint violated: {0}")]
    ConstraintViolation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model is not additive: {0}")]
    NotAdditive(String),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("unbounded set: {0}")]
    Unbounded(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

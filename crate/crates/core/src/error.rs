use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index:?} out of bounds for dims {dims:?}")]
    OutOfBounds {
        index: (i64, i64, i64),
        dims: (usize, usize, usize),
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("anatomy not found: {0}")]
    AnatomyNotFound(String),
    #[error("did not converge: {0}")]
    Convergence(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

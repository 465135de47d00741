use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("data error: duplicate observation for id {id} at time {time}")]
    DuplicateObservation { id: String, time: i64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("validation error for id {id}: {message}")]
    Validation { id: String, message: String },

    #[error("numeric error for id {id} at time index {t}: {message}")]
    Numeric { id: String, t: usize, message: String },

    #[error("weak identification for id {0}: G_alpha' W^-1 G_alpha is singular")]
    WeakIdentification(String),

    #[error("weighting error for id {id}: {message}")]
    Weighting { id: String, message: String },

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

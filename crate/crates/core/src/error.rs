use thiserror::Error;

/// Errors produced anywhere in the replication pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("pilot {pilot_id}: {message}")]
    Validation { pilot_id: String, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    /// The pilot is older than every observed lifetime.
    #[error("no observed lifetime exceeds age {age_s} s")]
    NoSurvivors { age_s: i64 },

    #[error("failure rate 1 can never reach the availability target")]
    Unsatisfiable,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no valley table for availability {availability} and lease {lease_s} s")]
    MissingValleyTable { availability: f64, lease_s: i64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

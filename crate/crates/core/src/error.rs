use std::path::PathBuf;

use naer_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dates not strictly increasing at index {index}: {prev} then {next}")]
    NonMonotoneDates { index: usize, prev: i64, next: i64 },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("extrapolation: {0}")]
    Extrapolation(String),
    #[error("date {date} is not covered: {reason}")]
    Coverage { date: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch} (non-finite loss){}", dump.as_ref().map(|p| format!(", state dumped to {}", p.display())).unwrap_or_default())]
    Diverged { epoch: usize, dump: Option<PathBuf> },
    #[error("csv: {0}")]
    Csv(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<csv::Error> for CoreError {
    fn from(e: csv::Error) -> Self {
        CoreError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::InvalidArgument(msg.into()))
}

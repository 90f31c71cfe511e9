use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid response {value} for {family} family")]
    InvalidResponse { family: &'static str, value: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("coordinate descent did not converge at lambda index {lambda_index}")]
    NotConverged {
        lambda_index: usize,
        /// Feature order recovered from the part of the path that did converge.
        partial_order: Vec<usize>,
    },

    #[error("empty feature screen at threshold {0}")]
    EmptyScreen(f64),

    #[error("too many folds failed ({failed} of {total})")]
    FoldFailures { failed: usize, total: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

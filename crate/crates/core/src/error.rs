use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("region {region}: duplicate row for {date} at line {line}")]
    DuplicateRow {
        region: String,
        date: NaiveDate,
        line: u64,
    },

    #[error("region {region}: missing date {missing}")]
    DateGap { region: String, missing: NaiveDate },

    #[error("region {0} not found")]
    MissingRegion(String),

    #[error("region {region}: length {found} differs from expected {expected}")]
    LengthMismatch {
        region: String,
        expected: usize,
        found: usize,
    },

    #[error("series too short: need at least {required} points, got {actual}")]
    SeriesTooShort { required: usize, actual: usize },

    #[error("{0}")]
    OutOfRange(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

use std::path::PathBuf;

/// Errors raised by the monitoring toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed input at row {row}: {message}")]
    MalformedInput { row: usize, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no region left after applying the cardinality cap {cap}")]
    EmptyFamily { cap: String },

    #[error("family has no region of cardinality {0}")]
    NoRegionOfSize(usize),

    #[error("cannot bind calibration points to a {kind} family without geometry; supply explicit calibration group assignments")]
    NoGeometry { kind: String },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Precondition(msg.into()))
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

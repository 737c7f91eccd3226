use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or truncated file contents.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Values that violate a data invariant (NaN payload, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Caller supplied an argument outside the accepted domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A loss component or statistic became non-finite.
    #[error("non-finite value in {component}: {value}")]
    Numeric { component: &'static str, value: f64 },

    /// Checkpoint written by an incompatible format revision.
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

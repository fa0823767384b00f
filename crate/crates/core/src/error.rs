use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid argument, shape, or configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Malformed on-disk image.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    /// A referenced context, record, or id does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Data failed a structural validation check.
    #[error("validation error: {0}")]
    Validation(String),
    /// An objective produced a non-finite value during gradient checking.
    #[error("evaluation error at parameter {index}: {message}")]
    Evaluation { index: usize, message: String },
    /// Training diverged.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },
    /// The policy could not answer some records.
    #[error("responder error: untokenizable question in records {}", ids.join(", "))]
    Responder { ids: Vec<String> },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

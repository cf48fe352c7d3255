use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("lookup error: index {index} out of range for {rows} rows")]
    Lookup { index: usize, rows: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{module}: {source}")]
    Context {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
            ErrorClass::Io => 5,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    /// Attaches the name of the module the error surfaced in.
    pub fn within(self, module: &'static str) -> Self {
        Error::Context {
            module,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Lookup { .. }
            | Error::Fit(_)
            | Error::Generation(_) => ErrorClass::Data,
            Error::Domain(_)
            | Error::Shape(_)
            | Error::MetricUndefined(_)
            | Error::Training { .. } => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
            Error::Context { source, .. } => source.class(),
        }
    }
}

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("prerequisite missing: {0}")]
    Prerequisite(String),

    #[error("context overflow: sequence of {len} elements exceeds limit {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("frozen-parameter violation: {0}")]
    FrozenViolation(String),

    #[error("checkpoint corruption: {0}")]
    Corrupt(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code for the CLI: 2 config, 3 prerequisite, 4 integrity, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Parse { .. } => 2,
            Error::Prerequisite(_) => 3,
            Error::Integrity(_) | Error::FrozenViolation(_) | Error::Corrupt(_) => 4,
            Error::Numeric(_) | Error::ContextOverflow { .. } => 5,
            Error::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CalmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalmError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("degenerate vector in {op}: row {row} has norm {norm:e}")]
    DegenerateVector {
        op: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error in {field}: {message}")]
    Format { field: &'static str, message: String },

    #[error("config error in {key}: {message}")]
    Config { key: String, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CalmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CalmError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(field: &'static str, message: impl Into<String>) -> Self {
        CalmError::Format {
            field,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CalmError::Config { .. } | CalmError::Json { .. } => 2,
            CalmError::Io { .. } | CalmError::Format { .. } => 3,
            CalmError::NumericDomain(_) => 4,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error at line {line}: missing or invalid field `{field}`")]
    Schema { line: usize, field: String },

    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("non-finite gradient in parameter `{param}` ({count} entries)")]
    NonFinite { param: String, count: usize },

    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

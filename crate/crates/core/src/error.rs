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

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("{path}:{line}: {detail}")]
    Line {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("degenerate region: {0}")]
    Region(String),

    #[error("id {id} out of range (size {size})")]
    Range { id: usize, size: usize },

    #[error("decoder state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// True for errors that stem from how the program was invoked rather
    /// than from what happened while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}

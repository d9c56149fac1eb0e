use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LunaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LunaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LunaError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LunaError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LunaError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("index {index} out of range (limit {limit})")]
    Bounds { index: usize, limit: usize },

    #[error("character {0:?} is not in the alphabet")]
    Alphabet(char),

    #[error("checksum mismatch for {what}")]
    Checksum { what: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt data at byte offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },

    #[error("non-finite loss at step {step} (batch indices {batch:?})")]
    NonFinite { step: u64, batch: Vec<usize> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

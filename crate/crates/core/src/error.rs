use std::path::PathBuf;

use thiserror::Error;

/// Failures while decoding a checkpoint file.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("bad magic bytes {found:?}, expected \"LCMP\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: needed {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("tensor {name:?} spans bytes {start}..{end} but the payload is {payload} bytes")]
    OutOfBounds {
        name: String,
        start: u64,
        end: u64,
        payload: u64,
    },
    #[error("tensor {name:?}: {reason}")]
    Inconsistent { name: String, reason: String },
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("context length {len} exceeds max_context {max}")]
    ContextLength { len: usize, max: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("ingestion error at line {line}: {reason}")]
    Ingestion { line: usize, reason: String },
    #[error("empty evaluation: every sample was shorter than {0} tokens")]
    EmptyEvaluation(usize),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

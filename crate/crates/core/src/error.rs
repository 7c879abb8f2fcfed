use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: index {index} out of range for {axis} (size {size})")]
    Bounds {
        line: usize,
        axis: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op: op.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Prefixes the message with the block or step that produced the error.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            Error::Shape { op, left, right } => Error::Shape {
                op: format!("{ctx}/{op}"),
                left,
                right,
            },
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

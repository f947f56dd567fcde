use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },
    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("alignment error: query length {queries} exceeds audio length {frames}")]
    Alignment { queries: usize, frames: usize },
    #[error("topology mismatch: expected {expected} vertices, found {found}")]
    Topology { expected: usize, found: usize },
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("unknown phoneme `{0}`")]
    UnknownPhoneme(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

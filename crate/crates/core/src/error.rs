//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, reported with both operand shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index outside a tensor or vocabulary range.
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// Input sequence does not fit the model's position table.
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// Backward called on a graph that was already consumed, or on a
    /// non-scalar node.
    #[error("compute graph error: {0}")]
    Graph(String),

    /// Invalid model/run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion or sampling failure.
    #[error("data error: {0}")]
    Data(String),

    /// Prompt assembly failure (missing demonstration, oversized query, ...).
    #[error("prompt error: {0}")]
    Prompt(String),

    /// Invalid layer-drop request.
    #[error("prune error: {0}")]
    Prune(String),

    /// Optimizer state/parameter mismatch.
    #[error("optimizer error: {0}")]
    Optimizer(String),

    /// Training aborted (non-finite loss, ...), with the offending step.
    #[error("training failed at epoch {epoch}, example {example}: {message}")]
    Training {
        epoch: usize,
        example: usize,
        message: String,
    },

    /// Evaluation over an unusable example set.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Malformed or inconsistent checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// External archive import failure; all problems reported at once.
    #[error("import error:\n{}", .0.join("\n"))]
    Import(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed dataset or weight file content.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Tensor or graph dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Node count exceeds a padded graph's capacity.
    #[error("capacity exceeded: need {needed} nodes but capacity is {capacity}; re-pad with a larger capacity")]
    Capacity { needed: usize, capacity: usize },

    /// Operator graph failed structural validation.
    #[error("invalid op graph at node {node}: {message}")]
    Graph { node: usize, message: String },

    /// Pass applied to a graph that does not satisfy its preconditions.
    #[error("pass error: {0}")]
    Pass(String),

    /// Missing calibration record, weight tensor, or profile entry.
    #[error("missing entry: {0}")]
    Missing(String),

    /// Invalid run configuration (bad pipeline string, flag combination, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure during execution (NaN output, index out of range).
    #[error("execution error at node {node}: {message}")]
    Exec { node: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

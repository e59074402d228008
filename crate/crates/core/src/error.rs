use thiserror::Error;

use crate::domain_graph::DomainId;

#[derive(Debug, Error)]
pub enum AdaGraphError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("duplicate node id {0}")]
    DuplicateNode(DomainId),

    #[error("no parameterized neighbors for node {0}")]
    EmptyGraph(DomainId),

    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),

    #[error("batch of size {got} is too small (need at least {need})")]
    InsufficientBatch { got: usize, need: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("empty dataset{}", .0.map(|d| format!(" for domain {d}")).unwrap_or_default())]
    EmptyDataset(Option<DomainId>),

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("node set mismatch: {0}")]
    NodeSetMismatch(String),

    #[error("refinement buffer holds {len} of {capacity} samples")]
    BufferNotReady { len: usize, capacity: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AdaGraphError> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(AdaGraphError::Dimension { expected, got })
    }
}

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::graph::GraphError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: index {index} out of range for {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("metrics sink: {0}")]
    Metrics(String),
    #[error("training diverged at epoch {epoch} ({phase}): {detail}")]
    Divergence {
        epoch: usize,
        phase: &'static str,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

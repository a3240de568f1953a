//! Dense tensors and a reverse-mode tape, sized for the encoder, the
//! correlation ops, the recurrent policy and the PPO losses.

mod conv;
mod graph;
mod tensor;

pub mod checkpoint;
pub mod init;
pub mod nn;
pub mod optim;
pub mod params;

pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a backward pass; rebuild the forward pass")]
    GraphConsumed,
    #[error("parameter `{0}` is not in the store")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}

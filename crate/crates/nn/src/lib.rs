//! A compact CPU autodiff engine for the convolutional networks in this
//! workspace: NCHW tensors, im2col convolutions on `matrixmultiply`, a
//! reverse-mode tape, Adam, and versioned checkpoints.
//!
//! Everything runs single-threaded, so a fixed seed reproduces a training run
//! bit for bit.

pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::PadMode;
pub use graph::{Gradients, Graph, NormKind, Var};
pub use layers::{AffineNorm, BatchNorm2d, Conv2d, Linear, Norm};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamKey, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

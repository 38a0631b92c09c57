//! Minimal CPU autodiff for convolutional networks: NCHW `f32` tensors, a
//! reverse-mode tape, bias-free im2col convolutions, named parameter stores
//! with flat checkpoints, and Adam.

pub mod conv;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use conv::Padding;
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

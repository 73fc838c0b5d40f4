//! Minimal reverse-mode automatic differentiation over dense tensors.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{huber, huber_grad, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Strided, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of range for {op} (size {len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

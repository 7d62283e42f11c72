//! Dense tensors, reverse-mode differentiation, AdamW and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::gradient_check;
pub use optim::{clip_global_norm, AdamW, AdamWConfig, StepReport};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in `{op}`")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

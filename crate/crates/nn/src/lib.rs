//! A deliberately small CPU neural-network engine.
//!
//! Networks are [`Sequential`] stacks of dense, convolutional, transposed
//! convolutional, pooling and pointwise layers. Every layer has a
//! hand-written backward pass; convolutions lower to one GEMM per image via
//! [`im2col`]. Execution is single-threaded and bit-deterministic for a
//! given machine, which the experiment pipeline relies on for reruns.

pub mod im2col;
pub mod io;
mod layer;
pub mod loss;
mod optim;
mod sequential;

pub use io::Archive;
pub use layer::{sigmoid, Layer, LayerSpec};
pub use optim::Adam;
pub use sequential::{Gradients, Sequential, Trace};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

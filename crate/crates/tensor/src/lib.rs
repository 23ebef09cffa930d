//! Minimal CPU tensor engine with tape-based reverse-mode autodiff.
//!
//! Everything is `f32`, row-major and single-threaded. Matrix products and
//! convolutions go through `matrixmultiply`; the rest are plain loops.

mod gemm;
mod graph;
pub mod nn;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

//! A compact reverse-mode autodiff engine for NCHW image models.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the crate root
//! exposes concrete aliases for the common single-precision case.

pub mod container;
mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use container::Container;
pub use error::{Result, TensorError};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{Bound, ParamId, ParamStore};
pub use rng::{seeded, RngState, SeededRng};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;

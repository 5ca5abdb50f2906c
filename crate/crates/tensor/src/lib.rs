//! Minimal tensor library for training small models on CPU: a tape-based
//! reverse-mode autodiff [`Graph`], parameterized layers, AdamW, and a binary
//! checkpoint container. Everything is generic over [`Scalar`] (`f32`/`f64`)
//! and single-threaded, so a fixed seed reproduces results bit for bit.

pub mod checkpoint;
#[cfg(feature = "gradcheck")]
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{Gradients, Graph, Var};
pub use kernels::AttnSegment;
pub use optim::AdamW;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

//! Dense `f32` tensors, a tape-based reverse-mode autodiff graph, SGD/Adam
//! and a portable seeded RNG.
//!
//! Matrix products go through [`kernels`], which splits work into fixed row
//! blocks. With the default `parallel` feature those blocks run on the rayon
//! pool; without it they run in order on the calling thread. Results are
//! bit-identical either way.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use rng::{seed_rng, Rng};
pub use tensor::Tensor;

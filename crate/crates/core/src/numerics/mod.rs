//! Tensors, reverse-mode autodiff, layers and the optimizer.

mod adam;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod params;
mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, OpKind, Var, PROB_FLOOR};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;

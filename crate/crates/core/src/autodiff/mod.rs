//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
pub(crate) mod linalg;
mod optim;
mod spectral;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Result, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::{Tensor, TensorError};

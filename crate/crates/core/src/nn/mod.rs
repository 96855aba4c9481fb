//! Minimal reverse-mode autodiff over `f64` tensors: just the ops the
//! forecasting models need, computed deterministically on one thread.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{bilinear_matrix, BnUpdate, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;

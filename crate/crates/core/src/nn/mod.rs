//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod graph;
pub mod kernels;
pub mod layers;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvSpec;
pub use optim::{warmup_lr, Adam, AdamConfig};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;

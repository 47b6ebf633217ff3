//! Minimal tensor and reverse-mode autodiff layer used by the networks.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, ParamGrads, Var};
pub use params::ParamStore;
pub(crate) use params::hex;
pub use tensor::Tensor;

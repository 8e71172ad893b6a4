//! Minimal CPU tensor library with reverse-mode gradients, enough to train
//! the landmark network.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

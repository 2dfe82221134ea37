//! Minimal neural-network runtime: tensors, kernels, reverse-mode autograd, layers, Adam.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod weights;

#[cfg(test)]
mod gradcheck;

pub use graph::{Gradients, Graph, LinearMap, Var};
pub use kernels::ConvGeom;
pub use optim::{Adam, LrSchedule};
pub use tensor::Tensor;
pub use weights::{DType, ModelWeights, ParamBuilder, ParamId};

//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.

mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{BoundParams, Parameters};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

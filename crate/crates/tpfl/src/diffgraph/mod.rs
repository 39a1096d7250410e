//! Minimal reverse-mode automatic differentiation on dense f64 tensors.
//!
//! Three pieces: [`Tensor`] with the forward kernels, [`Graph`] which builds
//! a flat evaluation trace and runs the reverse sweep, and a finite-difference
//! oracle in [`fd`] that tests use to cross-check every differentiable op.

pub mod fd;
pub mod graph;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

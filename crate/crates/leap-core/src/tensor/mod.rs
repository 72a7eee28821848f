//! Dense tensors with reverse-mode differentiation.
//!
//! The engine is define-by-run: each forward operation on a [`Graph`] computes
//! its value eagerly and records the node; [`Graph::backward`] replays the
//! tape once in reverse, accumulating gradients for every `requires_grad`
//! leaf. [`Graph::detach`] inserts a stop-gradient node.

mod data;
mod graph;
pub mod gradcheck;
pub mod kernels;

pub use data::TensorData;
pub use graph::{Gradients, Graph, Tensor};

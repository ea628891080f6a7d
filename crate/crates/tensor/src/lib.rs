//! Dense tensors with a dynamic reverse-mode differentiation graph, and the
//! layer set needed for deformable-convolution regime classifiers.
//!
//! The [`Tensor`] type records a graph node for every operation that has at
//! least one input requiring a gradient. Calling [`Tensor::backward`] on a
//! scalar walks that graph in reverse topological order and accumulates
//! gradients into the leaves.

mod element;
mod error;
pub mod gradcheck;
pub mod nn;
mod ops;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, layer_suite, LayerCheck};
pub use tensor::{is_grad_enabled, no_grad, Backward, Tensor};

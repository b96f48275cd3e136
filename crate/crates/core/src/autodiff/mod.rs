//! Minimal dense reverse-mode automatic differentiation.

pub mod check;
mod graph;
mod tensor;

pub use graph::{sigmoid, softmax_in_place, topk_indices, Graph, Var, BCE_CLAMP, NORM_EPS};
pub use tensor::Tensor;

//! Minimal reverse-mode AD: a dense 2-D `Tensor` plus a dynamic-tape `Graph`.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

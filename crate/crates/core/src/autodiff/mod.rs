//! Dense tensors and a reverse-mode automatic differentiation graph.
//!
//! The primitive set is deliberately small: add, multiply, matmul, 2-D
//! convolution, relu, exp, log, sum, mean, softmax, dot and L2 norm.
//! Everything else (cosine similarity, log-sum-exp, normalization) is a
//! composite of those primitives.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{cosine_similarity, Gradients, Graph, Var};
pub use params::{accumulate, scale_gradients, GradientMap, ParameterSet};
pub use tensor::Tensor;

//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse and returns
//! the gradient of every node that depends on a trainable leaf.
//!
//! Parameters live outside the graph in a [`ParamStore`]; each forward pass
//! binds them into a fresh graph, either as trainable leaves or as frozen
//! constants.

mod error;
mod graph;
mod kernels;
mod params;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod wire;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{conv_out_size, naive_conv2d};
pub use params::{cosine_lr, GradAccumulator, ParamId, ParamStore, Params, Sgd};
pub use tensor::Tensor;

//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`]
//! replays them in reverse. Parameters live in a [`ParamStore`] and are
//! bound to a fresh graph for every forward pass.

pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{BackwardCtx, Grads, Graph, Var};
pub use ops::Conv1dGeometry;
pub use optim::{cosine_lr, Adam};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

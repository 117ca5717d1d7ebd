//! Minimal tensor and reverse-mode autodiff engine used by the `cagan-al` crates.
//!
//! Values are dense row-major arrays ([`Tensor`]). Networks keep their weights in a
//! [`ParamStore`]; a fresh [`Graph`] is built for every forward pass and
//! differentiated with [`Graph::backward`].

mod conv;
mod graph;
pub mod kernels;
mod loss;
pub mod nmi;
pub mod nn;
mod norm;
pub mod optim;
pub mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use loss::{log_sigmoid, log_softmax_row};
pub use norm::BatchStats;
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use scalar::{lit, Scalar};
pub use tensor::Tensor;

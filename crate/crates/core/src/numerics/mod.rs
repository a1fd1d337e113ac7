//! Dense `f64` tensors, reverse-mode differentiation, gradient checking and
//! checkpoints. Everything model-shaped in this crate is built on top.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradReport, ParamReport, Stencil};
pub use graph::{Gradients, Graph, Trainable, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

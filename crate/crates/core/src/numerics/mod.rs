//! Dense tensors and a reverse-mode gradient tape with the ops every model
//! in this crate is built from.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, suite_cases, GradOp};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{gaussian, Element, Tensor};

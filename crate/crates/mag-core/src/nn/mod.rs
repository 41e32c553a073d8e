//! Minimal differentiable numeric core: dense tensors, a reverse-mode tape
//! over a fixed op set, masked multi-head attention, rotary embeddings,
//! layer norm, an adaptive-moment optimizer, and a finite-difference
//! gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{GradMap, ParamSet};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense row-major matrices,
//! sized for small transformers and MLPs trained on a single CPU core.
//!
//! The engine is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod graph;
pub mod io;
mod params;
mod real;
mod tensor;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;

pub use graph::{AttnShape, Gradients, Graph, Var};
pub use params::{Adam, ParamGrads, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;

//! Masked autoregressive generation of continuous image tokens, optionally
//! guided by a discrete token prior, on a small synthetic image domain.

pub mod backbone;
pub mod checkpoint;
pub mod diffusion_head;
pub mod discrete_generator;
mod error;
pub mod masking;
pub mod mixture;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tokenizers;
pub mod toy_data;
pub mod training_eval;

pub use error::{MixarError, Result};

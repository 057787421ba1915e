//! Differentiable search over image-generator architectures trained with
//! generative latent optimization, plus pruning, retraining and evaluation.

pub mod error;
pub mod glo;
pub mod harness;
pub mod metrics;
pub mod pruning;
pub mod search_space;
pub mod tensor;

pub use error::{Error, Result};

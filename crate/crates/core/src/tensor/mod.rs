//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod layer;
mod params;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use layer::{Mode, OpKind, OpParams};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

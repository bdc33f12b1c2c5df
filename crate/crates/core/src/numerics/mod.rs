//! Dense `f64` tensors with a recorded tape for reverse-mode differentiation.

mod attention;
mod conv;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

#[cfg(test)]
mod gradcheck_tests;

pub use attention::AttnMask;
pub use optim::{clip_global_norm, global_norm, Adam};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


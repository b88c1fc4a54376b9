//! Deterministic dense-tensor arithmetic with reverse-mode autodiff and
//! per-parameter gradient gating.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor, TensorError};

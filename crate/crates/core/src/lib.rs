//! Domain adaptation for a desk-scale vision-language model via learnable
//! visual probes that cross-attend to every intermediate layer of a frozen
//! vision encoder, together with the competing adaptation strategies and
//! the adaptation/forgetting metrics needed to compare them.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: f64 tensors, reverse-mode autodiff tape, seeded PRNG.
//! - [`nn`]: shared attention/MLP building blocks over the tape.
//! - [`encoder`]: tiny per-frame vision transformer exposing every layer.
//! - [`probes`]: learnable visual probes and their interaction modules.
//! - [`connector`]: vision-language connectors (patch tokens and probes).
//! - [`decoder`]: autoregressive decoder with optional LoRA adapters.
//! - [`model`]: the composite VLM and its forward/generation paths.
//! - [`strategy`]: adaptation strategy presets and parameter gating.
//! - [`trainer`]: Adam training loop and accuracy evaluation.
//! - [`data`]: synthetic source/target domain generators.
//! - [`metrics`]: adaptation deltas, attention rollout, embedding stats.
//! - [`checkpoint`]: shared versioned parameter serialization.

pub mod checkpoint;
pub mod connector;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod probes;
pub mod strategy;
pub mod trainer;
pub mod vocab;

pub use numerics::{ParamId, ParamStore, Rng, Tape, Tensor, TensorError, Var};

/// Errors raised while building or running the model stack.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
}


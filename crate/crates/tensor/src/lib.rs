//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is `f64` and CPU-only. A forward pass records onto a [`Tape`];
//! parameters live in a [`ParamStore`] and are pulled onto the tape on use.
//! After [`Tape::backward`] the parameter gradients are accumulated into the
//! store and an [`AdamW`] step updates the weights.

pub mod checkpoint;
mod error;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{KernelError, Result};
pub use nn::{attention, AttentionOutput, AttentionParams, FourierEmbed, LayerNorm, Linear, Mlp};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

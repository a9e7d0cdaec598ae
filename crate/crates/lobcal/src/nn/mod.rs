//! Minimal tensor and reverse-mode differentiation layer.
//!
//! Provides exactly the primitives the autoencoder needs: affine maps,
//! layer normalization, multi-head self-attention, residual addition,
//! mean-squared-error loss, and the Adam optimizer. Values are computed
//! eagerly on a tape; [`Tape::backward`] walks the tape once in reverse
//! to accumulate gradients.

mod adam;
pub mod check;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{multi_head_self_attention, AttentionVars, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient flowing into {op}")]
    NonFiniteGradient { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

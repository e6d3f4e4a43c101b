//! Dense tensor arithmetic with reverse-mode gradients.
//!
//! Everything numeric in the model runs through a [`Tape`]: forward ops are
//! recorded as they execute, then replayed in reverse to accumulate gradients.
//! The op set is closed and small — matmul, elementwise add/mul, bias add,
//! layer norm, softmax, gelu, embedding lookup, dropout, cross entropy,
//! concat/slice, plus transpose/scale/sum as glue.
//!
//! All code is generic over [`Scalar`]: `f64` for gradient-check and test
//! builds, `f32` for training runs.

mod grad_check;
mod tape;

pub use grad_check::{grad_check, CoordSelection};
pub use tape::{Tape, TensorRef};

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Epsilon inside layer norm's variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// `sqrt(2/pi)`, the leading coefficient of the tanh gelu approximation.
pub const GELU_COEF_A: f64 = 0.797_884_560_802_865_4;

/// Cubic coefficient of the tanh gelu approximation.
pub const GELU_COEF_B: f64 = 0.044_715;

/// Additive attention-mask logit for padded key positions. Large enough that
/// `exp(x - max)` underflows to exactly zero, finite so the tensor invariant
/// (no NaN/Inf anywhere) holds.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (size {size})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward called on a consumed tape")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("grad_check function is not deterministic (two evaluations differ)")]
    NonDeterministic,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Floating-point element type for tensors.
///
/// `f64` is the gradient-check/test width, `f32` the training width.
pub trait Scalar:
    Float
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

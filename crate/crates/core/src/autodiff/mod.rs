//! Reverse-mode automatic differentiation over dense n-dimensional arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record once in reverse and
//! accumulates exact gradients into every tracked leaf. The element type is
//! generic over [`Real`] so the same model code runs in 32-bit for training
//! and in 64-bit for finite-difference verification.

mod check;
mod compose;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use thiserror::Error;

pub use check::{grad_check, grad_check_inputs, GradCheckOptions};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};

/// Floating point element type usable on a [`Tape`].
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: size mismatch on axis {axis} ({left} vs {right})")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },
    #[error("{op}: expected rank {expected}, got {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: cannot reshape {from:?} into {to:?}")]
    Reshape {
        op: &'static str,
        from: Vec<usize>,
        to: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, GradError>;

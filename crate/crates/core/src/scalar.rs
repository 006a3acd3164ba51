//! Scalar abstraction: all numeric kernels are generic over f32/f64.
//!
//! 64-bit is the default everywhere (tests, gradchecks, checkpoints);
//! 32-bit is an opt-in for training speed.

use std::fmt;

use num_traits::{Float, NumAssignOps};

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float + NumAssignOps + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Short name recorded in run metadata ("f32" / "f64").
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

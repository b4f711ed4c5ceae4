//! Scalar abstraction for the numeric core.
//!
//! Everything in the tensor engine and the network math is generic over
//! [`Scalar`], so the same code runs in `f32` or `f64`. The shipped pipeline
//! (ingestion, training, file formats) is pinned to `f64` through the type
//! aliases at the crate root; `f32` exists for callers who want a cheaper
//! forward pass and for exercising the genericity in tests.

use std::fmt::{Debug, Display};

/// Floating-point element type of tensors and network parameters.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`. Panics only on values a float cannot
    /// represent at all; overflow saturates per `as`-cast semantics.
    fn from_f64(x: f64) -> Self;

    /// Widening (or identity) conversion to `f64`.
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `T::from_f64` in constant-heavy numeric code.
#[inline]
pub fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

//! Scalar abstraction: the whole engine is generic over `f32`/`f64`.

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point scalar the tensor engine operates on.
///
/// `f32` is the coding/training precision; `f64` is used by the
/// gradient-check suites, which run the identical code paths.
pub trait Scalar:
    Float + NumAssignOps + NumCast + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

//! Scalar abstraction so the whole stack can run in f32 or f64.
//!
//! Training runs in f32; the f64 instantiation exists chiefly so gradient
//! checks can compare an analytic backward pass against a finite-difference
//! oracle without single-precision cancellation drowning the signal.

use num_complex::Complex;

/// Real scalar underlying a complex tensor. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Complex number over the engine's scalar type.
pub type C<R> = Complex<R>;

/// Shorthand for converting an f64 constant into the active scalar type.
#[inline]
pub fn r<R: Real>(v: f64) -> R {
    R::from_f64(v)
}

/// Complex number from f64 parts in the active scalar type.
#[inline]
pub fn c<R: Real>(re: f64, im: f64) -> C<R> {
    Complex::new(R::from_f64(re), R::from_f64(im))
}

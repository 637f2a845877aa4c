//! Point-wise complex activations.
//!
//! The split ReLU rectifies the real and imaginary parts independently:
//! `crelu(x) = max(re x, 0) + j max(im x, 0)`. Its backward gates each
//! component of the upstream gradient by whether that component of the
//! input was strictly positive, taking the subgradient 0 at exactly 0.
//!
//! The output head applies the logistic function to each component,
//! `cout(x) = sigma(re x) + j sigma(im x)`, squashing both parts into
//! (0, 1) so they can be scored against complex one-hot targets.

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Split ReLU forward.
pub fn crelu_fwd<R: Real>(x: &CTensor<R>) -> CTensor<R> {
    let mut y = x.clone();
    let zero = R::zero();
    for v in y.data_mut() {
        if v.re < zero {
            v.re = zero;
        }
        if v.im < zero {
            v.im = zero;
        }
    }
    y
}

/// Split ReLU backward; `x` is the forward input.
pub fn crelu_bwd<R: Real>(x: &CTensor<R>, dy: &CTensor<R>) -> Result<CTensor<R>> {
    if x.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "relu backward: input shape {:?} vs gradient {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let mut dx = dy.clone();
    let zero = R::zero();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        if !(v.re > zero) {
            d.re = zero;
        }
        if !(v.im > zero) {
            d.im = zero;
        }
    }
    Ok(dx)
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid<R: Real>(z: R) -> R {
    let one = R::one();
    if z >= R::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}

/// Component-wise logistic output forward.
pub fn cout_fwd<R: Real>(x: &CTensor<R>) -> CTensor<R> {
    let mut y = x.clone();
    for v in y.data_mut() {
        v.re = sigmoid(v.re);
        v.im = sigmoid(v.im);
    }
    y
}

/// Logistic output backward; `y` is the forward *output* (so the derivative
/// `sigma' = y (1 - y)` needs no re-evaluation of the exponential).
pub fn cout_bwd<R: Real>(y: &CTensor<R>, dy: &CTensor<R>) -> Result<CTensor<R>> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "output backward: activation shape {:?} vs gradient {:?}",
            y.shape(),
            dy.shape()
        )));
    }
    let one = R::one();
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
        d.re = d.re * v.re * (one - v.re);
        d.im = d.im * v.im * (one - v.im);
    }
    Ok(dx)
}

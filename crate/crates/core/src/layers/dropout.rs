//! Inverted dropout over complex activations.
//!
//! One Bernoulli draw per complex element decides whether both components
//! survive — the real and imaginary parts of a value are never separated.
//! Kept values are scaled by `1 / keep_prob` at training time so inference
//! is a plain identity with no compensation factor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Which elements a dropout application kept, for replay and backward.
#[derive(Debug, Clone)]
pub struct DropMask {
    keep: Vec<bool>,
    keep_prob: f64,
    shape: Vec<usize>,
}

impl DropMask {
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }
}

fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!(
            "dropout keep probability {keep_prob} must lie in (0, 1]"
        )));
    }
    Ok(())
}

/// Training-time dropout: draws a fresh mask from `rng` and applies it.
pub fn dropout_fwd<R: Real>(
    x: &CTensor<R>,
    keep_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(CTensor<R>, DropMask)> {
    check_keep_prob(keep_prob)?;
    let keep: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() < keep_prob).collect();
    let mask = DropMask { keep, keep_prob, shape: x.shape().to_vec() };
    let y = dropout_apply(x, &mask)?;
    Ok((y, mask))
}

/// Apply an existing mask deterministically (used by backward verification).
pub fn dropout_apply<R: Real>(x: &CTensor<R>, mask: &DropMask) -> Result<CTensor<R>> {
    if x.shape() != mask.shape {
        return Err(Error::Shape(format!(
            "dropout mask was drawn for shape {:?}, input is {:?}",
            mask.shape,
            x.shape()
        )));
    }
    let scale = R::from_f64(1.0 / mask.keep_prob);
    let zero = R::zero();
    let mut y = x.clone();
    for (v, &k) in y.data_mut().iter_mut().zip(&mask.keep) {
        if k {
            v.re *= scale;
            v.im *= scale;
        } else {
            v.re = zero;
            v.im = zero;
        }
    }
    Ok(y)
}

/// Dropout backward: the same mask and scaling applied to the gradient.
pub fn dropout_bwd<R: Real>(mask: &DropMask, dy: &CTensor<R>) -> Result<CTensor<R>> {
    dropout_apply(dy, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use rand::SeedableRng;

    fn filled(shape: &[usize]) -> CTensor<f64> {
        let mut t = CTensor::<f64>::zeros(shape).unwrap();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = Complex::new(k as f64 + 1.0, -(k as f64) - 1.0);
        }
        t
    }

    #[test]
    fn keep_prob_one_is_identity() {
        let x = filled(&[2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, mask) = dropout_fwd(&x, 1.0, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.keep().iter().all(|&k| k));
    }

    #[test]
    fn kept_elements_scale_dropped_elements_zero_both_parts() {
        let x = filled(&[100]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, mask) = dropout_fwd(&x, 0.5, &mut rng).unwrap();
        for ((v, o), &k) in y.data().iter().zip(x.data()).zip(mask.keep()) {
            if k {
                assert_eq!(v.re, o.re * 2.0);
                assert_eq!(v.im, o.im * 2.0);
            } else {
                // The whole complex value dies together.
                assert_eq!((v.re, v.im), (0.0, 0.0));
            }
        }
        let dropped = mask.keep().iter().filter(|&&k| !k).count();
        assert!(dropped > 20 && dropped < 80, "suspicious mask: {dropped}/100 dropped");
    }

    #[test]
    fn backward_routes_through_the_same_mask() {
        let x = filled(&[50]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, mask) = dropout_fwd(&x, 0.7, &mut rng).unwrap();
        let dy = filled(&[50]);
        let dx = dropout_bwd(&mask, &dy).unwrap();
        for ((d, g), &k) in dx.data().iter().zip(dy.data()).zip(mask.keep()) {
            if k {
                assert!((d.re - g.re / 0.7).abs() < 1e-12);
            } else {
                assert_eq!((d.re, d.im), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn invalid_keep_prob_is_a_config_error() {
        let x = filled(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(dropout_fwd(&x, 0.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(dropout_fwd(&x, 1.2, &mut rng), Err(Error::Config(_))));
    }
}

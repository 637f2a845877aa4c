//! Complex weight initialization and the statistics used to verify it.
//!
//! Two schemes are provided. The magnitude/phase scheme draws `|W|` from a
//! Rayleigh distribution and the phase uniformly from `(-pi, pi]`, which is
//! equivalent to giving the real and imaginary parts independent zero-mean
//! Gaussians of variance `sigma^2 / 2` each, where `sigma^2 = Var(W) =
//! 2 / fan_in` is the He variance target for ReLU-family activations. The
//! part-wise scheme draws the real and imaginary parts independently from
//! a symmetric uniform distribution whose default bound is chosen so the
//! total complex variance matches the same target, making the two schemes
//! moment-identical and comparable head to head.
//!
//! All draws happen in f64 before casting to the tensor's scalar type, so a
//! given seed produces the same weights regardless of precision.

use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Weight initialization scheme selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Rayleigh magnitude and uniform phase, with the Rayleigh scale derived
    /// from the He variance target.
    RayleighPhase,
    /// Independent uniform real and imaginary parts. `bound` overrides the
    /// default half-width; `None` derives it from fan-in.
    UniformParts { bound: Option<f64> },
}

/// Seeded initialization request used by the network builder.
#[derive(Debug, Clone, Copy)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn rayleigh(seed: u64) -> Self {
        Self { scheme: InitScheme::RayleighPhase, seed }
    }

    pub fn uniform(seed: u64) -> Self {
        Self { scheme: InitScheme::UniformParts { bound: None }, seed }
    }
}

/// Standard deviation target `sqrt(2 / fan_in)` of the full complex weight.
pub fn he_sigma(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::Domain("he_sigma: fan_in must be at least 1".into()));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Rayleigh scale for `|W|`: the per-part Gaussian deviation
/// `he_sigma / sqrt(2) = 1 / sqrt(fan_in)`.
pub fn rayleigh_scale(fan_in: usize) -> Result<f64> {
    Ok(he_sigma(fan_in)? / std::f64::consts::SQRT_2)
}

/// Expected `E[|W|]` under the magnitude/phase scheme:
/// `rayleigh_scale * sqrt(pi/2) = he_sigma * sqrt(pi) / 2`.
pub fn expected_mean_abs(fan_in: usize) -> Result<f64> {
    Ok(rayleigh_scale(fan_in)? * (std::f64::consts::PI / 2.0).sqrt())
}

/// Default half-width for the part-wise uniform scheme,
/// `sqrt(6 / fan_in) / sqrt(2)`, giving each part variance `1 / fan_in` and
/// the whole weight the same `2 / fan_in` variance as the Rayleigh scheme.
pub fn uniform_bound(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::Domain("uniform_bound: fan_in must be at least 1".into()));
    }
    Ok((6.0 / fan_in as f64).sqrt() / std::f64::consts::SQRT_2)
}

/// Uniform draw in the open interval `(0, 1)`.
#[inline]
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draw a tensor with Rayleigh magnitudes and uniform phases.
///
/// Every magnitude is strictly positive and every phase lies in
/// `(-pi, pi]`. Elements are drawn in row-major order, magnitude before
/// phase, so a fixed seed reproduces the tensor byte for byte.
pub fn init_rayleigh_phase<R: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CTensor<R>> {
    let scale = rayleigh_scale(fan_in)?;
    let mut t = CTensor::<R>::zeros(shape)?;
    for v in t.data_mut() {
        let mag = scale * (-2.0 * open_unit(rng).ln()).sqrt();
        let mag = if mag > 0.0 { mag } else { f64::MIN_POSITIVE };
        let phase = (2.0 * rng.gen::<f64>() - 1.0) * std::f64::consts::PI;
        *v = Complex::new(
            R::from_f64(mag * phase.cos()),
            R::from_f64(mag * phase.sin()),
        );
    }
    Ok(t)
}

/// Draw a tensor with independent uniform real and imaginary parts in
/// `(-bound, bound)`. Real part before imaginary, row-major order.
pub fn init_uniform_parts<R: Real>(
    shape: &[usize],
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CTensor<R>> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::Domain(format!("uniform bound {bound} must be positive and finite")));
    }
    let mut t = CTensor::<R>::zeros(shape)?;
    for v in t.data_mut() {
        let re = (2.0 * rng.gen::<f64>() - 1.0) * bound;
        let im = (2.0 * rng.gen::<f64>() - 1.0) * bound;
        *v = Complex::new(R::from_f64(re), R::from_f64(im));
    }
    Ok(t)
}

/// Draw a kernel tensor under the given scheme with the given fan-in.
pub fn init_tensor<R: Real>(
    shape: &[usize],
    fan_in: usize,
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<CTensor<R>> {
    match scheme {
        InitScheme::RayleighPhase => init_rayleigh_phase(shape, fan_in, rng),
        InitScheme::UniformParts { bound } => {
            let b = match bound {
                Some(b) => b,
                None => uniform_bound(fan_in)?,
            };
            init_uniform_parts(shape, b, rng)
        }
    }
}

/// Summary statistics of a weight sample, all computed in f64.
#[derive(Debug, Clone, Copy)]
pub struct SampleStats {
    /// Empirical `E[|W|]`.
    pub mean_abs: f64,
    /// Empirical complex variance `E[|W|^2] - |E[W]|^2`.
    pub variance: f64,
    /// Mean of the complex values (should be near 0).
    pub mean_re: f64,
    pub mean_im: f64,
}

/// Compute magnitude/variance statistics over a sample.
pub fn sample_stats<R: Real>(samples: &[Complex<R>]) -> Result<SampleStats> {
    if samples.is_empty() {
        return Err(Error::Domain("statistics over an empty sample".into()));
    }
    let n = samples.len() as f64;
    let (mut s_abs, mut s_sq, mut s_re, mut s_im) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for v in samples {
        let re = v.re.to_f64();
        let im = v.im.to_f64();
        let sq = re * re + im * im;
        s_abs += sq.sqrt();
        s_sq += sq;
        s_re += re;
        s_im += im;
    }
    let mean_re = s_re / n;
    let mean_im = s_im / n;
    Ok(SampleStats {
        mean_abs: s_abs / n,
        variance: s_sq / n - (mean_re * mean_re + mean_im * mean_im),
        mean_re,
        mean_im,
    })
}

/// Kolmogorov-Smirnov statistic of the magnitudes against the Rayleigh CDF
/// with the given scale.
pub fn ks_rayleigh<R: Real>(samples: &[Complex<R>], scale: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("KS statistic over an empty sample".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("Rayleigh scale {scale} must be positive")));
    }
    let mut mags: Vec<f64> = samples.iter().map(|v| v.norm_sqr().to_f64().sqrt()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = mags.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in mags.iter().enumerate() {
        let f = 1.0 - (-x * x / (2.0 * scale * scale)).exp();
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// Large-sample 1% critical value of the KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Chi-square statistic of the phases against uniformity over `bins`
/// equal-width bins of `(-pi, pi]`.
pub fn phase_chi2<R: Real>(samples: &[Complex<R>], bins: usize) -> Result<f64> {
    if samples.is_empty() || bins < 2 {
        return Err(Error::Domain("phase histogram needs samples and at least 2 bins".into()));
    }
    let mut counts = vec![0usize; bins];
    for v in samples {
        let phase = v.im.to_f64().atan2(v.re.to_f64());
        let unit = (phase + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        let b = ((unit * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let expect = samples.len() as f64 / bins as f64;
    Ok(counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expect;
            d * d / expect
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn he_sigma_matches_closed_forms() {
        assert_eq!(he_sigma(2).unwrap(), 1.0);
        assert_eq!(he_sigma(8).unwrap(), 0.5);
        assert!((he_sigma(108).unwrap() - 0.13608).abs() < 1e-5);
        assert!(matches!(he_sigma(0), Err(Error::Domain(_))));
    }

    #[test]
    fn uniform_bound_gives_matching_total_variance() {
        // Var per part = bound^2 / 3 = 1 / fan_in, so the complex variance
        // is 2 / fan_in, identical to the Rayleigh scheme's target.
        let fan = 8;
        let b = uniform_bound(fan).unwrap();
        assert!((b - (6.0f64 / 8.0).sqrt() / std::f64::consts::SQRT_2).abs() < 1e-15);
        assert!((2.0 * b * b / 3.0 - 2.0 / fan as f64).abs() < 1e-12);
    }

    #[test]
    fn rayleigh_draws_are_deterministic_and_nonzero() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let a: CTensor<f32> = init_rayleigh_phase(&[3, 3, 4, 8], 36, &mut rng1).unwrap();
        let b: CTensor<f32> = init_rayleigh_phase(&[3, 3, 4, 8], 36, &mut rng2).unwrap();
        assert_eq!(a, b);
        for v in a.data() {
            assert!(v.norm_sqr() > 0.0, "zero weight produced");
            let phase = (v.im as f64).atan2(v.re as f64);
            assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&phase));
        }
    }

    #[test]
    fn rayleigh_sample_moments_hit_their_targets() {
        let fan = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(20260816);
        let t: CTensor<f64> = init_rayleigh_phase(&[100_000], fan, &mut rng).unwrap();
        let stats = sample_stats(t.data()).unwrap();

        let var_target = 2.0 / fan as f64;
        assert!(
            (stats.variance - var_target).abs() < 0.05 * var_target,
            "Var(W) = {} vs target {var_target}",
            stats.variance
        );
        let mean_target = expected_mean_abs(fan).unwrap();
        assert!((mean_target - 0.1253314).abs() < 1e-6);
        assert!(
            (stats.mean_abs - mean_target).abs() < 0.02 * mean_target,
            "E|W| = {} vs target {mean_target}",
            stats.mean_abs
        );
        assert!(stats.mean_re.abs() < 2e-3 && stats.mean_im.abs() < 2e-3);

        let ks = ks_rayleigh(t.data(), rayleigh_scale(fan).unwrap()).unwrap();
        assert!(ks < ks_critical_1pct(t.len()), "KS {ks} >= {}", ks_critical_1pct(t.len()));

        // 16 bins, 15 degrees of freedom, 1% critical value 30.578.
        let chi2 = phase_chi2(t.data(), 16).unwrap();
        assert!(chi2 < 30.578, "phase chi-square {chi2}");
    }

    #[test]
    fn uniform_sample_moments_hit_their_targets() {
        let fan = 100;
        let bound = uniform_bound(fan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t: CTensor<f64> = init_uniform_parts(&[100_000], bound, &mut rng).unwrap();
        for v in t.data() {
            assert!(v.re.abs() < bound && v.im.abs() < bound);
        }
        let stats = sample_stats(t.data()).unwrap();
        let var_target = 2.0 / fan as f64;
        assert!(
            (stats.variance - var_target).abs() < 0.05 * var_target,
            "Var(W) = {} vs target {var_target}",
            stats.variance
        );
        assert!(matches!(
            init_uniform_parts::<f32>(&[4], 0.0, &mut rng),
            Err(Error::Domain(_))
        ));
    }
}

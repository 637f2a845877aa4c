//! Complex batch normalization.
//!
//! Each channel treats its complex values as points in the real plane.
//! Training whitens a batch by the inverse square root of the 2x2
//! covariance of (re, im) — so the normalized parts are decorrelated with
//! unit variance, not merely scaled — then applies a learned 2x2 real
//! matrix `gamma` and a complex shift `beta`:
//!
//! ```text
//! xhat_i = V^{-1/2} (x_i - mean)      V = Cov(re, im) + eps*I
//! y_i    = gamma xhat_i + beta
//! ```
//!
//! `gamma` starts at `I / sqrt(2)` so an untrained layer maps the whitened
//! (unit-variance) parts to the variance of a standard complex circular
//! signal, and `beta` starts at zero. Running estimates of mean and
//! covariance are kept with momentum for inference.
//!
//! The backward pass differentiates through the matrix inverse square root.
//! With `H_i = gamma^T G_i`, `A = sum_i H_i c_i^T` over centered inputs
//! `c_i`, and `U = V^{-1/2}`, the chain rule through `U` reduces to a 2x2
//! Sylvester equation `dS S + S dS = dV` solved in the eigenbasis of
//! `S = V^{1/2}`; the per-sample gradient assembles as
//!
//! ```text
//! P_i  = U H_i - (2/N) B c_i          B = sylv(U A U)
//! dX_i = P_i - mean_j(P_j)
//! ```
//!
//! All statistics and the 2x2 algebra run in f64 regardless of the tensor
//! scalar, which keeps the f32 path stable and the gradient checks tight.
//!
//! On-tensor packing: a per-channel 2x2 real matrix `[[m00, m01], [m10,
//! m11]]` is stored as a `[C, 2]` complex tensor with row 0 in element 0
//! (`m00 + j m01`) and row 1 in element 1 (`m10 + j m11`).

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Learned and running state of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnParams<R: Real> {
    /// Learned 2x2 real matrix per channel, packed `[C, 2]`.
    pub gamma: CTensor<R>,
    /// Learned complex shift per channel, `[C]`.
    pub beta: CTensor<R>,
    /// Running mean per channel, `[C]`.
    pub running_mean: CTensor<R>,
    /// Running raw covariance per channel (no epsilon), packed `[C, 2]`.
    pub running_cov: CTensor<R>,
    /// Fraction of the old running estimate kept per step.
    pub momentum: f64,
    /// Diagonal loading added to the covariance before the inverse root.
    pub epsilon: f64,
}

impl<R: Real> BnParams<R> {
    /// Fresh layer state for `channels` channels: `gamma = I/sqrt(2)`,
    /// `beta = 0`, running mean 0 and running covariance `I/2` (the
    /// covariance of a standard circular complex signal).
    pub fn new(channels: usize) -> Result<Self> {
        let mut gamma = CTensor::<R>::zeros(&[channels, 2])?;
        let mut running_cov = CTensor::<R>::zeros(&[channels, 2])?;
        let g = R::from_f64(1.0 / std::f64::consts::SQRT_2);
        let half = R::from_f64(0.5);
        for c in 0..channels {
            gamma.data_mut()[c * 2].re = g; // m00
            gamma.data_mut()[c * 2 + 1].im = g; // m11
            running_cov.data_mut()[c * 2].re = half;
            running_cov.data_mut()[c * 2 + 1].im = half;
        }
        Ok(Self {
            gamma,
            beta: CTensor::zeros(&[channels])?,
            running_mean: CTensor::zeros(&[channels])?,
            running_cov,
            momentum: 0.9,
            epsilon: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.beta.shape()[0]
    }
}

/// Unpack the `[C, 2]` row-packed 2x2 matrix of channel `c`.
#[inline]
fn unpack2<R: Real>(t: &CTensor<R>, c: usize) -> [f64; 4] {
    let r0 = t.data()[c * 2];
    let r1 = t.data()[c * 2 + 1];
    [r0.re.to_f64(), r0.im.to_f64(), r1.re.to_f64(), r1.im.to_f64()]
}

#[inline]
fn pack2<R: Real>(t: &mut CTensor<R>, c: usize, m: [f64; 4]) {
    t.data_mut()[c * 2].re = R::from_f64(m[0]);
    t.data_mut()[c * 2].im = R::from_f64(m[1]);
    t.data_mut()[c * 2 + 1].re = R::from_f64(m[2]);
    t.data_mut()[c * 2 + 1].im = R::from_f64(m[3]);
}

#[inline]
fn mat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

#[inline]
fn mat_vec(m: [f64; 4], v: [f64; 2]) -> [f64; 2] {
    [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]]
}

/// Eigendecomposition of a symmetric 2x2 `[[a, b], [b, d]]`: returns the
/// rotation `(cos, sin)` and eigenvalues so `V = Q diag(l1, l2) Q^T`.
#[inline]
fn sym_eig2(a: f64, b: f64, d: f64) -> (f64, f64, f64, f64) {
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (qs, qc) = theta.sin_cos();
    let l1 = a * qc * qc + 2.0 * b * qc * qs + d * qs * qs;
    let l2 = a * qs * qs - 2.0 * b * qc * qs + d * qc * qc;
    (qc, qs, l1, l2)
}

/// Rebuild `Q f(diag) Q^T` from the eigensystem and a function of the
/// eigenvalues; used for `V^{1/2}` and `V^{-1/2}`.
#[inline]
fn from_eig(qc: f64, qs: f64, f1: f64, f2: f64) -> [f64; 4] {
    let off = qc * qs * (f1 - f2);
    [qc * qc * f1 + qs * qs * f2, off, off, qs * qs * f1 + qc * qc * f2]
}

/// Per-channel whitening state captured by the training forward pass.
#[derive(Debug, Clone, Copy)]
struct ChanEig {
    qc: f64,
    qs: f64,
    l1: f64,
    l2: f64,
}

/// Cache for the backward pass: whitened activations plus the per-channel
/// eigensystems of the loaded covariance.
#[derive(Debug, Clone)]
pub struct BnCache<R: Real> {
    xhat: CTensor<R>,
    chans: Vec<ChanEig>,
    n: usize,
}

fn check_bn_input<R: Real>(x: &CTensor<R>, p: &BnParams<R>) -> Result<usize> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("batch norm input must be rank 4, got {:?}", x.shape())));
    }
    let c = x.shape()[3];
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {c}",
            p.channels()
        )));
    }
    Ok(c)
}

/// Per-channel mean over batch and space, in f64.
fn channel_means<R: Real>(x: &CTensor<R>, c: usize) -> Vec<[f64; 2]> {
    let n = (x.len() / c) as f64;
    let mut sums = vec![[0.0f64; 2]; c];
    for chunk in x.data().chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(chunk) {
            s[0] += v.re.to_f64();
            s[1] += v.im.to_f64();
        }
    }
    for s in &mut sums {
        s[0] /= n;
        s[1] /= n;
    }
    sums
}

/// Training-mode forward: whiten by batch statistics, apply the affine
/// parameters, update running estimates, and return the cache needed by
/// [`cbn_bwd`]. Requires at least 2 samples per channel.
pub fn cbn_fwd_train<R: Real>(
    x: &CTensor<R>,
    p: &mut BnParams<R>,
) -> Result<(CTensor<R>, BnCache<R>)> {
    let c = check_bn_input(x, p)?;
    let n = x.len() / c;
    if n < 2 {
        return Err(Error::DegenerateStats(format!(
            "batch norm needs at least 2 samples per channel, got {n}"
        )));
    }
    let nf = n as f64;
    let means = channel_means(x, c);

    // Raw covariance of the centered parts.
    let mut cov = vec![[0.0f64; 3]; c]; // [rr, ri, ii]
    for chunk in x.data().chunks_exact(c) {
        for (k, v) in chunk.iter().enumerate() {
            let cr = v.re.to_f64() - means[k][0];
            let ci = v.im.to_f64() - means[k][1];
            cov[k][0] += cr * cr;
            cov[k][1] += cr * ci;
            cov[k][2] += ci * ci;
        }
    }
    for s in &mut cov {
        s[0] /= nf;
        s[1] /= nf;
        s[2] /= nf;
    }

    // Eigensystems of the loaded covariance and the whitening matrices.
    let mut chans = Vec::with_capacity(c);
    let mut whiten = Vec::with_capacity(c);
    for k in 0..c {
        let (qc, qs, l1, l2) = sym_eig2(cov[k][0] + p.epsilon, cov[k][1], cov[k][2] + p.epsilon);
        if !(l1.is_finite() && l2.is_finite()) {
            return Err(Error::Numerical(format!(
                "channel {k} batch statistics are not finite (eigenvalues {l1}, {l2})"
            )));
        }
        if !(l1 > 0.0 && l2 > 0.0) {
            return Err(Error::DegenerateStats(format!(
                "channel {k} covariance is not positive definite (eigenvalues {l1}, {l2})"
            )));
        }
        chans.push(ChanEig { qc, qs, l1, l2 });
        whiten.push(from_eig(qc, qs, 1.0 / l1.sqrt(), 1.0 / l2.sqrt()));
    }

    let gammas: Vec<[f64; 4]> = (0..c).map(|k| unpack2(&p.gamma, k)).collect();
    let betas: Vec<[f64; 2]> =
        (0..c).map(|k| [p.beta.data()[k].re.to_f64(), p.beta.data()[k].im.to_f64()]).collect();

    let mut y = CTensor::<R>::zeros(x.shape())?;
    let mut xhat = CTensor::<R>::zeros(x.shape())?;
    {
        let xd = x.data();
        let yd = y.data_mut();
        let hd = xhat.data_mut();
        for (i, v) in xd.iter().enumerate() {
            let k = i % c;
            let cvec = [v.re.to_f64() - means[k][0], v.im.to_f64() - means[k][1]];
            let h = mat_vec(whiten[k], cvec);
            hd[i].re = R::from_f64(h[0]);
            hd[i].im = R::from_f64(h[1]);
            let o = mat_vec(gammas[k], h);
            yd[i].re = R::from_f64(o[0] + betas[k][0]);
            yd[i].im = R::from_f64(o[1] + betas[k][1]);
        }
    }

    // Running estimates: keep `momentum` of the old value.
    let m = p.momentum;
    for k in 0..c {
        let rm = p.running_mean.data()[k];
        let new_re = m * rm.re.to_f64() + (1.0 - m) * means[k][0];
        let new_im = m * rm.im.to_f64() + (1.0 - m) * means[k][1];
        p.running_mean.data_mut()[k].re = R::from_f64(new_re);
        p.running_mean.data_mut()[k].im = R::from_f64(new_im);
        let rc = unpack2(&p.running_cov, k);
        pack2(
            &mut p.running_cov,
            k,
            [
                m * rc[0] + (1.0 - m) * cov[k][0],
                m * rc[1] + (1.0 - m) * cov[k][1],
                m * rc[2] + (1.0 - m) * cov[k][1],
                m * rc[3] + (1.0 - m) * cov[k][2],
            ],
        );
    }

    Ok((y, BnCache { xhat, chans, n }))
}

/// Inference-mode forward: whiten by the running estimates; no cache, no
/// mutation, no minimum batch size.
pub fn cbn_fwd_infer<R: Real>(x: &CTensor<R>, p: &BnParams<R>) -> Result<CTensor<R>> {
    let c = check_bn_input(x, p)?;
    let mut whiten = Vec::with_capacity(c);
    for k in 0..c {
        let rc = unpack2(&p.running_cov, k);
        let (vrr, vri, vii) = (rc[0] + p.epsilon, 0.5 * (rc[1] + rc[2]), rc[3] + p.epsilon);
        let (qc, qs, l1, l2) = sym_eig2(vrr, vri, vii);
        if !(l1.is_finite() && l2.is_finite()) {
            return Err(Error::Numerical(format!(
                "channel {k} running statistics are not finite (eigenvalues {l1}, {l2})"
            )));
        }
        if !(l1 > 0.0 && l2 > 0.0) {
            return Err(Error::DegenerateStats(format!(
                "channel {k} running covariance is not positive definite"
            )));
        }
        whiten.push(from_eig(qc, qs, 1.0 / l1.sqrt(), 1.0 / l2.sqrt()));
    }
    let gammas: Vec<[f64; 4]> = (0..c).map(|k| unpack2(&p.gamma, k)).collect();
    let mut y = CTensor::<R>::zeros(x.shape())?;
    let xd = x.data();
    let yd = y.data_mut();
    for (i, v) in xd.iter().enumerate() {
        let k = i % c;
        let rm = p.running_mean.data()[k];
        let cvec = [v.re.to_f64() - rm.re.to_f64(), v.im.to_f64() - rm.im.to_f64()];
        let h = mat_vec(whiten[k], cvec);
        let o = mat_vec(gammas[k], h);
        let b = p.beta.data()[k];
        yd[i].re = R::from_f64(o[0] + b.re.to_f64());
        yd[i].im = R::from_f64(o[1] + b.im.to_f64());
    }
    Ok(y)
}

/// Backward through the training forward. Returns `(dX, dGamma, dBeta)`
/// with `dGamma` packed `[C, 2]` like `gamma` itself.
pub fn cbn_bwd<R: Real>(
    p: &BnParams<R>,
    cache: &BnCache<R>,
    dy: &CTensor<R>,
) -> Result<(CTensor<R>, CTensor<R>, CTensor<R>)> {
    let c = p.channels();
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} does not match cached activations {:?}",
            dy.shape(),
            cache.xhat.shape()
        )));
    }
    let n = cache.n;
    let nf = n as f64;

    let gammas: Vec<[f64; 4]> = (0..c).map(|k| unpack2(&p.gamma, k)).collect();
    let mut umats = Vec::with_capacity(c);
    let mut smats = Vec::with_capacity(c);
    for e in &cache.chans {
        umats.push(from_eig(e.qc, e.qs, 1.0 / e.l1.sqrt(), 1.0 / e.l2.sqrt()));
        smats.push(from_eig(e.qc, e.qs, e.l1.sqrt(), e.l2.sqrt()));
    }

    // Pass 1: accumulate dBeta, dGamma and A = sum H c^T per channel.
    let mut dbeta = vec![[0.0f64; 2]; c];
    let mut dgamma = vec![[0.0f64; 4]; c];
    let mut amat = vec![[0.0f64; 4]; c];
    {
        let gd = dy.data();
        let hd = cache.xhat.data();
        for i in 0..gd.len() {
            let k = i % c;
            let g = [gd[i].re.to_f64(), gd[i].im.to_f64()];
            let xh = [hd[i].re.to_f64(), hd[i].im.to_f64()];
            dbeta[k][0] += g[0];
            dbeta[k][1] += g[1];
            dgamma[k][0] += g[0] * xh[0];
            dgamma[k][1] += g[0] * xh[1];
            dgamma[k][2] += g[1] * xh[0];
            dgamma[k][3] += g[1] * xh[1];
            let ga = &gammas[k];
            let h = [ga[0] * g[0] + ga[2] * g[1], ga[1] * g[0] + ga[3] * g[1]];
            let cv = mat_vec(smats[k], xh);
            amat[k][0] += h[0] * cv[0];
            amat[k][1] += h[0] * cv[1];
            amat[k][2] += h[1] * cv[0];
            amat[k][3] += h[1] * cv[1];
        }
    }

    // Per channel: solve the Sylvester system in the eigenbasis of S.
    let mut bmat = Vec::with_capacity(c);
    for k in 0..c {
        let e = &cache.chans[k];
        let cm = mat_mul(mat_mul(umats[k], amat[k]), umats[k]);
        let (c00, c01, c11) =
            (cm[0], 0.5 * (cm[1] + cm[2]), cm[3]);
        let (qc, qs) = (e.qc, e.qs);
        // Rotate into the eigenbasis.
        let e00 = qc * qc * c00 + 2.0 * qc * qs * c01 + qs * qs * c11;
        let e01 = qc * qs * (c11 - c00) + (qc * qc - qs * qs) * c01;
        let e11 = qs * qs * c00 - 2.0 * qc * qs * c01 + qc * qc * c11;
        let (r1, r2) = (e.l1.sqrt(), e.l2.sqrt());
        let (d00, d01, d11) = (e00 / (2.0 * r1), e01 / (r1 + r2), e11 / (2.0 * r2));
        // Rotate back.
        let b00 = qc * qc * d00 - 2.0 * qc * qs * d01 + qs * qs * d11;
        let b01 = qc * qs * (d00 - d11) + (qc * qc - qs * qs) * d01;
        let b11 = qs * qs * d00 + 2.0 * qc * qs * d01 + qc * qc * d11;
        bmat.push([b00, b01, b01, b11]);
    }

    // Pass 2: per-sample gradient before mean removal.
    let mut dx = CTensor::<R>::zeros(dy.shape())?;
    let mut psum = vec![[0.0f64; 2]; c];
    {
        let gd = dy.data();
        let hd = cache.xhat.data();
        let dd = dx.data_mut();
        let scale = 2.0 / nf;
        for i in 0..gd.len() {
            let k = i % c;
            let g = [gd[i].re.to_f64(), gd[i].im.to_f64()];
            let xh = [hd[i].re.to_f64(), hd[i].im.to_f64()];
            let ga = &gammas[k];
            let h = [ga[0] * g[0] + ga[2] * g[1], ga[1] * g[0] + ga[3] * g[1]];
            let cv = mat_vec(smats[k], xh);
            let uh = mat_vec(umats[k], h);
            let bc = mat_vec(bmat[k], cv);
            let pvec = [uh[0] - scale * bc[0], uh[1] - scale * bc[1]];
            psum[k][0] += pvec[0];
            psum[k][1] += pvec[1];
            dd[i].re = R::from_f64(pvec[0]);
            dd[i].im = R::from_f64(pvec[1]);
        }
    }

    // Pass 3: remove the per-channel mean contribution.
    {
        let dd = dx.data_mut();
        for (i, v) in dd.iter_mut().enumerate() {
            let k = i % c;
            v.re -= R::from_f64(psum[k][0] / nf);
            v.im -= R::from_f64(psum[k][1] / nf);
        }
    }

    let mut dg = CTensor::<R>::zeros(&[c, 2])?;
    let mut db = CTensor::<R>::zeros(&[c])?;
    for k in 0..c {
        pack2(&mut dg, k, dgamma[k]);
        db.data_mut()[k].re = R::from_f64(dbeta[k][0]);
        db.data_mut()[k].im = R::from_f64(dbeta[k][1]);
    }
    Ok((dx, dg, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> CTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = CTensor::<f64>::zeros(shape).unwrap();
        for v in t.data_mut() {
            // Skewed, correlated parts so whitening has real work to do.
            let a: f64 = rng.gen::<f64>() * 4.0 - 2.0;
            let b: f64 = rng.gen::<f64>() * 0.5 - 0.25;
            *v = Complex::new(1.5 * a + 0.3, 0.8 * a + b - 1.0);
        }
        t
    }

    #[test]
    fn whitened_batch_has_zero_mean_unit_covariance() {
        let x = random_input(&[2, 6, 5, 3], 11);
        let mut p = BnParams::<f64>::new(3).unwrap();
        let (_, cache) = cbn_fwd_train(&x, &mut p).unwrap();
        let c = 3;
        let n = (x.len() / c) as f64;
        for k in 0..c {
            let (mut mr, mut mi, mut rr, mut ri, mut ii) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, v) in cache.xhat.data().iter().enumerate() {
                if i % c == k {
                    mr += v.re;
                    mi += v.im;
                    rr += v.re * v.re;
                    ri += v.re * v.im;
                    ii += v.im * v.im;
                }
            }
            assert!((mr / n).abs() < 1e-10 && (mi / n).abs() < 1e-10);
            // Whitening with the loaded covariance gives exactly
            // I - eps * V^{-1}, so every entry sits within O(eps / det V)
            // of the identity rather than at it.
            assert!((rr / n - 1.0).abs() < 1e-3, "Vrr = {}", rr / n);
            assert!((ii / n - 1.0).abs() < 1e-3, "Vii = {}", ii / n);
            assert!((ri / n).abs() < 1e-3, "Vri = {}", ri / n);
        }
    }

    #[test]
    fn default_gamma_scales_to_circular_variance() {
        let x = random_input(&[4, 8, 8, 2], 3);
        let mut p = BnParams::<f64>::new(2).unwrap();
        let (y, _) = cbn_fwd_train(&x, &mut p).unwrap();
        let c = 2;
        let n = (x.len() / c) as f64;
        for k in 0..c {
            let mut sq = 0.0;
            for (i, v) in y.data().iter().enumerate() {
                if i % c == k {
                    sq += v.norm_sqr();
                }
            }
            // gamma = I/sqrt(2) halves each unit-variance part: E|y|^2 = 1.
            assert!((sq / n - 1.0).abs() < 2e-3, "E|y|^2 = {}", sq / n);
        }
    }

    #[test]
    fn inference_with_running_equal_to_batch_matches_training_output() {
        let x = random_input(&[2, 4, 4, 3], 5);
        let mut p = BnParams::<f64>::new(3).unwrap();
        // Adopt the batch statistics as the running estimates outright.
        p.momentum = 0.0;
        let (y_train, _) = cbn_fwd_train(&x, &mut p).unwrap();
        let y_infer = cbn_fwd_infer(&x, &p).unwrap();
        for (a, b) in y_train.data().iter().zip(y_infer.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let x = random_input(&[2, 4, 4, 1], 9);
        let mut p = BnParams::<f64>::new(1).unwrap();
        let before = unpack2(&p.running_cov, 0);
        let mean_before = p.running_mean.data()[0];
        assert_eq!(mean_before, Complex::new(0.0, 0.0));
        let (_, _) = cbn_fwd_train(&x, &mut p).unwrap();
        let after = unpack2(&p.running_cov, 0);
        // With momentum 0.9 the update moves 10% toward the batch value.
        assert!((after[0] - before[0]).abs() > 0.0);
        let mean_after = p.running_mean.data()[0];
        let batch_mean: Complex<f64> =
            x.data().iter().sum::<Complex<f64>>() / (x.len() as f64);
        assert!((mean_after - batch_mean * 0.1).norm() < 1e-12);
    }

    #[test]
    fn single_sample_batch_is_degenerate() {
        let x = CTensor::<f64>::zeros(&[1, 1, 1, 4]).unwrap();
        let mut p = BnParams::<f64>::new(4).unwrap();
        let err = cbn_fwd_train(&x, &mut p).unwrap_err();
        assert!(matches!(err, Error::DegenerateStats(_)), "got {err:?}");
    }

    #[test]
    fn channel_count_mismatch_errors() {
        let x = CTensor::<f64>::zeros(&[1, 2, 2, 3]).unwrap();
        let mut p = BnParams::<f64>::new(4).unwrap();
        assert!(matches!(cbn_fwd_train(&x, &mut p), Err(Error::Shape(_))));
    }
}

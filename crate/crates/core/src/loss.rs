//! Dense-labeling losses over complex outputs and one-hot complex targets.
//!
//! Targets encode class `k` at a labeled pixel as `1+1j` on channel `k-1`
//! and `0` elsewhere; unlabeled pixels (class id 0) are masked out of both
//! the loss value and the gradient, so sparse ground truth trains only
//! where annotations exist.
//!
//! All losses average over `N = labeled_pixels * K` real-part/imag-part
//! component pairs and return `(J, dO)` with the gradient packaged as
//! `dJ/d(re O) + j dJ/d(im O)`. Sums accumulate in f64 whatever the tensor
//! precision.
//!
//! The cross-entropy treats each output component as an independent
//! Bernoulli probability (the output head is a per-component logistic):
//!
//! ```text
//! J = -(1/2N) sum [ reR ln reO~ + (1-reR) ln(1-reO~) + (imag analog) ]
//! ```
//!
//! with `O~ = clamp(O, 1e-7, 1-1e-7)`; components sitting outside the clamp
//! range receive zero gradient.

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::scalar::Real;

/// Clamp bound for cross-entropy probabilities.
pub const ACE_CLAMP: f64 = 1e-7;

/// Loss selector as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Average (complex) cross-entropy.
    Ace,
    /// Complex mean squared error.
    Cmse,
    /// Complex mean absolute error.
    Cmae,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ace" => Ok(Self::Ace),
            "cmse" => Ok(Self::Cmse),
            "cmae" => Ok(Self::Cmae),
            other => Err(Error::Config(format!("unknown loss '{other}' (ace|cmse|cmae)"))),
        }
    }
}

/// One-hot complex targets with the labeled-pixel mask.
#[derive(Debug, Clone)]
pub struct TargetCube<R: Real> {
    /// `[B, H, W, K]`, `1+1j` at the labeled class channel.
    pub targets: CTensor<R>,
    /// One flag per pixel (length `B*H*W`): true where a label exists.
    pub mask: Vec<bool>,
    /// Number of labeled pixels across the batch.
    pub labeled: usize,
}

/// Encode a batch of label grids as complex one-hot targets.
///
/// All grids must share one grid size; labels above `k` are rejected.
pub fn one_hot_encode<R: Real>(labels: &[LabelGrid], k: usize) -> Result<TargetCube<R>> {
    if labels.is_empty() {
        return Err(Error::Shape("one-hot encoding needs at least one grid".into()));
    }
    if k == 0 {
        return Err(Error::Config("class count must be at least 1".into()));
    }
    let (h, w) = (labels[0].height(), labels[0].width());
    for (i, g) in labels.iter().enumerate() {
        if g.height() != h || g.width() != w {
            return Err(Error::Shape(format!(
                "grid {i} is {}x{}, expected {h}x{w}",
                g.height(),
                g.width()
            )));
        }
    }
    let bs = labels.len();
    let mut targets = CTensor::<R>::zeros(&[bs, h, w, k])?;
    let mut mask = vec![false; bs * h * w];
    let mut labeled = 0usize;
    let one = R::one();
    let td = targets.data_mut();
    for (b, g) in labels.iter().enumerate() {
        for (p, &v) in g.data().iter().enumerate() {
            if v == 0 {
                continue;
            }
            if v as usize > k {
                return Err(Error::Label(format!(
                    "label {v} exceeds class count {k} in grid {b}"
                )));
            }
            let pixel = b * h * w + p;
            mask[pixel] = true;
            labeled += 1;
            let t = &mut td[pixel * k + (v as usize - 1)];
            t.re = one;
            t.im = one;
        }
    }
    Ok(TargetCube { targets, mask, labeled })
}

fn check_loss_inputs<R: Real>(o: &CTensor<R>, t: &TargetCube<R>) -> Result<usize> {
    if o.shape() != t.targets.shape() {
        return Err(Error::Shape(format!(
            "output shape {:?} does not match target shape {:?}",
            o.shape(),
            t.targets.shape()
        )));
    }
    if o.rank() != 4 {
        return Err(Error::Shape(format!("loss expects rank-4 output, got {:?}", o.shape())));
    }
    if t.labeled == 0 {
        return Err(Error::EmptyBatch("no labeled pixels in the batch".into()));
    }
    Ok(o.shape()[3])
}

/// Average cross-entropy over both components of every labeled pixel.
pub fn ace_loss<R: Real>(o: &CTensor<R>, t: &TargetCube<R>) -> Result<(f64, CTensor<R>)> {
    let k = check_loss_inputs(o, t)?;
    let n = (t.labeled * k) as f64;
    let (lo, hi) = (ACE_CLAMP, 1.0 - ACE_CLAMP);
    let mut j = 0.0f64;
    let mut grad = CTensor::<R>::zeros(o.shape())?;
    let gd = grad.data_mut();
    let od = o.data();
    let td = t.targets.data();
    let scale = 1.0 / (2.0 * n);
    for (pixel, &m) in t.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..k {
            let i = pixel * k + c;
            let (ore, oim) = (od[i].re.to_f64(), od[i].im.to_f64());
            let (tre, tim) = (td[i].re.to_f64(), td[i].im.to_f64());
            let cre = ore.clamp(lo, hi);
            let cim = oim.clamp(lo, hi);
            j -= tre * cre.ln() + (1.0 - tre) * (1.0 - cre).ln();
            j -= tim * cim.ln() + (1.0 - tim) * (1.0 - cim).ln();
            // Gradient flows only where the clamp is inactive.
            if (lo..=hi).contains(&ore) {
                gd[i].re = R::from_f64(-scale * (tre - cre) / (cre * (1.0 - cre)));
            }
            if (lo..=hi).contains(&oim) {
                gd[i].im = R::from_f64(-scale * (tim - cim) / (cim * (1.0 - cim)));
            }
        }
    }
    Ok((j * scale, grad))
}

/// Mean squared error over both components of every labeled pixel.
pub fn cmse_loss<R: Real>(o: &CTensor<R>, t: &TargetCube<R>) -> Result<(f64, CTensor<R>)> {
    let k = check_loss_inputs(o, t)?;
    let n = (t.labeled * k) as f64;
    let mut j = 0.0f64;
    let mut grad = CTensor::<R>::zeros(o.shape())?;
    let gd = grad.data_mut();
    let od = o.data();
    let td = t.targets.data();
    for (pixel, &m) in t.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..k {
            let i = pixel * k + c;
            let dre = td[i].re.to_f64() - od[i].re.to_f64();
            let dim = td[i].im.to_f64() - od[i].im.to_f64();
            j += dre * dre + dim * dim;
            gd[i].re = R::from_f64(-2.0 / n * dre);
            gd[i].im = R::from_f64(-2.0 / n * dim);
        }
    }
    Ok((j / n, grad))
}

/// Mean absolute error over both components of every labeled pixel; the
/// subgradient at an exact match is 0.
pub fn cmae_loss<R: Real>(o: &CTensor<R>, t: &TargetCube<R>) -> Result<(f64, CTensor<R>)> {
    let k = check_loss_inputs(o, t)?;
    let n = (t.labeled * k) as f64;
    let mut j = 0.0f64;
    let mut grad = CTensor::<R>::zeros(o.shape())?;
    let gd = grad.data_mut();
    let od = o.data();
    let td = t.targets.data();
    for (pixel, &m) in t.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..k {
            let i = pixel * k + c;
            let dre = td[i].re.to_f64() - od[i].re.to_f64();
            let dim = td[i].im.to_f64() - od[i].im.to_f64();
            j += dre.abs() + dim.abs();
            if dre != 0.0 {
                gd[i].re = R::from_f64(-dre.signum() / n);
            }
            if dim != 0.0 {
                gd[i].im = R::from_f64(-dim.signum() / n);
            }
        }
    }
    Ok((j / n, grad))
}

/// Dispatch a loss by kind.
pub fn eval_loss<R: Real>(
    kind: LossKind,
    o: &CTensor<R>,
    t: &TargetCube<R>,
) -> Result<(f64, CTensor<R>)> {
    match kind {
        LossKind::Ace => ace_loss(o, t),
        LossKind::Cmse => cmse_loss(o, t),
        LossKind::Cmae => cmae_loss(o, t),
    }
}

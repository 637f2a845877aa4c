//! Complex 2-D convolution with hand-derived backward pass.
//!
//! Forward, per output channel `n`:
//!
//! ```text
//! Y[b,oy,ox,n] = bias[n] + sum_{ky,kx,m} W[ky,kx,m,n] * X[b, oy*s+ky-p, ox*s+kx-p, m]
//! ```
//!
//! with the full complex product `W*X = (reW reX - imW imX) + j(imW reX + reW imX)`
//! and zero padding outside the input extent.
//!
//! The backward pass packages component-wise partials as complex numbers:
//! with `G = dJ/d(reY) + j dJ/d(imY)`, the input gradient is a transposed
//! convolution against the conjugated kernel, `dX = sum G * conj(W)`, and the
//! kernel gradient correlates the upstream signal with the conjugated input,
//! `dW[ky,kx,m,n] = sum_{b,oy,ox} G[b,oy,ox,n] * conj(X[b,iy,ix,m])`. The
//! bias gradient is the plain sum of `G` over batch and space.
//!
//! Internally each batch item is split into separate real and imaginary
//! channel planes so the innermost loops run over contiguous rows; kernel
//! gradients accumulate into f64 to keep long reductions accurate.

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Weights of one convolution: kernel `[kh, kw, in, out]`, bias `[out]`,
/// stride and zero padding applied symmetrically to both spatial axes.
#[derive(Debug, Clone)]
pub struct ConvParams<R: Real> {
    pub w: CTensor<R>,
    pub b: CTensor<R>,
    pub stride: usize,
    pub pad: usize,
}

impl<R: Real> ConvParams<R> {
    pub fn new(w: CTensor<R>, b: CTensor<R>, stride: usize, pad: usize) -> Result<Self> {
        if w.rank() != 4 {
            return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", w.shape())));
        }
        if b.rank() != 1 || b.shape()[0] != w.shape()[3] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                w.shape()[3]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be at least 1".into()));
        }
        Ok(Self { w, b, stride, pad })
    }

    pub fn kh(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kw(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn cin(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn cout(&self) -> usize {
        self.w.shape()[3]
    }

    /// Fan-in used by weight initialization: `kh * kw * cin`.
    pub fn fan_in(&self) -> usize {
        self.kh() * self.kw() * self.cin()
    }

    /// Output spatial size for an input of `h x w`, or a shape error when
    /// the kernel does not fit or the stride does not divide evenly.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = (self.kh(), self.kw());
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if kh > ph || kw > pw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % self.stride != 0 || (pw - kw) % self.stride != 0 {
            return Err(Error::Shape(format!(
                "stride {} does not divide padded extent {}x{} minus kernel {kh}x{kw}",
                self.stride, ph, pw
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Split batch item `bi` of `[B,H,W,C]` into per-channel planes
/// `planes[c][i*W + j]`, real and imaginary separately.
fn split_planes<R: Real>(x: &CTensor<R>, bi: usize, re: &mut [R], im: &mut [R]) {
    let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let base = bi * h * w * c;
    let data = x.data();
    for p in 0..hw {
        let src = base + p * c;
        for m in 0..c {
            re[m * hw + p] = data[src + m].re;
            im[m * hw + p] = data[src + m].im;
        }
    }
}

fn check_conv_inputs<R: Real>(x: &CTensor<R>, p: &ConvParams<R>) -> Result<(usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("conv input must be rank 4, got {:?}", x.shape())));
    }
    if x.shape()[3] != p.cin() {
        return Err(Error::Shape(format!(
            "conv input has {} channels, kernel expects {}",
            x.shape()[3],
            p.cin()
        )));
    }
    p.out_size(x.shape()[1], x.shape()[2])
}

/// Valid output range along one axis for a fixed kernel offset `k`:
/// positions `o` with `o*stride + k - pad` inside `[0, extent)`.
#[inline]
fn valid_range(out_len: usize, extent: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o*stride >= pad - k  and  o*stride < extent + pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = (extent + pad).saturating_sub(k); // o*stride < hi_excl
    let hi = hi_excl.div_ceil(stride).min(out_len);
    (lo.min(hi), hi)
}

/// Complex convolution forward.
pub fn cconv2d_fwd<R: Real>(x: &CTensor<R>, p: &ConvParams<R>) -> Result<CTensor<R>> {
    let (oh, ow) = check_conv_inputs(x, p)?;
    let (bs, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cin, cout) = (p.kh(), p.kw(), p.cin(), p.cout());
    let (hw, ohw) = (h * w, oh * ow);
    let (stride, pad) = (p.stride, p.pad);

    let mut out = CTensor::<R>::zeros(&[bs, oh, ow, cout])?;
    let mut xr = vec![R::zero(); cin * hw];
    let mut xi = vec![R::zero(); cin * hw];
    let mut yr = vec![R::zero(); cout * ohw];
    let mut yi = vec![R::zero(); cout * ohw];
    let wdata = p.w.data();
    let bdata = p.b.data();

    for bi in 0..bs {
        split_planes(x, bi, &mut xr, &mut xi);
        for n in 0..cout {
            yr[n * ohw..(n + 1) * ohw].fill(bdata[n].re);
            yi[n * ohw..(n + 1) * ohw].fill(bdata[n].im);
        }
        for n in 0..cout {
            let (yrp, yip) = (&mut yr[n * ohw..(n + 1) * ohw], &mut yi[n * ohw..(n + 1) * ohw]);
            for m in 0..cin {
                let xrp = &xr[m * hw..(m + 1) * hw];
                let xip = &xi[m * hw..(m + 1) * hw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, pad, stride);
                    for kx in 0..kw {
                        let wv = wdata[((ky * kw + kx) * cin + m) * cout + n];
                        let (wr, wi) = (wv.re, wv.im);
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, pad, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let xs = &xrp[iy * w + ix0..iy * w + ix0 + len];
                                let xsi = &xip[iy * w + ix0..iy * w + ix0 + len];
                                let ys = &mut yrp[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                let ysi = &mut yip[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                for k in 0..len {
                                    ys[k] += wr * xs[k] - wi * xsi[k];
                                    ysi[k] += wr * xsi[k] + wi * xs[k];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    let (a, b) = (xrp[iy * w + ix], xip[iy * w + ix]);
                                    yrp[oy * ow + ox] += wr * a - wi * b;
                                    yip[oy * ow + ox] += wr * b + wi * a;
                                }
                            }
                        }
                    }
                }
            }
        }
        let odata = out.data_mut();
        let base = bi * ohw * cout;
        for p_ in 0..ohw {
            let dst = base + p_ * cout;
            for n in 0..cout {
                odata[dst + n].re = yr[n * ohw + p_];
                odata[dst + n].im = yi[n * ohw + p_];
            }
        }
    }
    Ok(out)
}

/// Complex convolution backward: returns `(dX, dW, db)` for upstream
/// gradient `dy` of the same shape the forward produced for `x`.
pub fn cconv2d_bwd<R: Real>(
    x: &CTensor<R>,
    p: &ConvParams<R>,
    dy: &CTensor<R>,
) -> Result<(CTensor<R>, CTensor<R>, CTensor<R>)> {
    let (oh, ow) = check_conv_inputs(x, p)?;
    let (bs, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cin, cout) = (p.kh(), p.kw(), p.cin(), p.cout());
    if dy.shape() != [bs, oh, ow, cout] {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?}, expected {:?}",
            dy.shape(),
            [bs, oh, ow, cout]
        )));
    }
    let (hw, ohw) = (h * w, oh * ow);
    let (stride, pad) = (p.stride, p.pad);

    let mut dx = CTensor::<R>::zeros(x.shape())?;
    let mut dw_re = vec![0.0f64; kh * kw * cin * cout];
    let mut dw_im = vec![0.0f64; kh * kw * cin * cout];
    let mut db_re = vec![0.0f64; cout];
    let mut db_im = vec![0.0f64; cout];

    // Bias gradient: plain sum of G over batch and space.
    for chunk in dy.data().chunks_exact(cout) {
        for (n, g) in chunk.iter().enumerate() {
            db_re[n] += g.re.to_f64();
            db_im[n] += g.im.to_f64();
        }
    }

    let mut xr = vec![R::zero(); cin * hw];
    let mut xi = vec![R::zero(); cin * hw];
    let mut gr = vec![R::zero(); cout * ohw];
    let mut gi = vec![R::zero(); cout * ohw];
    let mut dxr = vec![R::zero(); cin * hw];
    let mut dxi = vec![R::zero(); cin * hw];
    let wdata = p.w.data();

    for bi in 0..bs {
        split_planes(x, bi, &mut xr, &mut xi);
        split_planes(dy, bi, &mut gr, &mut gi);
        dxr.fill(R::zero());
        dxi.fill(R::zero());

        for m in 0..cin {
            let xrp = &xr[m * hw..(m + 1) * hw];
            let xip = &xi[m * hw..(m + 1) * hw];
            let dxrp = &mut dxr[m * hw..(m + 1) * hw];
            let dxip = &mut dxi[m * hw..(m + 1) * hw];
            for n in 0..cout {
                let grp = &gr[n * ohw..(n + 1) * ohw];
                let gip = &gi[n * ohw..(n + 1) * ohw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, pad, stride);
                    for kx in 0..kw {
                        let widx = ((ky * kw + kx) * cin + m) * cout + n;
                        let wv = wdata[widx];
                        let (wr, wi) = (wv.re, wv.im);
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, pad, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        // dW accumulators for this (ky,kx,m,n).
                        let (mut arr, mut aii, mut air, mut ari) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let xs = &xrp[iy * w + ix0..iy * w + ix0 + len];
                                let xsi = &xip[iy * w + ix0..iy * w + ix0 + len];
                                let gs = &grp[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                let gsi = &gip[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                let ds = &mut dxrp[iy * w + ix0..iy * w + ix0 + len];
                                let dsi = &mut dxip[iy * w + ix0..iy * w + ix0 + len];
                                let (mut s_rr, mut s_ii, mut s_ir, mut s_ri) =
                                    (R::zero(), R::zero(), R::zero(), R::zero());
                                for k in 0..len {
                                    // dX += G * conj(W)
                                    ds[k] += wr * gs[k] + wi * gsi[k];
                                    dsi[k] += wr * gsi[k] - wi * gs[k];
                                    // dW += G * conj(X), accumulated as dots
                                    s_rr += gs[k] * xs[k];
                                    s_ii += gsi[k] * xsi[k];
                                    s_ir += gsi[k] * xs[k];
                                    s_ri += gs[k] * xsi[k];
                                }
                                arr += s_rr.to_f64();
                                aii += s_ii.to_f64();
                                air += s_ir.to_f64();
                                ari += s_ri.to_f64();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    let (a, b) = (xrp[iy * w + ix], xip[iy * w + ix]);
                                    let (g, gi_) = (grp[oy * ow + ox], gip[oy * ow + ox]);
                                    dxrp[iy * w + ix] += wr * g + wi * gi_;
                                    dxip[iy * w + ix] += wr * gi_ - wi * g;
                                    arr += (g * a).to_f64();
                                    aii += (gi_ * b).to_f64();
                                    air += (gi_ * a).to_f64();
                                    ari += (g * b).to_f64();
                                }
                            }
                        }
                        dw_re[widx] += arr + aii;
                        dw_im[widx] += air - ari;
                    }
                }
            }
        }

        let ddata = dx.data_mut();
        let base = bi * hw * cin;
        for p_ in 0..hw {
            let dst = base + p_ * cin;
            for m in 0..cin {
                ddata[dst + m].re = dxr[m * hw + p_];
                ddata[dst + m].im = dxi[m * hw + p_];
            }
        }
    }

    let mut dw = CTensor::<R>::zeros(p.w.shape())?;
    for (k, v) in dw.data_mut().iter_mut().enumerate() {
        v.re = R::from_f64(dw_re[k]);
        v.im = R::from_f64(dw_im[k]);
    }
    let mut db = CTensor::<R>::zeros(p.b.shape())?;
    for (n, v) in db.data_mut().iter_mut().enumerate() {
        v.re = R::from_f64(db_re[n]);
        v.im = R::from_f64(db_im[n]);
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;
    use num_complex::Complex;

    fn conv1x1(w: Complex<f64>, b: Complex<f64>) -> ConvParams<f64> {
        ConvParams::new(
            CTensor::from_vec(&[1, 1, 1, 1], vec![w]).unwrap(),
            CTensor::from_vec(&[1], vec![b]).unwrap(),
            1,
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_element_complex_product() {
        // (1+2i) * (3+4i) = -5 + 10i, plus bias (0.5 - 1i).
        let x = CTensor::from_vec(&[1, 1, 1, 1], vec![c(3.0, 4.0)]).unwrap();
        let p = conv1x1(c(1.0, 2.0), c(0.5, -1.0));
        let y = cconv2d_fwd(&x, &p).unwrap();
        assert!((y.data()[0].re - -4.5).abs() < 1e-12);
        assert!((y.data()[0].im - 9.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_gradient_is_conjugated_input() {
        // J = re(y) for y = w*x gives dJ/dW = conj(x) in the component
        // packaging (dJ/d(reW) + j dJ/d(imW)).
        let x = CTensor::from_vec(&[1, 1, 1, 1], vec![c(3.0, 4.0)]).unwrap();
        let p = conv1x1(c(1.0, 2.0), c(0.0, 0.0));
        let dy = CTensor::from_vec(&[1, 1, 1, 1], vec![c(1.0, 0.0)]).unwrap();
        let (dx, dw, db) = cconv2d_bwd(&x, &p, &dy).unwrap();
        assert_eq!(dw.data()[0], c::<f64>(3.0, -4.0));
        // dX = G * conj(W) = conj(w) for G = 1.
        assert_eq!(dx.data()[0], c::<f64>(1.0, -2.0));
        assert_eq!(db.data()[0], c::<f64>(1.0, 0.0));
    }

    #[test]
    fn padding_preserves_shape_for_3x3() {
        let x = CTensor::<f32>::zeros(&[2, 8, 6, 3]).unwrap();
        let w = CTensor::<f32>::zeros(&[3, 3, 3, 5]).unwrap();
        let b = CTensor::<f32>::zeros(&[5]).unwrap();
        let p = ConvParams::new(w, b, 1, 1).unwrap();
        let y = cconv2d_fwd(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 8, 6, 5]);
    }

    #[test]
    fn shape_contract_violations_error() {
        let x = CTensor::<f32>::zeros(&[1, 4, 4, 2]).unwrap();
        let w = CTensor::<f32>::zeros(&[3, 3, 3, 4]).unwrap();
        let b = CTensor::<f32>::zeros(&[4]).unwrap();
        let p = ConvParams::new(w, b, 1, 1).unwrap();
        assert!(matches!(cconv2d_fwd(&x, &p), Err(Error::Shape(_))));

        let w = CTensor::<f32>::zeros(&[3, 3, 2, 4]).unwrap();
        let b = CTensor::<f32>::zeros(&[4]).unwrap();
        // (4 + 0 - 3) % 2 != 0: stride does not divide.
        let p = ConvParams::new(w, b, 2, 0).unwrap();
        assert!(matches!(cconv2d_fwd(&x, &p), Err(Error::Shape(_))));

        let b3 = CTensor::<f32>::zeros(&[3]).unwrap();
        let w = CTensor::<f32>::zeros(&[3, 3, 2, 4]).unwrap();
        assert!(ConvParams::new(w, b3, 1, 1).is_err());
    }

    #[test]
    fn zero_padding_contributes_nothing() {
        // A 3x3 all-ones kernel over a 1x1 input with pad 1 sees the value
        // only at the center tap; the 8 padded taps contribute zero.
        let x = CTensor::from_vec(&[1, 1, 1, 1], vec![c(2.0, -3.0)]).unwrap();
        let w = CTensor::from_vec(&[3, 3, 1, 1], vec![c(1.0, 0.0); 9]).unwrap();
        let b = CTensor::from_vec(&[1], vec![c(0.0, 0.0)]).unwrap();
        let p = ConvParams::new(w, b, 1, 1).unwrap();
        let y = cconv2d_fwd(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], c::<f64>(2.0, -3.0));
    }

    #[test]
    fn strided_convolution_downsamples() {
        let mut x = CTensor::<f64>::zeros(&[1, 4, 4, 1]).unwrap();
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            v.re = k as f64;
        }
        let p = ConvParams::new(
            CTensor::from_vec(&[2, 2, 1, 1], vec![c(0.25, 0.0); 4]).unwrap(),
            CTensor::from_vec(&[1], vec![c(0.0, 0.0)]).unwrap(),
            2,
            0,
        )
        .unwrap();
        let y = cconv2d_fwd(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        // Mean of each disjoint 2x2 block.
        assert_eq!(y.data()[0].re, (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(y.data()[3].re, (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }
}

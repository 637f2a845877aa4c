//! Magnitude max pooling and location-directed unpooling.
//!
//! Pooling keeps, per window and channel, the complex value with the
//! largest magnitude (ties broken toward the first element in row-major
//! window order) and records its flat index in the source tensor in a
//! [`LocMap`]. The backward pass routes gradients to exactly those
//! positions.
//!
//! Unpooling is the structural inverse used by the decoder: it places a
//! pooled-shaped tensor's values at the recorded locations of a source-
//! shaped tensor of zeros, so activations return to the resolution they
//! had before pooling without learned interpolation. When location maps
//! are disabled as an ablation, [`top_left_locmap`] fabricates a map that
//! drops every value at its window's top-left corner instead.

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Where each pooled element came from: flat indices into the source
/// tensor, one per pooled element in row-major pooled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocMap {
    source_shape: Vec<usize>,
    pooled_shape: Vec<usize>,
    idx: Vec<usize>,
}

impl LocMap {
    pub fn source_shape(&self) -> &[usize] {
        &self.source_shape
    }

    pub fn pooled_shape(&self) -> &[usize] {
        &self.pooled_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }
}

fn pool_geometry<R: Real>(
    x: &CTensor<R>,
    window: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("pooling input must be rank 4, got {:?}", x.shape())));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Shape("pooling window and stride must be at least 1".into()));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pooling window {window} exceeds input extent {h}x{w}"
        )));
    }
    if !(h - window).is_multiple_of(stride) || !(w - window).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "stride {stride} does not tile extent {h}x{w} with window {window}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Max-magnitude pooling. Returns the pooled tensor and the location map.
pub fn cmaxpool_fwd<R: Real>(
    x: &CTensor<R>,
    window: usize,
    stride: usize,
) -> Result<(CTensor<R>, LocMap)> {
    let (oh, ow) = pool_geometry(x, window, stride)?;
    let (bs, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = CTensor::<R>::zeros(&[bs, oh, ow, c])?;
    let mut idx = vec![0usize; bs * oh * ow * c];
    let xd = x.data();
    let od = out.data_mut();

    let mut best_norm = vec![R::zero(); c];
    let mut best_idx = vec![0usize; c];
    for b in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy0, ix0) = (oy * stride, ox * stride);
                for k in 0..c {
                    best_norm[k] = R::neg_infinity();
                }
                for ky in 0..window {
                    for kx in 0..window {
                        let src = ((b * h + iy0 + ky) * w + ix0 + kx) * c;
                        for k in 0..c {
                            let n = xd[src + k].norm_sqr();
                            // Strict comparison keeps the first (row-major)
                            // element on ties.
                            if n > best_norm[k] {
                                best_norm[k] = n;
                                best_idx[k] = src + k;
                            }
                        }
                    }
                }
                let dst = ((b * oh + oy) * ow + ox) * c;
                for k in 0..c {
                    od[dst + k] = xd[best_idx[k]];
                    idx[dst + k] = best_idx[k];
                }
            }
        }
    }
    let loc = LocMap {
        source_shape: x.shape().to_vec(),
        pooled_shape: vec![bs, oh, ow, c],
        idx,
    };
    Ok((out, loc))
}

/// Pooling backward: scatter the upstream gradient to the positions the
/// forward selected (accumulating where windows overlapped).
pub fn cmaxpool_bwd<R: Real>(loc: &LocMap, dy: &CTensor<R>) -> Result<CTensor<R>> {
    if dy.shape() != loc.pooled_shape {
        return Err(Error::Shape(format!(
            "pool backward: gradient shape {:?}, map expects {:?}",
            dy.shape(),
            loc.pooled_shape
        )));
    }
    let mut dx = CTensor::<R>::zeros(&loc.source_shape)?;
    let dd = dx.data_mut();
    for (g, &i) in dy.data().iter().zip(&loc.idx) {
        dd[i] += g;
    }
    Ok(dx)
}

/// Unpooling forward: place `x` (pooled-shaped) at the recorded locations
/// of a zero tensor with the map's source shape.
pub fn cmaxunpool_fwd<R: Real>(x: &CTensor<R>, loc: &LocMap) -> Result<CTensor<R>> {
    if x.shape() != loc.pooled_shape {
        return Err(Error::Shape(format!(
            "unpool: input shape {:?}, map expects {:?}",
            x.shape(),
            loc.pooled_shape
        )));
    }
    let mut y = CTensor::<R>::zeros(&loc.source_shape)?;
    let yd = y.data_mut();
    for (v, &i) in x.data().iter().zip(&loc.idx) {
        yd[i] = *v;
    }
    Ok(y)
}

/// Unpooling backward: gather the upstream gradient from the recorded
/// locations.
pub fn cmaxunpool_bwd<R: Real>(loc: &LocMap, dy: &CTensor<R>) -> Result<CTensor<R>> {
    if dy.shape() != loc.source_shape {
        return Err(Error::Shape(format!(
            "unpool backward: gradient shape {:?}, map expects {:?}",
            dy.shape(),
            loc.source_shape
        )));
    }
    let mut dx = CTensor::<R>::zeros(&loc.pooled_shape)?;
    let dd = dx.data_mut();
    for (d, &i) in dd.iter_mut().zip(&loc.idx) {
        *d = dy.data()[i];
    }
    Ok(dx)
}

/// Location map that ignores where maxima were: every pooled value lands at
/// its window's top-left corner. Used by the no-location-map ablation.
pub fn top_left_locmap(
    source_shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<LocMap> {
    if source_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "location map needs a rank-4 source shape, got {source_shape:?}"
        )));
    }
    let (bs, h, w, c) = (source_shape[0], source_shape[1], source_shape[2], source_shape[3]);
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::Shape(format!(
            "window {window}/stride {stride} do not fit extent {h}x{w}"
        )));
    }
    if !(h - window).is_multiple_of(stride) || !(w - window).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "stride {stride} does not tile extent {h}x{w} with window {window}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut idx = Vec::with_capacity(bs * oh * ow * c);
    for b in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((b * h + oy * stride) * w + ox * stride) * c;
                for k in 0..c {
                    idx.push(src + k);
                }
            }
        }
    }
    Ok(LocMap { source_shape: source_shape.to_vec(), pooled_shape: vec![bs, oh, ow, c], idx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;

    #[test]
    fn pool_picks_largest_magnitude() {
        // |1+1i| = sqrt(2), |-2i| = 2, |0.5| = 0.5, |1-1i| = sqrt(2).
        let x = CTensor::from_vec(
            &[1, 2, 2, 1],
            vec![c(1.0, 1.0), c(0.0, -2.0), c(0.5, 0.0), c(1.0, -1.0)],
        )
        .unwrap();
        let (y, loc) = cmaxpool_fwd(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], c::<f64>(0.0, -2.0));
        assert_eq!(loc.indices(), &[1]);
    }

    #[test]
    fn pool_breaks_ties_toward_first_row_major_element() {
        let x = CTensor::from_vec(
            &[1, 2, 2, 1],
            vec![c(0.0, 1.0), c(1.0, 0.0), c(0.0, -1.0), c(-1.0, 0.0)],
        )
        .unwrap();
        let (y, loc) = cmaxpool_fwd(&x, 2, 2).unwrap();
        assert_eq!(loc.indices(), &[0]);
        assert_eq!(y.data()[0], c::<f64>(0.0, 1.0));
    }

    #[test]
    fn pool_is_per_channel() {
        // Channel 0 peaks at the top-left, channel 1 at the bottom-right.
        let x = CTensor::from_vec(
            &[1, 2, 2, 2],
            vec![
                c(9.0, 0.0),
                c(0.1, 0.0),
                c(1.0, 0.0),
                c(0.2, 0.0),
                c(1.0, 0.0),
                c(0.3, 0.0),
                c(1.0, 0.0),
                c(7.0, 0.0),
            ],
        )
        .unwrap();
        let (y, loc) = cmaxpool_fwd(&x, 2, 2).unwrap();
        assert_eq!(y.data()[0], c::<f64>(9.0, 0.0));
        assert_eq!(y.data()[1], c::<f64>(7.0, 0.0));
        assert_eq!(loc.indices(), &[0, 7]);
    }

    #[test]
    fn unpool_restores_positions_and_roundtrips() {
        let x = CTensor::from_vec(
            &[1, 2, 4, 1],
            vec![
                c(1.0, 0.0),
                c(5.0, 0.0),
                c(0.0, 3.0),
                c(0.0, 1.0),
                c(2.0, 0.0),
                c(0.5, 0.0),
                c(0.0, -4.0),
                c(0.0, 0.5),
            ],
        )
        .unwrap();
        let (p, loc) = cmaxpool_fwd(&x, 2, 2).unwrap();
        let up = cmaxunpool_fwd(&p, &loc).unwrap();
        assert_eq!(up.shape(), x.shape());
        // Maxima sit at their original positions, the rest is zero.
        assert_eq!(up.data()[1], c::<f64>(5.0, 0.0));
        assert_eq!(up.data()[6], c::<f64>(0.0, -4.0));
        let placed: usize =
            up.data().iter().filter(|v| v.re != 0.0 || v.im != 0.0).count();
        assert_eq!(placed, 2);
        // Pooling the unpooled tensor reproduces the pooled tensor exactly.
        let (p2, loc2) = cmaxpool_fwd(&up, 2, 2).unwrap();
        assert_eq!(p2, p);
        assert_eq!(loc2, loc);
    }

    #[test]
    fn pool_backward_routes_to_argmax_only() {
        let x: CTensor<f64> = CTensor::from_vec(
            &[1, 2, 2, 1],
            vec![c(1.0, 1.0), c(0.0, -2.0), c(0.5, 0.0), c(1.0, -1.0)],
        )
        .unwrap();
        let (_, loc) = cmaxpool_fwd(&x, 2, 2).unwrap();
        let dy = CTensor::from_vec(&[1, 1, 1, 1], vec![c(3.0, -1.0)]).unwrap();
        let dx = cmaxpool_bwd(&loc, &dy).unwrap();
        assert_eq!(dx.data()[1], c::<f64>(3.0, -1.0));
        for (k, v) in dx.data().iter().enumerate() {
            if k != 1 {
                assert_eq!(*v, c::<f64>(0.0, 0.0));
            }
        }
    }

    #[test]
    fn top_left_map_places_at_window_origin() {
        let loc = top_left_locmap(&[1, 4, 4, 1], 2, 2).unwrap();
        assert_eq!(loc.indices(), &[0, 2, 8, 10]);
        let p = CTensor::from_vec(
            &[1, 2, 2, 1],
            vec![c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)],
        )
        .unwrap();
        let up = cmaxunpool_fwd(&p, &loc).unwrap();
        assert_eq!(up.data()[0], c::<f64>(1.0, 0.0));
        assert_eq!(up.data()[2], c::<f64>(2.0, 0.0));
        assert_eq!(up.data()[8], c::<f64>(3.0, 0.0));
        assert_eq!(up.data()[10], c::<f64>(4.0, 0.0));
    }

    #[test]
    fn geometry_violations_error() {
        let x = CTensor::<f32>::zeros(&[1, 3, 3, 1]).unwrap();
        assert!(matches!(cmaxpool_fwd(&x, 2, 2), Err(Error::Shape(_))));
        assert!(matches!(cmaxpool_fwd(&x, 4, 1), Err(Error::Shape(_))));
        let x = CTensor::<f32>::zeros(&[1, 4, 4, 1]).unwrap();
        let (_, loc) = cmaxpool_fwd(&x, 2, 2).unwrap();
        let wrong = CTensor::<f32>::zeros(&[1, 3, 3, 1]).unwrap();
        assert!(matches!(cmaxunpool_fwd(&wrong, &loc), Err(Error::Shape(_))));
        assert!(matches!(cmaxpool_bwd(&loc, &wrong), Err(Error::Shape(_))));
    }
}

//! Dense complex tensors with row-major interleaved storage.
//!
//! `CTensor` is the single data container of the engine. Activations are
//! rank-4 `[batch, height, width, channels]`, convolution kernels rank-4
//! `[kh, kw, in, out]`, biases rank-1 `[channels]`, and image cubes rank-3
//! `[height, width, channels]`. Storage is always row-major: the flat index
//! of `[b, i, j, c]` is `((b*H + i)*W + j)*C + c`, each element one
//! `Complex<R>` with the real part first in memory.
//!
//! Tensors serialize to the `CVT` format: magic `CVT1`, a `u8` rank,
//! `rank` little-endian `u64` dimensions, then `re, im` pairs of
//! little-endian `f32` in row-major order. The format is f32 regardless of
//! the in-memory scalar type; f64 tensors are a verification device, not a
//! storage one.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Magic bytes opening every serialized tensor record.
pub const CVT_MAGIC: &[u8; 4] = b"CVT1";

/// Refuse to allocate tensors beyond this many elements when deserializing.
const MAX_FILE_ELEMS: u64 = 1 << 28;

/// Dense complex tensor, row-major, interleaved re/im.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor<R: Real = f32> {
    shape: Vec<usize>,
    data: Vec<Complex<R>>,
}

impl<R: Real> CTensor<R> {
    /// All-zero tensor of the given shape. Every dimension must be positive.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor shape must have at least one dimension".into()));
        }
        let mut n: usize = 1;
        for (axis, &d) in shape.iter().enumerate() {
            if d == 0 {
                return Err(Error::Shape(format!("dimension {axis} is zero in shape {shape:?}")));
            }
            n = n.checked_mul(d).ok_or_else(|| {
                Error::Shape(format!("shape {shape:?} overflows the address space"))
            })?;
        }
        Ok(Self { shape: shape.to_vec(), data: vec![Complex::new(R::zero(), R::zero()); n] })
    }

    /// Tensor from existing elements; `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<Complex<R>>) -> Result<Self> {
        let t = Self::zeros(shape)?;
        if data.len() != t.data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                t.data.len(),
                data.len()
            )));
        }
        Ok(Self { shape: t.shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of complex elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex<R>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<R>] {
        &mut self.data
    }

    /// Flat offset of `[b, i, j, c]` in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, b: usize, i: usize, j: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.shape[1] + i) * self.shape[2] + j) * self.shape[3] + c
    }

    #[inline]
    pub fn at4(&self, b: usize, i: usize, j: usize, c: usize) -> Complex<R> {
        self.data[self.offset4(b, i, j, c)]
    }

    #[inline]
    pub fn at4_mut(&mut self, b: usize, i: usize, j: usize, c: usize) -> &mut Complex<R> {
        let k = self.offset4(b, i, j, c);
        &mut self.data[k]
    }

    /// Flat offset of `[i, j, c]` in a rank-3 tensor.
    #[inline]
    pub fn offset3(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (i * self.shape[1] + j) * self.shape[2] + c
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// In-place element-wise accumulate; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiply every element by a real scalar.
    pub fn scale(&mut self, s: R) {
        for v in &mut self.data {
            v.re *= s;
            v.im *= s;
        }
    }

    /// Same values in another scalar precision.
    pub fn cast<R2: Real>(&self) -> CTensor<R2> {
        CTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| Complex::new(R2::from_f64(v.re.to_f64()), R2::from_f64(v.im.to_f64())))
                .collect(),
        }
    }

    /// Largest magnitude over all elements (0 for the empty products guard).
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.norm_sqr().to_f64().sqrt())
            .fold(0.0, f64::max)
    }

    /// Axes `(height, width)` of a rank-3 or rank-4 spatial tensor.
    fn spatial_axes(&self) -> Result<(usize, usize)> {
        match self.rank() {
            3 => Ok((0, 1)),
            4 => Ok((1, 2)),
            r => Err(Error::Shape(format!("spatial op needs rank 3 or 4, got rank {r}"))),
        }
    }

    /// Mirror-pad the two spatial axes without repeating the edge sample.
    ///
    /// `[a, b, c]` padded by 1 becomes `[b, a, b, c, b]`. Each pad amount
    /// must be at most `dim - 1`, otherwise the reflection has nothing to
    /// mirror and a padding error is returned. Accepts distinct amounts per
    /// side so callers can pad to a size target that is not centered.
    pub fn reflect_pad_asym(
        &self,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Self> {
        let (ah, aw) = self.spatial_axes()?;
        let (h, w) = (self.shape[ah], self.shape[aw]);
        for (pad, dim, side) in
            [(top, h, "top"), (bottom, h, "bottom"), (left, w, "left"), (right, w, "right")]
        {
            if pad > dim.saturating_sub(1) {
                return Err(Error::Padding(format!(
                    "reflect pad {pad} on {side} needs at least {} samples, have {dim}",
                    pad + 1
                )));
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[ah] = h + top + bottom;
        out_shape[aw] = w + left + right;
        let mut out = Self::zeros(&out_shape)?;

        let reflect = |t: isize, n: usize| -> usize {
            if t < 0 {
                (-t) as usize
            } else if t as usize >= n {
                2 * n - 2 - t as usize
            } else {
                t as usize
            }
        };

        let batch = if self.rank() == 4 { self.shape[0] } else { 1 };
        let ch = *self.shape.last().unwrap();
        let (oh, ow) = (out_shape[ah], out_shape[aw]);
        for b in 0..batch {
            for oi in 0..oh {
                let si = reflect(oi as isize - top as isize, h);
                for oj in 0..ow {
                    let sj = reflect(oj as isize - left as isize, w);
                    let src = ((b * h + si) * w + sj) * ch;
                    let dst = ((b * oh + oi) * ow + oj) * ch;
                    out.data[dst..dst + ch].copy_from_slice(&self.data[src..src + ch]);
                }
            }
        }
        Ok(out)
    }

    /// Symmetric mirror padding of both spatial axes.
    pub fn reflect_pad(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        self.reflect_pad_asym(pad_h, pad_h, pad_w, pad_w)
    }

    /// Spatial window `[top, top+height) x [left, left+width)`.
    pub fn crop_spatial(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (ah, aw) = self.spatial_axes()?;
        let (h, w) = (self.shape[ah], self.shape[aw]);
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(Error::Shape(format!(
                "crop [{top}+{height}, {left}+{width}] exceeds spatial extent {h}x{w}"
            )));
        }
        let mut out_shape = self.shape.clone();
        out_shape[ah] = height;
        out_shape[aw] = width;
        let mut out = Self::zeros(&out_shape)?;
        let batch = if self.rank() == 4 { self.shape[0] } else { 1 };
        let ch = *self.shape.last().unwrap();
        for b in 0..batch {
            for oi in 0..height {
                let si = top + oi;
                let src = ((b * h + si) * w + left) * ch;
                let dst = ((b * height + oi) * width) * ch;
                out.data[dst..dst + width * ch]
                    .copy_from_slice(&self.data[src..src + width * ch]);
            }
        }
        Ok(out)
    }

    fn flip_spatial(&self, flip_h: bool) -> Result<Self> {
        let (ah, aw) = self.spatial_axes()?;
        let (h, w) = (self.shape[ah], self.shape[aw]);
        let batch = if self.rank() == 4 { self.shape[0] } else { 1 };
        let ch = *self.shape.last().unwrap();
        let mut out = Self::zeros(&self.shape)?;
        for b in 0..batch {
            for i in 0..h {
                let si = if flip_h { i } else { h - 1 - i };
                for j in 0..w {
                    let sj = if flip_h { w - 1 - j } else { j };
                    let src = ((b * h + si) * w + sj) * ch;
                    let dst = ((b * h + i) * w + j) * ch;
                    out.data[dst..dst + ch].copy_from_slice(&self.data[src..src + ch]);
                }
            }
        }
        Ok(out)
    }

    /// Mirror along the width axis (left-right).
    pub fn hflip(&self) -> Result<Self> {
        self.flip_spatial(true)
    }

    /// Mirror along the height axis (top-bottom).
    pub fn vflip(&self) -> Result<Self> {
        self.flip_spatial(false)
    }
}

impl<R: Real> CTensor<R> {
    /// Write one CVT record (f32 payload) to a stream.
    pub fn write_cvt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CVT_MAGIC)?;
        if self.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} exceeds the format limit", self.rank())));
        }
        w.write_all(&[self.rank() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&(v.re.to_f64() as f32).to_le_bytes());
            buf.extend_from_slice(&(v.im.to_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Read one CVT record from a stream, leaving the cursor just past it.
    pub fn read_cvt<Rd: Read>(rd: &mut Rd) -> Result<CTensor<R>> {
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("tensor record truncated before magic: {e}")))?;
        if &magic != CVT_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}, expected {:?}",
                magic, CVT_MAGIC
            )));
        }
        let mut rank = [0u8; 1];
        rd.read_exact(&mut rank)
            .map_err(|e| Error::Format(format!("tensor record truncated at rank: {e}")))?;
        let rank = rank[0] as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unreasonable tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total: u64 = 1;
        for axis in 0..rank {
            let mut d = [0u8; 8];
            rd.read_exact(&mut d)
                .map_err(|e| Error::Format(format!("tensor record truncated in shape: {e}")))?;
            let d = u64::from_le_bytes(d);
            if d == 0 {
                return Err(Error::Format(format!("dimension {axis} is zero")));
            }
            total = total
                .checked_mul(d)
                .filter(|&t| t <= MAX_FILE_ELEMS)
                .ok_or_else(|| Error::Format(format!("tensor of {total}x{d}+ elements refused")))?;
            shape.push(d as usize);
        }
        let mut buf = vec![0u8; (total as usize) * 8];
        rd.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("tensor payload truncated: {e}")))?;
        let mut data = Vec::with_capacity(total as usize);
        for pair in buf.chunks_exact(8) {
            let re = f32::from_le_bytes(pair[0..4].try_into().unwrap());
            let im = f32::from_le_bytes(pair[4..8].try_into().unwrap());
            data.push(Complex::new(R::from_f64(re as f64), R::from_f64(im as f64)));
        }
        CTensor::from_vec(&shape, data)
    }

    /// Write the tensor to a file as a single CVT record.
    pub fn save_cvt<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_cvt(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Read a file holding exactly one CVT record.
    pub fn load_cvt<P: AsRef<Path>>(path: P) -> Result<CTensor<R>> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let t = Self::read_cvt(&mut f)?;
        let mut tail = [0u8; 1];
        match f.read(&mut tail)? {
            0 => Ok(t),
            _ => Err(Error::Format("trailing bytes after tensor record".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;

    fn cx(re: f32, im: f32) -> Complex<f32> {
        Complex::new(re, im)
    }

    #[test]
    fn zeros_rejects_zero_dimension() {
        let err = CTensor::<f32>::zeros(&[2, 0, 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "got {err:?}");
        assert!(CTensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(CTensor::from_vec(&[2, 2], vec![cx(1.0, 0.0); 3]).is_err());
        let t = CTensor::from_vec(&[2, 2], vec![cx(1.0, 2.0); 4]).unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn layout_is_row_major_with_channel_innermost() {
        // Fill [b,i,j,c] with a value encoding its coordinates, then check
        // the flat order matches ((b*H+i)*W+j)*C+c exactly.
        let (bs, h, w, ch) = (2, 3, 4, 5);
        let mut t = CTensor::<f32>::zeros(&[bs, h, w, ch]).unwrap();
        for b in 0..bs {
            for i in 0..h {
                for j in 0..w {
                    for c in 0..ch {
                        *t.at4_mut(b, i, j, c) =
                            cx((((b * h + i) * w + j) * ch + c) as f32, 0.0);
                    }
                }
            }
        }
        for (k, v) in t.data().iter().enumerate() {
            assert_eq!(v.re as usize, k);
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        // Height [a, b, c] with pad 1 becomes [b, a, b, c, b].
        let t = CTensor::from_vec(&[3, 1, 1], vec![cx(1.0, 0.0), cx(2.0, 0.0), cx(3.0, 0.0)])
            .unwrap();
        let p = t.reflect_pad(1, 0).unwrap();
        let got: Vec<f32> = p.data().iter().map(|v| v.re).collect();
        assert_eq!(got, vec![2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn reflect_pad_rejects_oversized_pad() {
        let t = CTensor::from_vec(&[3, 1, 1], vec![cx(0.0, 0.0); 3]).unwrap();
        assert!(t.reflect_pad(2, 0).is_ok());
        let err = t.reflect_pad(3, 0).unwrap_err();
        assert!(matches!(err, Error::Padding(_)), "got {err:?}");
    }

    #[test]
    fn asymmetric_pad_then_crop_is_identity() {
        let vals: Vec<_> = (0..24).map(|k| cx(k as f32, -(k as f32))).collect();
        let t = CTensor::from_vec(&[4, 3, 2], vals).unwrap();
        let p = t.reflect_pad_asym(1, 2, 0, 1).unwrap();
        assert_eq!(p.shape(), &[7, 4, 2]);
        let back = p.crop_spatial(1, 0, 4, 3).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn flips_are_involutions_and_reverse_coordinates() {
        let vals: Vec<_> = (0..12).map(|k| cx(k as f32, 0.0)).collect();
        let t = CTensor::from_vec(&[1, 3, 4, 1], vals).unwrap();
        let hf = t.hflip().unwrap();
        assert_eq!(hf.at4(0, 0, 0, 0).re, 3.0);
        assert_eq!(hf.hflip().unwrap(), t);
        let vf = t.vflip().unwrap();
        assert_eq!(vf.at4(0, 0, 0, 0).re, 8.0);
        assert_eq!(vf.vflip().unwrap(), t);
    }

    #[test]
    fn add_requires_equal_shapes() {
        let a = CTensor::<f32>::zeros(&[2, 2]).unwrap();
        let b = CTensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(a.add(&b).is_err());
        let c = a.add(&a).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
    }

    #[test]
    fn cvt_roundtrip_is_bit_exact() {
        let vals: Vec<_> = (0..30)
            .map(|k| cx((k as f32) * 0.37 - 3.0, (k as f32) * -1.21 + 0.5))
            .collect();
        let t = CTensor::from_vec(&[2, 3, 5], vals).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cvt");
        t.save_cvt(&path).unwrap();
        let back = CTensor::<f32>::load_cvt(&path).unwrap();
        assert_eq!(back, t);

        // Two writes of the same tensor produce identical bytes.
        let mut a = Vec::new();
        let mut b = Vec::new();
        t.write_cvt(&mut a).unwrap();
        t.write_cvt(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cvt_rejects_bad_magic_truncation_and_trailing_bytes() {
        let t = CTensor::from_vec(&[2, 2], vec![cx(1.0, 2.0); 4]).unwrap();
        let mut bytes = Vec::new();
        t.write_cvt(&mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = CTensor::<f32>::read_cvt(&mut bad.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");

        let cut = &bytes[..bytes.len() - 3];
        let err = CTensor::<f32>::read_cvt(&mut &cut[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trail.cvt");
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&path, &longer).unwrap();
        let err = CTensor::<f32>::load_cvt(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn cvt_refuses_absurd_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CVT_MAGIC);
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        let err = CTensor::<f32>::read_cvt(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn cast_roundtrip_preserves_f32_values() {
        let vals: Vec<_> = (0..8).map(|k| cx(0.1 * k as f32, -0.2 * k as f32)).collect();
        let t = CTensor::from_vec(&[8], vals).unwrap();
        let up: CTensor<f64> = t.cast();
        let down: CTensor<f32> = up.cast();
        assert_eq!(down, t);
    }
}

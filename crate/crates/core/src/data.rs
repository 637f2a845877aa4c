//! Data pipeline: coherency matrices, input vectors, synthetic scenes,
//! patching, augmentation, splitting, and label subsampling.
//!
//! A pixel of polarimetric data is summarized by its 3x3 Hermitian
//! coherency matrix `T = (1/L) * sum_i u_i u_i^H`, the multi-look average
//! of scattering-vector outer products. The network consumes the six
//! unique entries of `T` as complex channels `(T11, T22, T33, T12, T13,
//! T23)`; a 9-channel real projection is provided for comparator
//! experiments that discard cross-channel phase.
//!
//! The synthetic generator draws each pixel's scattering vectors from a
//! zero-mean circular complex Gaussian with a per-class covariance (via
//! its Cholesky factor), which is exactly the distributional model the
//! initialization scheme assumes, so generated scenes double as a
//! statistical oracle: class posteriors are known by construction.
//! Per-pixel generator streams are derived from `(seed, pixel index)`,
//! making every pixel's value independent of raster traversal order.

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::scalar::Real;

/// Number of complex input channels carried per pixel.
pub const INPUT_CHANNELS: usize = 6;

/// A scene ready for training or evaluation: the complex feature cube,
/// per-pixel labels (0 = unlabeled), and the class count.
#[derive(Debug, Clone)]
pub struct Dataset<R: Real = f32> {
    pub cube: CTensor<R>,
    pub labels: LabelGrid,
    pub k: usize,
}

impl<R: Real> Dataset<R> {
    pub fn new(cube: CTensor<R>, labels: LabelGrid, k: usize) -> Result<Self> {
        if cube.rank() != 3 || cube.shape()[2] != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "dataset cube must be [H, W, {INPUT_CHANNELS}], got {:?}",
                cube.shape()
            )));
        }
        if cube.shape()[0] != labels.height() || cube.shape()[1] != labels.width() {
            return Err(Error::Shape(format!(
                "cube {}x{} does not match labels {}x{}",
                cube.shape()[0],
                cube.shape()[1],
                labels.height(),
                labels.width()
            )));
        }
        if k == 0 || k > 255 {
            return Err(Error::Label(format!("class count {k} must lie in 1..=255")));
        }
        if usize::from(labels.max_label()) > k {
            return Err(Error::Label(format!(
                "label {} exceeds class count {k}",
                labels.max_label()
            )));
        }
        Ok(Self { cube, labels, k })
    }

    pub fn height(&self) -> usize {
        self.cube.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.cube.shape()[1]
    }
}

/// One class of the synthetic scene: its 3x3 Hermitian positive-definite
/// covariance, entries as `[re, im]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub cov: [[[f64; 2]; 3]; 3],
}

/// An axis-aligned rectangle of one class; later rectangles overwrite
/// earlier ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub class: u8,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

fn default_looks() -> usize {
    9
}

/// Declarative description of a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_looks")]
    pub looks: usize,
    #[serde(default)]
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub layout: Vec<RegionSpec>,
}

impl SceneSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("scene spec is not valid: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serializes")
    }

    /// A ready-made three-class scene: vertical thirds of well-separated
    /// covariances plus an inset square of class 1 inside the third
    /// stripe, so boundaries run in both axes.
    pub fn three_class_demo(height: usize, width: usize, looks: usize, seed: u64) -> Self {
        let c = |m: [[[f64; 2]; 3]; 3]| ClassSpec { cov: m };
        let classes = vec![
            // Dominant first diagonal entry, mild correlations.
            c([
                [[6.0, 0.0], [1.0, 0.5], [0.3, -0.2]],
                [[1.0, -0.5], [2.0, 0.0], [0.1, 0.1]],
                [[0.3, 0.2], [0.1, -0.1], [1.0, 0.0]],
            ]),
            // Dominant second diagonal entry, negative correlation.
            c([
                [[2.0, 0.0], [-1.2, 0.6], [0.2, 0.0]],
                [[-1.2, -0.6], [5.0, 0.0], [0.4, -0.3]],
                [[0.2, 0.0], [0.4, 0.3], [1.5, 0.0]],
            ]),
            // Balanced diagonal, weak correlations.
            c([
                [[3.0, 0.0], [0.3, 0.3], [0.1, 0.1]],
                [[0.3, -0.3], [3.0, 0.0], [0.2, -0.1]],
                [[0.1, -0.1], [0.2, 0.1], [3.0, 0.0]],
            ]),
        ];
        let a = width / 3;
        let b = 2 * width / 3;
        let mut layout = vec![
            RegionSpec { class: 1, x: 0, y: 0, w: a, h: height },
            RegionSpec { class: 2, x: a, y: 0, w: b - a, h: height },
            RegionSpec { class: 3, x: b, y: 0, w: width - b, h: height },
        ];
        let s = height / 4;
        let stripe_w = width - b;
        if s >= 1 && stripe_w > s && height > s {
            layout.push(RegionSpec {
                class: 1,
                x: b + (stripe_w - s) / 2,
                y: (height - s) / 2,
                w: s,
                h: s,
            });
        }
        Self { height, width, looks, seed, classes, layout }
    }
}

fn to_complex(m: &[[[f64; 2]; 3]; 3]) -> [[Complex<f64>; 3]; 3] {
    let mut out = [[Complex::new(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = Complex::new(m[i][j][0], m[i][j][1]);
        }
    }
    out
}

/// Cholesky factor `A` (lower triangular) of a 3x3 Hermitian
/// positive-definite matrix, so `A * A^H = C`.
pub fn complex_cholesky3(c: &[[Complex<f64>; 3]; 3]) -> Result<[[Complex<f64>; 3]; 3]> {
    let scale = c
        .iter()
        .flatten()
        .map(|v| v.norm())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    for i in 0..3 {
        for j in 0..3 {
            if (c[i][j] - c[j][i].conj()).norm() > 1e-9 * scale {
                return Err(Error::Covariance(format!(
                    "matrix is not Hermitian at ({i},{j})"
                )));
            }
        }
    }
    let mut a = [[Complex::new(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = c[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k].conj();
            }
            if i == j {
                if s.re <= 0.0 {
                    return Err(Error::Covariance(format!(
                        "matrix is not positive definite (pivot {i} = {:.3e})",
                        s.re
                    )));
                }
                a[i][j] = Complex::new(s.re.sqrt(), 0.0);
            } else {
                a[i][j] = s / a[j][j];
            }
        }
    }
    Ok(a)
}

/// Multi-look coherency matrix `T = (1/L) * sum_i u_i u_i^H`.
pub fn coherency_from_scatter(u_samples: &[[Complex<f64>; 3]]) -> Result<[[Complex<f64>; 3]; 3]> {
    if u_samples.is_empty() {
        return Err(Error::Domain("coherency average needs at least one look".into()));
    }
    let mut t = [[Complex::new(0.0, 0.0); 3]; 3];
    for u in u_samples {
        for i in 0..3 {
            for j in 0..3 {
                t[i][j] += u[i] * u[j].conj();
            }
        }
    }
    let inv = 1.0 / u_samples.len() as f64;
    for row in &mut t {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(t)
}

/// The six unique entries of a coherency matrix as complex channels
/// `(T11, T22, T33, T12, T13, T23)`; diagonals carry zero imaginary part.
pub fn input_vector(t: &[[Complex<f64>; 3]; 3]) -> [Complex<f64>; 6] {
    [
        Complex::new(t[0][0].re, 0.0),
        Complex::new(t[1][1].re, 0.0),
        Complex::new(t[2][2].re, 0.0),
        t[0][1],
        t[0][2],
        t[1][2],
    ]
}

/// The same information as nine real channels, phase split out:
/// `(T11, T22, T33, re T12, re T13, re T23, im T12, im T13, im T23)`.
pub fn real_vector(t: &[[Complex<f64>; 3]; 3]) -> [f64; 9] {
    [
        t[0][0].re,
        t[1][1].re,
        t[2][2].re,
        t[0][1].re,
        t[0][2].re,
        t[1][2].re,
        t[0][1].im,
        t[0][2].im,
        t[1][2].im,
    ]
}

/// One draw from the standard circular complex normal (`E|z|^2 = 1`).
fn standard_complex(rng: &mut ChaCha8Rng) -> Complex<f64> {
    let u1 = loop {
        let v: f64 = rng.gen();
        if v > 0.0 {
            break v;
        }
    };
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    Complex::new(r * th.cos(), r * th.sin()) * std::f64::consts::FRAC_1_SQRT_2
}

/// Generate the scene described by `spec`: per pixel of class k, average
/// `looks` outer products of `u ~ CN(0, C_k)` into a coherency matrix and
/// store its six channels. Fully deterministic given the seed.
pub fn synth_scene<R: Real>(spec: &SceneSpec) -> Result<Dataset<R>> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("scene extent must be positive".into()));
    }
    if spec.looks == 0 {
        return Err(Error::Config("looks must be at least 1".into()));
    }
    let k = spec.classes.len();
    if k == 0 || k > 255 {
        return Err(Error::Config(format!("class count {k} must lie in 1..=255")));
    }
    let chol: Vec<[[Complex<f64>; 3]; 3]> = spec
        .classes
        .iter()
        .map(|c| complex_cholesky3(&to_complex(&c.cov)))
        .collect::<Result<_>>()?;

    let mut labels = LabelGrid::unlabeled(spec.height, spec.width)?;
    for (ri, r) in spec.layout.iter().enumerate() {
        if r.class == 0 || usize::from(r.class) > k {
            return Err(Error::Config(format!(
                "layout rectangle {ri} names class {} outside 1..={k}",
                r.class
            )));
        }
        if r.w == 0 || r.h == 0 || r.x + r.w > spec.width || r.y + r.h > spec.height {
            return Err(Error::Config(format!(
                "layout rectangle {ri} ({},{} {}x{}) exceeds the {}x{} scene",
                r.x, r.y, r.w, r.h, spec.width, spec.height
            )));
        }
        for i in r.y..r.y + r.h {
            for j in r.x..r.x + r.w {
                labels.set(i, j, r.class);
            }
        }
    }
    if labels.labeled_count() != spec.height * spec.width {
        return Err(Error::Config(
            "layout does not cover every pixel of the scene".into(),
        ));
    }

    let mut cube = CTensor::<R>::zeros(&[spec.height, spec.width, INPUT_CHANNELS])?;
    let mut looks_buf: Vec<[Complex<f64>; 3]> = Vec::with_capacity(spec.looks);
    for i in 0..spec.height {
        for j in 0..spec.width {
            let idx = i * spec.width + j;
            let a = &chol[usize::from(labels.get(i, j)) - 1];
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(idx as u64);
            looks_buf.clear();
            for _ in 0..spec.looks {
                let z = [
                    standard_complex(&mut rng),
                    standard_complex(&mut rng),
                    standard_complex(&mut rng),
                ];
                let mut u = [Complex::new(0.0, 0.0); 3];
                for (r_i, u_i) in u.iter_mut().enumerate() {
                    for (c_i, z_c) in z.iter().enumerate().take(r_i + 1) {
                        *u_i += a[r_i][c_i] * z_c;
                    }
                }
                looks_buf.push(u);
            }
            let t = coherency_from_scatter(&looks_buf)?;
            let v = input_vector(&t);
            let base = idx * INPUT_CHANNELS;
            for (c_i, val) in v.iter().enumerate() {
                cube.data_mut()[base + c_i] =
                    Complex::new(R::from_f64(val.re), R::from_f64(val.im));
            }
        }
    }
    Dataset::new(cube, labels, k)
}

/// Windowed views over a scene: per patch the feature block, its label
/// block, and the source offset it was cut from.
#[derive(Debug, Clone)]
pub struct PatchSet<R: Real = f32> {
    pub window: usize,
    pub patches: Vec<CTensor<R>>,
    pub labels: Vec<LabelGrid>,
    pub origins: Vec<(usize, usize)>,
}

impl<R: Real> PatchSet<R> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Window offsets along one axis: `0, stride, 2*stride, ...` plus one
/// edge-aligned extra window when the stride does not land exactly on
/// `dim - window`, so every pixel is covered.
pub(crate) fn axis_offsets(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut y = 0;
    while y + window <= dim {
        v.push(y);
        y += stride;
    }
    let last = dim - window;
    if *v.last().expect("window fits at least once") != last {
        v.push(last);
    }
    v
}

/// Cut a dataset into overlapping `window`-sized patches on a `stride`
/// grid, with edge-aligned extras for full coverage.
pub fn extract_patches<R: Real>(
    d: &Dataset<R>,
    window: usize,
    stride: usize,
) -> Result<PatchSet<R>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    let (h, w) = (d.height(), d.width());
    if h < window || w < window {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {window}-pixel window"
        )));
    }
    let ys = axis_offsets(h, window, stride);
    let xs = axis_offsets(w, window, stride);
    let mut set = PatchSet {
        window,
        patches: Vec::with_capacity(ys.len() * xs.len()),
        labels: Vec::with_capacity(ys.len() * xs.len()),
        origins: Vec::with_capacity(ys.len() * xs.len()),
    };
    for &y in &ys {
        for &x in &xs {
            set.patches.push(d.cube.crop_spatial(y, x, window, window)?);
            set.labels.push(d.labels.crop(y, x, window, window)?);
            set.origins.push((y, x));
        }
    }
    Ok(set)
}

/// Triple a patch set: originals, then horizontal flips of all, then
/// vertical flips of all, labels flipped identically.
pub fn augment_flips<R: Real>(p: PatchSet<R>) -> PatchSet<R> {
    let n = p.len();
    let mut out = PatchSet {
        window: p.window,
        patches: Vec::with_capacity(3 * n),
        labels: Vec::with_capacity(3 * n),
        origins: Vec::with_capacity(3 * n),
    };
    for flip in 0..3 {
        for i in 0..n {
            let (t, l) = match flip {
                0 => (p.patches[i].clone(), p.labels[i].clone()),
                1 => (
                    p.patches[i].hflip().expect("patches are rank 3"),
                    p.labels[i].hflip(),
                ),
                _ => (
                    p.patches[i].vflip().expect("patches are rank 3"),
                    p.labels[i].vflip(),
                ),
            };
            out.patches.push(t);
            out.labels.push(l);
            out.origins.push(p.origins[i]);
        }
    }
    out
}

/// Shuffle by seed and split into disjoint train/validation subsets with
/// `ceil(frac * n)` patches in train.
pub fn split_train_val<R: Real>(
    p: PatchSet<R>,
    frac: f64,
    seed: u64,
) -> Result<(PatchSet<R>, PatchSet<R>)> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Domain(format!("train fraction {frac} must lie in (0, 1]")));
    }
    let window = p.window;
    let n = p.len();
    let mut items: Vec<(CTensor<R>, LabelGrid, (usize, usize))> = p
        .patches
        .into_iter()
        .zip(p.labels)
        .zip(p.origins)
        .map(|((t, l), o)| (t, l, o))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_train = ((frac * n as f64).ceil() as usize).clamp(1.min(n), n);
    let val_items = items.split_off(n_train);
    let rebuild = |items: Vec<(CTensor<R>, LabelGrid, (usize, usize))>| {
        let mut s = PatchSet {
            window,
            patches: Vec::with_capacity(items.len()),
            labels: Vec::with_capacity(items.len()),
            origins: Vec::with_capacity(items.len()),
        };
        for (t, l, o) in items {
            s.patches.push(t);
            s.labels.push(l);
            s.origins.push(o);
        }
        s
    };
    Ok((rebuild(items), rebuild(val_items)))
}

/// Keep a seeded random `frac` of each class's labeled pixels (rounded
/// up, at least one) and zero the rest; per-class draws use independent
/// streams so classes never perturb one another.
pub fn sample_labels(labels: &LabelGrid, frac: f64, seed: u64) -> Result<LabelGrid> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Domain(format!("label fraction {frac} must lie in (0, 1]")));
    }
    let (h, w) = (labels.height(), labels.width());
    let mut out = LabelGrid::unlabeled(h, w)?;
    for class in 1..=labels.max_label() {
        let mut idxs: Vec<usize> = labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| i)
            .collect();
        if idxs.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(class));
        idxs.shuffle(&mut rng);
        let keep = ((frac * idxs.len() as f64).ceil() as usize).clamp(1, idxs.len());
        for &i in &idxs[..keep] {
            out.data_mut()[i] = class;
        }
    }
    Ok(out)
}

/// Write a dataset as a CVT cube plus a PGM label grid whose maxval is
/// the class count.
pub fn save_dataset<R: Real>(
    d: &Dataset<R>,
    cube_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    d.cube.save_cvt(cube_path)?;
    d.labels.save_pgm(labels_path, d.k as u8)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]; the PGM maxval is taken as
/// the class count.
pub fn load_dataset<R: Real>(
    cube_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<R>> {
    let cube = CTensor::<R>::load_cvt(cube_path)?;
    let (labels, maxval) = LabelGrid::load_pgm(labels_path)?;
    Dataset::new(cube, labels, usize::from(maxval))
}

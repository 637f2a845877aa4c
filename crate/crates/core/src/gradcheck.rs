//! Finite-difference verification of every backward pass.
//!
//! Each check builds a small random configuration, computes analytic
//! gradients through the layer's backward, and compares them against a
//! central-difference oracle `(J(x + h e_i) - J(x - h e_i)) / 2h`
//! evaluated in f64. The probe functional contracts the layer output
//! with a fixed random cotangent, `J = sum of (w_re y_re + w_im y_im)`,
//! so the upstream gradient fed to the backward is that same cotangent.
//! A random cotangent keeps the probe sensitive everywhere — a uniform
//! one would make batch-norm input gradients vanish identically, since
//! the whitened batch sums to zero by construction. Loss checks probe
//! the scalar loss itself, and the whole-network check probes the masked
//! average cross-entropy of a tiny two-class model end to end.
//!
//! Two gradients are scored against the same f64 oracle: the f64
//! analytic gradient (threshold 1e-6) and the f32 analytic gradient from
//! an identically-valued cast twin (threshold 1e-4, the extra slack
//! covering single-precision forward rounding). Relative error is
//! normalized by `max(|analytic|, |oracle|, gradient scale)` so
//! near-zero components do not explode the ratio; layer checks use the
//! per-tensor scale, while the end-to-end check uses the model-wide
//! scale because conv biases that feed batch norm have structurally
//! zero gradients (the mean subtraction cancels them exactly), leaving
//! whole tensors with no scale of their own.
//!
//! Inputs are drawn away from the few non-smooth points (rectifier gates
//! at zero, absolute-error ties) by a margin wider than the probe step,
//! keeping the oracle valid everywhere it is applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctensor::CTensor;
use crate::error::Result;
use crate::grid::LabelGrid;
use crate::init::InitSpec;
use crate::layers::{
    cbn_bwd, cbn_fwd_train, cconv2d_bwd, cconv2d_fwd, cmaxpool_bwd, cmaxpool_fwd, cmaxunpool_bwd,
    cmaxunpool_fwd, cout_bwd, cout_fwd, crelu_bwd, crelu_fwd, dropout_apply, dropout_bwd,
    dropout_fwd, BnParams, ConvParams,
};
use crate::loss::{ace_loss, eval_loss, one_hot_encode, LossKind, TargetCube};
use crate::net::{NetConfig, NetModel};
use crate::scalar::Real;

/// Acceptance threshold for f32 analytic gradients.
pub const F32_THRESHOLD: f64 = 1e-4;
/// Acceptance threshold for f64 analytic gradients.
pub const F64_THRESHOLD: f64 = 1e-6;

const FD_STEP: f64 = 1e-5;

/// Result of one gradient comparison.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    /// What was checked, e.g. `conv/f64`.
    pub name: String,
    /// Worst relative error over all probed components.
    pub rel_err: f64,
    /// Pass threshold for this precision.
    pub threshold: f64,
    /// Number of real components probed.
    pub components: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.threshold
    }
}

fn comp_get<R: Real>(t: &CTensor<R>, idx: usize) -> f64 {
    let v = t.data()[idx / 2];
    if idx.is_multiple_of(2) {
        v.re.to_f64()
    } else {
        v.im.to_f64()
    }
}

fn comp_set(t: &mut CTensor<f64>, idx: usize, value: f64) {
    let v = &mut t.data_mut()[idx / 2];
    if idx.is_multiple_of(2) {
        v.re = value;
    } else {
        v.im = value;
    }
}

/// Contract a layer output with a cotangent: `sum(w_re y_re + w_im y_im)`.
fn weighted_sum(y: &CTensor<f64>, w: &CTensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(v, c)| v.re * c.re + v.im * c.im).sum()
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> CTensor<f64> {
    let mut t = CTensor::<f64>::zeros(shape).expect("probe shape is valid");
    for v in t.data_mut() {
        v.re = rng.gen::<f64>() * (hi - lo) + lo;
        v.im = rng.gen::<f64>() * (hi - lo) + lo;
    }
    t
}

/// Push every component that sits within `margin` of any point in
/// `points` away from it, so the finite-difference step never crosses a
/// non-smooth boundary.
fn nudge_away(t: &mut CTensor<f64>, points: &[f64], margin: f64) {
    for v in t.data_mut() {
        for p in points {
            if (v.re - p).abs() < margin {
                v.re = p + margin * if v.re >= *p { 2.0 } else { -2.0 };
            }
            if (v.im - p).abs() < margin {
                v.im = p + margin * if v.im >= *p { 2.0 } else { -2.0 };
            }
        }
    }
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(scale).max(1e-12);
    (a - b).abs() / denom
}

fn tensor_grad_scale<R: Real>(t: &CTensor<R>) -> f64 {
    t.data()
        .iter()
        .map(|v| v.re.to_f64().abs().max(v.im.to_f64().abs()))
        .fold(0.0, f64::max)
}

/// Indices to probe in a tensor of `len2` real components: everything
/// when small, otherwise ends plus seeded random picks.
fn sample_indices(len2: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len2 <= max {
        return (0..len2).collect();
    }
    let mut idxs = vec![0, len2 / 2, len2 - 1];
    while idxs.len() < max {
        idxs.push(rng.gen_range(0..len2));
    }
    idxs.sort_unstable();
    idxs.dedup();
    idxs
}

type EvalFn = Box<dyn Fn(&[CTensor<f64>]) -> Result<f64>>;

/// One layer's differentiable state, probe functional and analytic
/// gradients in both precisions.
struct LayerCheck {
    name: &'static str,
    state: Vec<CTensor<f64>>,
    eval: EvalFn,
    analytic64: Vec<CTensor<f64>>,
    analytic32: Vec<CTensor<f32>>,
}

fn fd_run(mut check: LayerCheck, max_per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    assert_eq!(check.state.len(), check.analytic64.len());
    assert_eq!(check.state.len(), check.analytic32.len());
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    let mut n = 0usize;
    for ti in 0..check.state.len() {
        let len2 = 2 * check.state[ti].len();
        let scale = tensor_grad_scale(&check.analytic64[ti]);
        for idx in sample_indices(len2, max_per_tensor, rng) {
            let orig = comp_get(&check.state[ti], idx);
            comp_set(&mut check.state[ti], idx, orig + FD_STEP);
            let jp = (check.eval)(&check.state)?;
            comp_set(&mut check.state[ti], idx, orig - FD_STEP);
            let jm = (check.eval)(&check.state)?;
            comp_set(&mut check.state[ti], idx, orig);
            let fd = (jp - jm) / (2.0 * FD_STEP);
            worst64 = worst64.max(rel_err(comp_get(&check.analytic64[ti], idx), fd, scale));
            worst32 = worst32.max(rel_err(comp_get(&check.analytic32[ti], idx), fd, scale));
            n += 1;
        }
    }
    Ok(vec![
        CheckOutcome {
            name: format!("{}/f64", check.name),
            rel_err: worst64,
            threshold: F64_THRESHOLD,
            components: n,
        },
        CheckOutcome {
            name: format!("{}/f32", check.name),
            rel_err: worst32,
            threshold: F32_THRESHOLD,
            components: n,
        },
    ])
}

fn conv_check(name: &'static str, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let (k, cin, cout) = if stride == 1 { (3, 3, 4) } else { (2, 2, 3) };
    let x = random_tensor(&[2, 6, 6, cin], -1.0, 1.0, rng);
    let w = random_tensor(&[k, k, cin, cout], -0.6, 0.6, rng);
    let b = random_tensor(&[cout], -0.3, 0.3, rng);

    let p64 = ConvParams::new(w.clone(), b.clone(), stride, pad)?;
    let y = cconv2d_fwd(&x, &p64)?;
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let (dx, dw, db) = cconv2d_bwd(&x, &p64, &cot)?;

    let p32 = ConvParams::new(w.cast::<f32>(), b.cast::<f32>(), stride, pad)?;
    let x32 = x.cast::<f32>();
    let (dx32, dw32, db32) = cconv2d_bwd(&x32, &p32, &cot.cast())?;

    Ok(LayerCheck {
        name,
        state: vec![x, w, b],
        eval: Box::new(move |s| {
            let p = ConvParams::new(s[1].clone(), s[2].clone(), stride, pad)?;
            Ok(weighted_sum(&cconv2d_fwd(&s[0], &p)?, &cot))
        }),
        analytic64: vec![dx, dw, db],
        analytic32: vec![dx32, dw32, db32],
    })
}

fn bn_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let c = 2usize;
    let x = random_tensor(&[3, 4, 4, c], -1.5, 1.5, rng);
    let mut gamma = random_tensor(&[c, 2], -0.8, 0.8, rng);
    // Keep the 2x2 mixing matrices comfortably non-degenerate.
    for ch in 0..c {
        let d = gamma.data_mut();
        d[ch * 2].re += 1.0;
        d[ch * 2 + 1].im += 1.0;
    }
    let beta = random_tensor(&[c], -0.5, 0.5, rng);

    let make = |g: &CTensor<f64>, b: &CTensor<f64>| -> Result<BnParams<f64>> {
        let mut p = BnParams::new(c)?;
        p.gamma = g.clone();
        p.beta = b.clone();
        Ok(p)
    };
    let mut p64 = make(&gamma, &beta)?;
    let (y, cache) = cbn_fwd_train(&x, &mut p64)?;
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let (dx, dgamma, dbeta) = cbn_bwd(&p64, &cache, &cot)?;

    let mut p32 = BnParams::<f32>::new(c)?;
    p32.gamma = gamma.cast();
    p32.beta = beta.cast();
    let x32 = x.cast::<f32>();
    let (_, cache32) = cbn_fwd_train(&x32, &mut p32)?;
    let (dx32, dgamma32, dbeta32) = cbn_bwd(&p32, &cache32, &cot.cast())?;

    Ok(LayerCheck {
        name: "batchnorm",
        state: vec![x, gamma, beta],
        eval: Box::new(move |s| {
            let mut p = BnParams::new(c)?;
            p.gamma = s[1].clone();
            p.beta = s[2].clone();
            let (y, _) = cbn_fwd_train(&s[0], &mut p)?;
            Ok(weighted_sum(&y, &cot))
        }),
        analytic64: vec![dx, dgamma, dbeta],
        analytic32: vec![dx32, dgamma32, dbeta32],
    })
}

fn relu_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let mut x = random_tensor(&[2, 4, 4, 3], -1.0, 1.0, rng);
    nudge_away(&mut x, &[0.0], 0.02);
    let y = crelu_fwd(&x);
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let dx = crelu_bwd(&x, &cot)?;
    let dx32 = crelu_bwd(&x.cast::<f32>(), &cot.cast())?;
    Ok(LayerCheck {
        name: "relu",
        state: vec![x],
        eval: Box::new(move |s| Ok(weighted_sum(&crelu_fwd(&s[0]), &cot))),
        analytic64: vec![dx],
        analytic32: vec![dx32],
    })
}

fn pool_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let x = random_tensor(&[2, 4, 6, 3], -1.0, 1.0, rng);
    let (y, loc) = cmaxpool_fwd(&x, 2, 2)?;
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let dx = cmaxpool_bwd(&loc, &cot)?;
    let x32 = x.cast::<f32>();
    let (_, loc32) = cmaxpool_fwd(&x32, 2, 2)?;
    let dx32 = cmaxpool_bwd(&loc32, &cot.cast())?;
    Ok(LayerCheck {
        name: "maxpool",
        state: vec![x],
        eval: Box::new(move |s| Ok(weighted_sum(&cmaxpool_fwd(&s[0], 2, 2)?.0, &cot))),
        analytic64: vec![dx],
        analytic32: vec![dx32],
    })
}

fn unpool_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let base = random_tensor(&[2, 4, 4, 2], -1.0, 1.0, rng);
    let (_, loc) = cmaxpool_fwd(&base, 2, 2)?;
    let x = random_tensor(loc.pooled_shape(), -1.0, 1.0, rng);
    let y = cmaxunpool_fwd(&x, &loc)?;
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let dx = cmaxunpool_bwd(&loc, &cot)?;
    let dx32 = cmaxunpool_bwd(&loc, &cot.cast())?;
    let loc_eval = loc.clone();
    Ok(LayerCheck {
        name: "maxunpool",
        state: vec![x],
        eval: Box::new(move |s| Ok(weighted_sum(&cmaxunpool_fwd(&s[0], &loc_eval)?, &cot))),
        analytic64: vec![dx],
        analytic32: vec![dx32],
    })
}

fn cout_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let x = random_tensor(&[2, 3, 3, 4], -3.0, 3.0, rng);
    let y = cout_fwd(&x);
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let dx = cout_bwd(&y, &cot)?;
    let y32 = cout_fwd(&x.cast::<f32>());
    let dx32 = cout_bwd(&y32, &cot.cast())?;
    Ok(LayerCheck {
        name: "logistic",
        state: vec![x],
        eval: Box::new(move |s| Ok(weighted_sum(&cout_fwd(&s[0]), &cot))),
        analytic64: vec![dx],
        analytic32: vec![dx32],
    })
}

fn dropout_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let x = random_tensor(&[2, 3, 3, 2], -1.0, 1.0, rng);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let (y, mask) = dropout_fwd(&x, 0.6, &mut mask_rng)?;
    let cot = random_tensor(y.shape(), -1.5, 1.5, rng);
    let dx = dropout_bwd(&mask, &cot)?;
    let dx32 = dropout_bwd(&mask, &cot.cast())?;
    let mask_eval = mask.clone();
    Ok(LayerCheck {
        name: "dropout",
        state: vec![x],
        eval: Box::new(move |s| Ok(weighted_sum(&dropout_apply(&s[0], &mask_eval)?, &cot))),
        analytic64: vec![dx],
        analytic32: vec![dx32],
    })
}

fn loss_labels(rng: &mut ChaCha8Rng) -> Vec<LabelGrid> {
    let mut grids = Vec::new();
    for _ in 0..2 {
        let mut g = LabelGrid::unlabeled(3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                g.set(i, j, rng.gen_range(0..=2));
            }
        }
        grids.push(g);
    }
    // Guarantee at least one labeled pixel.
    grids[0].set(0, 0, 1);
    grids
}

fn loss_check(kind: LossKind, name: &'static str, rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let labels = loss_labels(rng);
    let t64: TargetCube<f64> = one_hot_encode(&labels, 2)?;
    let t32: TargetCube<f32> = one_hot_encode(&labels, 2)?;
    let mut o = random_tensor(&[2, 3, 3, 2], -2.0, 2.0, rng);
    // The absolute-error loss has kinks where a component equals its
    // target (0 or 1); stay clear of both for every loss.
    nudge_away(&mut o, &[0.0, 1.0], 0.02);
    let (_, d64) = eval_loss(kind, &o, &t64)?;
    let (_, d32) = eval_loss(kind, &o.cast::<f32>(), &t32)?;
    Ok(LayerCheck {
        name,
        state: vec![o],
        eval: Box::new(move |s| Ok(eval_loss(kind, &s[0], &t64)?.0)),
        analytic64: vec![d64],
        analytic32: vec![d32],
    })
}

/// Configuration of the end-to-end check: a tiny two-class model over
/// 2-channel 32x32 inputs.
fn tiny_net_config(width_num: u32, width_den: u32) -> NetConfig {
    NetConfig::new(2, 2).with_scale(width_num, width_den)
}

fn net_labels(rng: &mut ChaCha8Rng) -> Vec<LabelGrid> {
    let mut grids = Vec::new();
    for _ in 0..2 {
        let mut g = LabelGrid::unlabeled(32, 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                g.set(i, j, rng.gen_range(0..=2));
            }
        }
        grids.push(g);
    }
    grids[0].set(0, 0, 1);
    grids
}

/// End-to-end check: probe the average cross-entropy of a tiny model
/// against finite differences over a sample of parameter components
/// drawn from every trainable tensor. `corrupt` scales the first
/// block's analytic kernel gradient by 1.01 first — a sensitivity hook
/// proving the comparison actually bites.
pub fn whole_net_check(
    seed: u64,
    width_num: u32,
    width_den: u32,
    corrupt: bool,
) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let config = tiny_net_config(width_num, width_den);
    let m64 = NetModel::<f64>::build(config, &InitSpec::rayleigh(seed))?;
    let x = random_tensor(&[2, 32, 32, 2], -1.0, 1.0, &mut rng);
    let labels = net_labels(&mut rng);
    let t64: TargetCube<f64> = one_hot_encode(&labels, 2)?;
    let t32: TargetCube<f32> = one_hot_encode(&labels, 2)?;
    let dropout_seed = seed ^ 0xd509;

    let eval = |m: &NetModel<f64>| -> Result<f64> {
        let mut mm = m.clone();
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (o, _) = mm.forward_train(&x, &mut drng)?;
        Ok(ace_loss(&o, &t64)?.0)
    };

    // Analytic gradients, f64.
    let mut g64 = {
        let mut mm = m64.clone();
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (o, cache) = mm.forward_train(&x, &mut drng)?;
        let (_, dout) = ace_loss(&o, &t64)?;
        mm.backward(&cache, &dout)?
    };
    if corrupt {
        for v in g64.blocks[0].dw.data_mut() {
            v.re *= 1.01;
            v.im *= 1.01;
        }
    }

    // Analytic gradients, f32 twin of the same point.
    let g32 = {
        let mut m32: NetModel<f32> = m64.cast();
        let x32 = x.cast::<f32>();
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (o, cache) = m32.forward_train(&x32, &mut drng)?;
        let (_, dout) = eval_loss(LossKind::Ace, &o, &t32)?;
        m32.backward(&cache, &dout)?
    };

    // Flatten gradient components in trainable-tensor order and record
    // per-tensor spans.
    let g64_t = g64.tensors();
    let g32_t = g32.tensors();
    let mut comps64 = Vec::new();
    let mut comps32 = Vec::new();
    let mut spans = Vec::new();
    for (a, b) in g64_t.iter().zip(&g32_t) {
        let start = comps64.len();
        for v in a.data() {
            comps64.push(v.re);
            comps64.push(v.im);
        }
        for v in b.data() {
            comps32.push(f64::from(v.re));
            comps32.push(f64::from(v.im));
        }
        spans.push((start, comps64.len()));
    }
    assert_eq!(comps64.len(), m64.param_component_count());

    // Model-wide gradient scale. Some tensors are structurally zero —
    // a conv bias feeding batch norm cancels exactly in the mean
    // subtraction — so a per-tensor scale would normalize numerical dust
    // by more dust; errors only matter relative to the gradients that
    // actually drive training.
    let global_scale = comps64.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    let mut n = 0usize;
    for &(start, end) in &spans {
        for local in sample_indices(end - start, 6, &mut rng) {
            let k = start + local;
            let orig = m64.get_param_component(k);
            let mut mp = m64.clone();
            // Five-point stencil: the end-to-end functional has enough
            // curvature that plain central differences leave h^2
            // truncation right at the f64 threshold.
            let mut probe = |delta: f64| -> Result<f64> {
                mp.set_param_component(k, orig + delta);
                eval(&mp)
            };
            let jm2 = probe(-2.0 * FD_STEP)?;
            let jm1 = probe(-FD_STEP)?;
            let jp1 = probe(FD_STEP)?;
            let jp2 = probe(2.0 * FD_STEP)?;
            let fd = (jm2 - 8.0 * jm1 + 8.0 * jp1 - jp2) / (12.0 * FD_STEP);
            worst64 = worst64.max(rel_err(comps64[k], fd, global_scale));
            worst32 = worst32.max(rel_err(comps32[k], fd, global_scale));
            n += 1;
        }
    }
    Ok(vec![
        CheckOutcome {
            name: "net/f64".into(),
            rel_err: worst64,
            threshold: F64_THRESHOLD,
            components: n,
        },
        CheckOutcome {
            name: "net/f32".into(),
            rel_err: worst32,
            threshold: F32_THRESHOLD,
            components: n,
        },
    ])
}

/// Run every layer check plus the whole-network check. `corrupt`
/// deliberately damages one analytic network gradient so the suite must
/// report a failure.
pub fn run_full_gradcheck(
    seed: u64,
    width_num: u32,
    width_den: u32,
    corrupt: bool,
) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let per_tensor = 64;
    out.extend(fd_run(conv_check("conv", 1, 1, &mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(conv_check("conv-strided", 2, 0, &mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(bn_check(&mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(relu_check(&mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(pool_check(&mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(unpool_check(&mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(cout_check(&mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(dropout_check(&mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(loss_check(LossKind::Ace, "loss-ace", &mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(loss_check(LossKind::Cmse, "loss-cmse", &mut rng)?, per_tensor, &mut rng)?);
    out.extend(fd_run(loss_check(LossKind::Cmae, "loss-cmae", &mut rng)?, per_tensor, &mut rng)?);
    out.extend(whole_net_check(seed, width_num, width_den, corrupt)?);
    Ok(out)
}

//! The encoder/decoder fully convolutional network.
//!
//! Eleven complex convolutions arranged as a symmetric hourglass:
//!
//! ```text
//! enc i (x5):  conv 3x3 -> batch norm -> split relu -> maxpool 2x2/2
//! mid:         conv 1x1 -> batch norm -> split relu -> dropout
//! dec j (x4):  unpool 2x2 -> (+ skip) -> conv 3x3 -> batch norm -> split relu
//! dec 4:       unpool 2x2 -> (+ skip) -> conv 3x3 -> logistic output
//! ```
//!
//! Each decoder stage unpools with the location map recorded by its mirror
//! encoder stage, then (when skips are enabled) adds that encoder's
//! pre-pool activations element-wise, so high-resolution detail bypasses
//! the bottleneck. The final stage maps down to one complex channel per
//! class and squashes both components through the logistic; no
//! normalization or rectification sits between the last convolution and
//! the output head, which keeps cold logits able to move in any direction.
//!
//! Two ablations are built in: `enable_skips = false` severs the encoder
//! to decoder additions, and `enable_locmaps = false` makes unpooling drop
//! every value at its window's top-left corner instead of the recorded
//! argmax position (pooling's own backward still follows the argmax).
//!
//! Spatial contract: forward input must be divisible by 32 on both axes
//! (five 2x pools); [`NetModel::predict_image`] reflect-pads arbitrary
//! cubes up, runs inference, and crops back, so whole-scene prediction has
//! no size restriction beyond the reflection limit.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::init::{init_tensor, InitSpec};
use crate::layers::{
    cbn_bwd, cbn_fwd_infer, cbn_fwd_train, cconv2d_bwd, cconv2d_fwd, cmaxpool_bwd, cmaxpool_fwd,
    cmaxunpool_bwd, cmaxunpool_fwd, cout_bwd, cout_fwd, crelu_bwd, crelu_fwd, dropout_bwd,
    dropout_fwd, top_left_locmap, BnCache, BnParams, ConvParams, DropMask, LocMap,
};
use crate::scalar::Real;

/// Magic bytes opening a serialized model file.
pub const CVM_MAGIC: &[u8; 4] = b"CVM1";

const POOL_WIN: usize = 2;
const POOL_STRIDE: usize = 2;
/// Total spatial reduction of the encoder: five 2x pools.
pub const DOWNSAMPLE: usize = 32;

fn default_widths() -> [usize; 5] {
    [12, 24, 48, 96, 192]
}

fn default_scale() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

fn default_keep_prob() -> f64 {
    0.5
}

/// Architecture hyperparameters; serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Complex channels of the input cube.
    pub in_channels: usize,
    /// Classes, equal to the output channels of the last convolution.
    pub num_classes: usize,
    /// Encoder conv output widths before scaling, shallow to deep.
    #[serde(default = "default_widths")]
    pub encoder_widths: [usize; 5],
    /// Width multiplier numerator; widths become `w * num / den`.
    #[serde(default = "default_scale")]
    pub width_num: u32,
    /// Width multiplier denominator.
    #[serde(default = "default_scale")]
    pub width_den: u32,
    /// Element-wise encoder-to-decoder additions.
    #[serde(default = "default_true")]
    pub enable_skips: bool,
    /// Unpool at recorded argmax positions (false: window top-left).
    #[serde(default = "default_true")]
    pub enable_locmaps: bool,
    /// Dropout keep probability after the bottleneck block.
    #[serde(default = "default_keep_prob")]
    pub keep_prob: f64,
}

impl NetConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            encoder_widths: default_widths(),
            width_num: 1,
            width_den: 1,
            enable_skips: true,
            enable_locmaps: true,
            keep_prob: default_keep_prob(),
        }
    }

    /// Same config with widths scaled by `num/den`.
    pub fn with_scale(mut self, num: u32, den: u32) -> Self {
        self.width_num = num;
        self.width_den = den;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes {} must lie in 1..=255 (labels are single bytes)",
                self.num_classes
            )));
        }
        if self.width_num == 0 || self.width_den == 0 {
            return Err(Error::Config("width scale must be a positive rational".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob {} must lie in (0, 1]",
                self.keep_prob
            )));
        }
        self.scaled_widths()?;
        Ok(())
    }

    /// Encoder widths after applying the rational scale; every product must
    /// divide exactly so layer sizes stay integral.
    pub fn scaled_widths(&self) -> Result<[usize; 5]> {
        let mut out = [0usize; 5];
        for (i, &w) in self.encoder_widths.iter().enumerate() {
            let scaled = w
                .checked_mul(self.width_num as usize)
                .ok_or_else(|| Error::Config("width scale overflows".into()))?;
            if scaled % self.width_den as usize != 0 || scaled == 0 {
                return Err(Error::Config(format!(
                    "width {w} * {}/{} is not a positive integer",
                    self.width_num, self.width_den
                )));
            }
            out[i] = scaled / self.width_den as usize;
        }
        Ok(out)
    }

    /// Kernel size, input channels, output channels and batch-norm presence
    /// of the eleven convolutions in topology order.
    fn conv_specs(&self) -> Result<Vec<(usize, usize, usize, bool)>> {
        let w = self.scaled_widths()?;
        Ok(vec![
            (3, self.in_channels, w[0], true),
            (3, w[0], w[1], true),
            (3, w[1], w[2], true),
            (3, w[2], w[3], true),
            (3, w[3], w[4], true),
            (1, w[4], w[4], true),
            (3, w[4], w[3], true),
            (3, w[3], w[2], true),
            (3, w[2], w[1], true),
            (3, w[1], w[0], true),
            (3, w[0], self.num_classes, false),
        ])
    }
}

/// One convolution block: the conv itself plus optional batch norm.
#[derive(Debug, Clone)]
pub struct Block<R: Real> {
    pub conv: ConvParams<R>,
    pub bn: Option<BnParams<R>>,
}

/// The full model: configuration plus eleven blocks in topology order
/// (five encoder, one bottleneck, five decoder).
#[derive(Debug, Clone)]
pub struct NetModel<R: Real> {
    config: NetConfig,
    pub blocks: Vec<Block<R>>,
}

struct EncCache<R: Real> {
    conv_in: CTensor<R>,
    bn_cache: BnCache<R>,
    bn_out: CTensor<R>,
    skip: CTensor<R>,
    loc: LocMap,
}

struct MidCache<R: Real> {
    conv_in: CTensor<R>,
    bn_cache: BnCache<R>,
    bn_out: CTensor<R>,
    mask: DropMask,
}

struct DecCache<R: Real> {
    fused: CTensor<R>,
    top_left: Option<LocMap>,
    bn_cache: Option<BnCache<R>>,
    bn_out: Option<CTensor<R>>,
}

/// Everything the backward pass needs from one training forward pass.
pub struct ForwardCache<R: Real> {
    enc: Vec<EncCache<R>>,
    mid: MidCache<R>,
    dec: Vec<DecCache<R>>,
    out: CTensor<R>,
}

/// Per-block parameter gradients, in the same order as the parameters.
#[derive(Debug, Clone)]
pub struct BlockGrads<R: Real> {
    pub dw: CTensor<R>,
    pub db: CTensor<R>,
    pub dgamma: Option<CTensor<R>>,
    pub dbeta: Option<CTensor<R>>,
}

/// Gradients for all eleven blocks in topology order.
#[derive(Debug, Clone)]
pub struct Gradients<R: Real> {
    pub blocks: Vec<BlockGrads<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient tensors in the exact order of
    /// [`NetModel::trainable_tensors`].
    pub fn tensors(&self) -> Vec<&CTensor<R>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.dw);
            v.push(&b.db);
            if let Some(g) = &b.dgamma {
                v.push(g);
            }
            if let Some(g) = &b.dbeta {
                v.push(g);
            }
        }
        v
    }
}

impl<R: Real> NetModel<R> {
    /// Build a model with freshly initialized weights: kernels drawn under
    /// `init` (block by block from one seeded stream), biases zero, batch
    /// norms at their identity-like defaults.
    pub fn build(config: NetConfig, init: &InitSpec) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut blocks = Vec::with_capacity(11);
        for (k, cin, cout, has_bn) in config.conv_specs()? {
            let w = init_tensor(&[k, k, cin, cout], k * k * cin, init.scheme, &mut rng)?;
            let b = CTensor::<R>::zeros(&[cout])?;
            blocks.push(Block {
                conv: ConvParams::new(w, b, 1, (k - 1) / 2)?,
                bn: if has_bn { Some(BnParams::new(cout)?) } else { None },
            });
        }
        Ok(Self { config, blocks })
    }

    /// Build with all-zero weights; used as the loading skeleton.
    pub fn empty(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(11);
        for (k, cin, cout, has_bn) in config.conv_specs()? {
            blocks.push(Block {
                conv: ConvParams::new(
                    CTensor::zeros(&[k, k, cin, cout])?,
                    CTensor::zeros(&[cout])?,
                    1,
                    (k - 1) / 2,
                )?,
                bn: if has_bn { Some(BnParams::new(cout)?) } else { None },
            });
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Number of complex parameters in trainable tensors.
    pub fn param_count(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.len()).sum()
    }

    /// Trainable tensors in checkpoint order: per block `w, b`, then
    /// `gamma, beta` where batch norm exists. Running statistics are not
    /// trainable and are excluded.
    pub fn trainable_tensors(&self) -> Vec<&CTensor<R>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.conv.w);
            v.push(&b.conv.b);
            if let Some(bn) = &b.bn {
                v.push(&bn.gamma);
                v.push(&bn.beta);
            }
        }
        v
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut CTensor<R>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv.w);
            v.push(&mut b.conv.b);
            if let Some(bn) = &mut b.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        v
    }

    /// Total real-valued degrees of freedom (2 per complex parameter).
    pub fn param_component_count(&self) -> usize {
        2 * self.param_count()
    }

    /// Read one real component by flat index over the trainable tensors
    /// (per tensor: elements row-major, real before imaginary).
    pub fn get_param_component(&self, idx: usize) -> f64 {
        let mut rest = idx;
        for t in self.trainable_tensors() {
            let span = 2 * t.len();
            if rest < span {
                let v = t.data()[rest / 2];
                return if rest.is_multiple_of(2) { v.re.to_f64() } else { v.im.to_f64() };
            }
            rest -= span;
        }
        panic!("parameter component {idx} out of range");
    }

    /// Overwrite one real component by flat index.
    pub fn set_param_component(&mut self, idx: usize, value: f64) {
        let mut rest = idx;
        for t in self.trainable_tensors_mut() {
            let span = 2 * t.len();
            if rest < span {
                let v = &mut t.data_mut()[rest / 2];
                if rest.is_multiple_of(2) {
                    v.re = R::from_f64(value);
                } else {
                    v.im = R::from_f64(value);
                }
                return;
            }
            rest -= span;
        }
        panic!("parameter component {idx} out of range");
    }

    /// Same parameters in another precision (used to pair an f32 model
    /// with its f64 twin for gradient verification).
    pub fn cast<R2: Real>(&self) -> NetModel<R2> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                conv: ConvParams {
                    w: b.conv.w.cast(),
                    b: b.conv.b.cast(),
                    stride: b.conv.stride,
                    pad: b.conv.pad,
                },
                bn: b.bn.as_ref().map(|bn| BnParams {
                    gamma: bn.gamma.cast(),
                    beta: bn.beta.cast(),
                    running_mean: bn.running_mean.cast(),
                    running_cov: bn.running_cov.cast(),
                    momentum: bn.momentum,
                    epsilon: bn.epsilon,
                }),
            })
            .collect();
        NetModel { config: self.config.clone(), blocks }
    }

    fn validate_input(&self, x: &CTensor<R>) -> Result<()> {
        if x.rank() != 4 {
            return Err(Error::Shape(format!("network input must be rank 4, got {:?}", x.shape())));
        }
        if x.shape()[3] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.shape()[3]
            )));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "spatial extent {h}x{w} must be divisible by {DOWNSAMPLE}; pad first"
            )));
        }
        Ok(())
    }

    /// Training forward: batch statistics, dropout, full cache. `rng`
    /// feeds the dropout mask only.
    pub fn forward_train(
        &mut self,
        x: &CTensor<R>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(CTensor<R>, ForwardCache<R>)> {
        self.validate_input(x)?;
        let mut enc = Vec::with_capacity(5);
        let mut cur = x.clone();
        for i in 0..5 {
            let block = &mut self.blocks[i];
            let z = cconv2d_fwd(&cur, &block.conv)?;
            let (bn_out, bn_cache) = cbn_fwd_train(&z, block.bn.as_mut().unwrap())?;
            let s = crelu_fwd(&bn_out);
            let (pooled, loc) = cmaxpool_fwd(&s, POOL_WIN, POOL_STRIDE)?;
            enc.push(EncCache { conv_in: cur, bn_cache, bn_out, skip: s, loc });
            cur = pooled;
        }

        let mid = {
            let block = &mut self.blocks[5];
            let z = cconv2d_fwd(&cur, &block.conv)?;
            let (bn_out, bn_cache) = cbn_fwd_train(&z, block.bn.as_mut().unwrap())?;
            let s = crelu_fwd(&bn_out);
            let (dropped, mask) = dropout_fwd(&s, self.config.keep_prob, rng)?;
            let cache = MidCache { conv_in: cur, bn_cache, bn_out, mask };
            cur = dropped;
            cache
        };

        let mut dec = Vec::with_capacity(5);
        for j in 0..5 {
            let enc_idx = 4 - j;
            let (up, top_left) = if self.config.enable_locmaps {
                (cmaxunpool_fwd(&cur, &enc[enc_idx].loc)?, None)
            } else {
                let tl =
                    top_left_locmap(enc[enc_idx].loc.source_shape(), POOL_WIN, POOL_STRIDE)?;
                (cmaxunpool_fwd(&cur, &tl)?, Some(tl))
            };
            let fused = if self.config.enable_skips { up.add(&enc[enc_idx].skip)? } else { up };
            let block = &mut self.blocks[6 + j];
            let z = cconv2d_fwd(&fused, &block.conv)?;
            if j < 4 {
                let (bn_out, bn_cache) = cbn_fwd_train(&z, block.bn.as_mut().unwrap())?;
                let s = crelu_fwd(&bn_out);
                dec.push(DecCache {
                    fused,
                    top_left,
                    bn_cache: Some(bn_cache),
                    bn_out: Some(bn_out),
                });
                cur = s;
            } else {
                dec.push(DecCache { fused, top_left, bn_cache: None, bn_out: None });
                cur = z;
            }
        }

        let out = cout_fwd(&cur);
        let cache = ForwardCache { enc, mid, dec, out: out.clone() };
        Ok((out, cache))
    }

    /// Inference forward: running statistics, no dropout, no cache, no
    /// model mutation.
    pub fn forward_infer(&self, x: &CTensor<R>) -> Result<CTensor<R>> {
        self.validate_input(x)?;
        let mut skips = Vec::with_capacity(5);
        let mut locs = Vec::with_capacity(5);
        let mut cur = x.clone();
        for i in 0..5 {
            let block = &self.blocks[i];
            let z = cconv2d_fwd(&cur, &block.conv)?;
            let bn_out = cbn_fwd_infer(&z, block.bn.as_ref().unwrap())?;
            let s = crelu_fwd(&bn_out);
            let (pooled, loc) = cmaxpool_fwd(&s, POOL_WIN, POOL_STRIDE)?;
            skips.push(s);
            locs.push(loc);
            cur = pooled;
        }
        {
            let block = &self.blocks[5];
            let z = cconv2d_fwd(&cur, &block.conv)?;
            let bn_out = cbn_fwd_infer(&z, block.bn.as_ref().unwrap())?;
            cur = crelu_fwd(&bn_out);
        }
        for j in 0..5 {
            let enc_idx = 4 - j;
            let up = if self.config.enable_locmaps {
                cmaxunpool_fwd(&cur, &locs[enc_idx])?
            } else {
                let tl = top_left_locmap(locs[enc_idx].source_shape(), POOL_WIN, POOL_STRIDE)?;
                cmaxunpool_fwd(&cur, &tl)?
            };
            let fused = if self.config.enable_skips { up.add(&skips[enc_idx])? } else { up };
            let block = &self.blocks[6 + j];
            let z = cconv2d_fwd(&fused, &block.conv)?;
            cur = if j < 4 {
                crelu_fwd(&cbn_fwd_infer(&z, block.bn.as_ref().unwrap())?)
            } else {
                z
            };
        }
        Ok(cout_fwd(&cur))
    }

    /// Backward through a cached training forward. `d_out` is the loss
    /// gradient at the network output, component-packaged.
    pub fn backward(
        &self,
        cache: &ForwardCache<R>,
        d_out: &CTensor<R>,
    ) -> Result<Gradients<R>> {
        let mut grads: Vec<Option<BlockGrads<R>>> = (0..11).map(|_| None).collect();
        let mut skip_grads: Vec<Option<CTensor<R>>> = (0..5).map(|_| None).collect();

        let mut d = cout_bwd(&cache.out, d_out)?;
        for j in (0..5).rev() {
            let dcache = &cache.dec[j];
            let block = &self.blocks[6 + j];
            let (mut dgamma, mut dbeta) = (None, None);
            if j < 4 {
                let d_bn_out = crelu_bwd(dcache.bn_out.as_ref().unwrap(), &d)?;
                let (dz, dg, dbt) = cbn_bwd(
                    block.bn.as_ref().unwrap(),
                    dcache.bn_cache.as_ref().unwrap(),
                    &d_bn_out,
                )?;
                dgamma = Some(dg);
                dbeta = Some(dbt);
                d = dz;
            }
            let (d_fused, dw, db) = cconv2d_bwd(&dcache.fused, &block.conv, &d)?;
            grads[6 + j] = Some(BlockGrads { dw, db, dgamma, dbeta });
            let enc_idx = 4 - j;
            let loc = dcache.top_left.as_ref().unwrap_or(&cache.enc[enc_idx].loc);
            d = cmaxunpool_bwd(loc, &d_fused)?;
            if self.config.enable_skips {
                skip_grads[enc_idx] = Some(d_fused);
            }
        }

        {
            let mid = &cache.mid;
            let block = &self.blocks[5];
            let d_relu = dropout_bwd(&mid.mask, &d)?;
            let d_bn_out = crelu_bwd(&mid.bn_out, &d_relu)?;
            let (dz, dg, dbt) =
                cbn_bwd(block.bn.as_ref().unwrap(), &mid.bn_cache, &d_bn_out)?;
            let (d_in, dw, db) = cconv2d_bwd(&mid.conv_in, &block.conv, &dz)?;
            grads[5] =
                Some(BlockGrads { dw, db, dgamma: Some(dg), dbeta: Some(dbt) });
            d = d_in;
        }

        for i in (0..5).rev() {
            let ecache = &cache.enc[i];
            let block = &self.blocks[i];
            let mut d_s = cmaxpool_bwd(&ecache.loc, &d)?;
            if let Some(sg) = &skip_grads[i] {
                d_s.add_assign(sg)?;
            }
            let d_bn_out = crelu_bwd(&ecache.bn_out, &d_s)?;
            let (dz, dg, dbt) =
                cbn_bwd(block.bn.as_ref().unwrap(), &ecache.bn_cache, &d_bn_out)?;
            let (d_in, dw, db) = cconv2d_bwd(&ecache.conv_in, &block.conv, &dz)?;
            grads[i] = Some(BlockGrads { dw, db, dgamma: Some(dg), dbeta: Some(dbt) });
            d = d_in;
        }

        Ok(Gradients { blocks: grads.into_iter().map(|g| g.unwrap()).collect() })
    }

    /// Classify a whole `[H, W, C]` cube: reflect-pad the spatial extent up
    /// to a multiple of 32 (split as evenly as the parity allows), run
    /// inference, crop back, and take the per-pixel argmax.
    pub fn predict_image(&self, cube: &CTensor<R>) -> Result<LabelGrid> {
        if cube.rank() != 3 {
            return Err(Error::Shape(format!(
                "predict expects a rank-3 cube, got {:?}",
                cube.shape()
            )));
        }
        let (h, w, c) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "cube has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        let dh = (DOWNSAMPLE - h % DOWNSAMPLE) % DOWNSAMPLE;
        let dw = (DOWNSAMPLE - w % DOWNSAMPLE) % DOWNSAMPLE;
        let (top, left) = (dh / 2, dw / 2);
        let padded = cube.reflect_pad_asym(top, dh - top, left, dw - left)?;
        let (ph, pw) = (padded.shape()[0], padded.shape()[1]);
        let batched = CTensor::from_vec(&[1, ph, pw, c], padded.data().to_vec())?;
        let o = self.forward_infer(&batched)?;
        let cropped = o.crop_spatial(top, left, h, w)?;
        let grids = predict_labels(&cropped)?;
        Ok(grids.into_iter().next().unwrap())
    }

    /// Serialize config and parameters to one file: magic, JSON config
    /// blob, then every block's tensors as consecutive CVT records
    /// (`w, b[, gamma, beta, running_mean, running_cov]` per block).
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CVM_MAGIC)?;
        let cfg = serde_json::to_string(&self.config)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(cfg.as_bytes())?;
        for b in &self.blocks {
            b.conv.w.write_cvt(&mut f)?;
            b.conv.b.write_cvt(&mut f)?;
            if let Some(bn) = &b.bn {
                bn.gamma.write_cvt(&mut f)?;
                bn.beta.write_cvt(&mut f)?;
                bn.running_mean.write_cvt(&mut f)?;
                bn.running_cov.write_cvt(&mut f)?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Load a model saved by [`NetModel::save`], validating magic, config
    /// and every tensor shape.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<NetModel<R>> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("model file truncated at magic: {e}")))?;
        if &magic != CVM_MAGIC {
            return Err(Error::Format(format!(
                "bad model magic {magic:?}, expected {CVM_MAGIC:?}"
            )));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)
            .map_err(|e| Error::Format(format!("model file truncated at header: {e}")))?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(Error::Format(format!("config blob of {len} bytes refused")));
        }
        let mut cfg = vec![0u8; len];
        f.read_exact(&mut cfg)
            .map_err(|e| Error::Format(format!("model file truncated in config: {e}")))?;
        let config: NetConfig = serde_json::from_slice(&cfg)
            .map_err(|e| Error::Format(format!("config blob is not valid: {e}")))?;
        let mut model = Self::empty(config)?;
        for b in &mut model.blocks {
            let mut slots: Vec<&mut CTensor<R>> = vec![&mut b.conv.w, &mut b.conv.b];
            if let Some(bn) = &mut b.bn {
                slots.push(&mut bn.gamma);
                slots.push(&mut bn.beta);
                slots.push(&mut bn.running_mean);
                slots.push(&mut bn.running_cov);
            }
            for slot in slots {
                let t = CTensor::<R>::read_cvt(&mut f)?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "tensor shape {:?} does not match architecture slot {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        let mut tail = [0u8; 1];
        if f.read(&mut tail)? != 0 {
            return Err(Error::Format("trailing bytes after model tensors".into()));
        }
        Ok(model)
    }
}

/// Per-pixel classification of a rank-4 output: class = argmax over
/// channels of `re + im`, ties resolved toward the lowest class index.
/// Returns one grid per batch element with 1-based class ids.
pub fn predict_labels<R: Real>(o: &CTensor<R>) -> Result<Vec<LabelGrid>> {
    if o.rank() != 4 {
        return Err(Error::Shape(format!("prediction expects rank-4 output, got {:?}", o.shape())));
    }
    let (bs, h, w, k) = (o.shape()[0], o.shape()[1], o.shape()[2], o.shape()[3]);
    if k > 255 {
        return Err(Error::Label(format!("{k} classes exceed single-byte labels")));
    }
    let mut grids = Vec::with_capacity(bs);
    let od = o.data();
    for b in 0..bs {
        let mut g = LabelGrid::unlabeled(h, w)?;
        for i in 0..h {
            for j in 0..w {
                let base = ((b * h + i) * w + j) * k;
                let mut best = 0usize;
                let mut best_score = R::neg_infinity();
                for c in 0..k {
                    let v = od[base + c];
                    let score = v.re + v.im;
                    if score > best_score {
                        best_score = score;
                        best = c;
                    }
                }
                g.set(i, j, (best + 1) as u8);
            }
        }
        grids.push(g);
    }
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;
    use rand::Rng;

    fn tiny_config() -> NetConfig {
        NetConfig::new(2, 3).with_scale(1, 12)
    }

    fn random_input(shape: &[usize], seed: u64) -> CTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = CTensor::<f32>::zeros(shape).unwrap();
        for v in t.data_mut() {
            v.re = rng.gen::<f32>() * 2.0 - 1.0;
            v.im = rng.gen::<f32>() * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn widths_scale_exactly_or_fail() {
        let cfg = tiny_config();
        assert_eq!(cfg.scaled_widths().unwrap(), [1, 2, 4, 8, 16]);
        let bad = NetConfig::new(2, 3).with_scale(1, 5);
        assert!(matches!(bad.scaled_widths(), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(42)).unwrap();
        let b = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(42)).unwrap();
        let c_ = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(43)).unwrap();
        for (x, y) in a.trainable_tensors().into_iter().zip(b.trainable_tensors()) {
            assert_eq!(x, y);
        }
        let differs = a
            .trainable_tensors()
            .into_iter()
            .zip(c_.trainable_tensors())
            .any(|(x, y)| x != y);
        assert!(differs, "different seeds produced identical weights");
    }

    #[test]
    fn encoder_decoder_channel_symmetry() {
        let cfg = tiny_config();
        let specs = cfg.conv_specs().unwrap();
        // Decoder conv j consumes what its mirror encoder conv produced.
        for j in 0..5 {
            assert_eq!(specs[6 + j].1, specs[4 - j].2);
        }
        assert_eq!(specs.len(), 11);
        assert_eq!(specs[10].2, cfg.num_classes);
        assert!(!specs[10].3, "final conv must not carry batch norm");
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let mut m = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for size in [32usize, 64, 96] {
            let x = random_input(&[2, size, size, 2], size as u64);
            let (o, _) = m.forward_train(&x, &mut rng).unwrap();
            assert_eq!(o.shape(), &[2, size, size, 3]);
            let oi = m.forward_infer(&x).unwrap();
            assert_eq!(oi.shape(), &[2, size, size, 3]);
        }
    }

    #[test]
    fn forward_rejects_non_divisible_input() {
        let mut m = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(1)).unwrap();
        let x = random_input(&[1, 40, 40, 2], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.forward_train(&x, &mut rng), Err(Error::Shape(_))));
        let x = random_input(&[1, 32, 32, 5], 0);
        assert!(matches!(m.forward_infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn ablated_variants_run_and_differ() {
        let x = random_input(&[1, 32, 32, 2], 5);
        let base = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(7)).unwrap();
        let mut no_skip_cfg = tiny_config();
        no_skip_cfg.enable_skips = false;
        let mut no_loc_cfg = tiny_config();
        no_loc_cfg.enable_locmaps = false;
        let no_skip = NetModel::<f32>::build(no_skip_cfg, &InitSpec::rayleigh(7)).unwrap();
        let no_loc = NetModel::<f32>::build(no_loc_cfg, &InitSpec::rayleigh(7)).unwrap();
        let o = base.forward_infer(&x).unwrap();
        let o_ns = no_skip.forward_infer(&x).unwrap();
        let o_nl = no_loc.forward_infer(&x).unwrap();
        assert_eq!(o.shape(), o_ns.shape());
        assert_eq!(o.shape(), o_nl.shape());
        assert_ne!(o, o_ns);
        assert_ne!(o, o_nl);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut m = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(3)).unwrap();
        // Push some training noise into the running stats first.
        let x = random_input(&[2, 32, 32, 2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let _ = m.forward_train(&x, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvm");
        m.save(&path).unwrap();
        let back = NetModel::<f32>::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.trainable_tensors().into_iter().zip(back.trainable_tensors()) {
            assert_eq!(a, b);
        }
        let o1 = m.forward_infer(&x).unwrap();
        let o2 = back.forward_infer(&x).unwrap();
        assert_eq!(o1, o2);

        // Saving twice produces identical bytes.
        let path2 = dir.path().join("model2.cvm");
        m.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let m = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvm");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let bad_path = dir.path().join("bad.cvm");
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(NetModel::<f32>::load(&bad_path), Err(Error::Format(_))));

        let cut_path = dir.path().join("cut.cvm");
        std::fs::write(&cut_path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(NetModel::<f32>::load(&cut_path), Err(Error::Format(_))));

        let mut long = bytes.clone();
        long.push(0);
        let long_path = dir.path().join("long.cvm");
        std::fs::write(&long_path, &long).unwrap();
        assert!(matches!(NetModel::<f32>::load(&long_path), Err(Error::Format(_))));
    }

    #[test]
    fn predict_labels_takes_argmax_with_lowest_class_ties() {
        let o: CTensor<f32> = CTensor::from_vec(
            &[1, 1, 2, 3],
            vec![
                // Pixel 0: class 2 wins on re+im.
                c(0.1, 0.1),
                c(0.9, 0.8),
                c(0.2, 0.0),
                // Pixel 1: classes 1 and 3 tie; lowest wins.
                c(0.5, 0.5),
                c(0.1, 0.2),
                c(0.6, 0.4),
            ],
        )
        .unwrap();
        let grids = predict_labels(&o).unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].get(0, 0), 2);
        assert_eq!(grids[0].get(0, 1), 1);
    }

    #[test]
    fn predict_image_handles_non_multiple_sizes() {
        let m = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(11)).unwrap();
        let cube = random_input(&[50, 70, 2], 8);
        // Rebuild as rank 3.
        let cube = CTensor::from_vec(&[50, 70, 2], cube.data().to_vec()).unwrap();
        let g = m.predict_image(&cube).unwrap();
        assert_eq!((g.height(), g.width()), (50, 70));
        assert!(g.data().iter().all(|&v| (1..=3).contains(&v)));
    }

    #[test]
    fn param_component_accessors_roundtrip() {
        let mut m = NetModel::<f64>::build(tiny_config(), &InitSpec::rayleigh(5)).unwrap();
        let n = m.param_component_count();
        assert_eq!(n, 2 * m.param_count());
        let probe = [0usize, 1, n / 2, n - 1];
        for &i in &probe {
            let old = m.get_param_component(i);
            m.set_param_component(i, old + 0.5);
            assert_eq!(m.get_param_component(i), old + 0.5);
            m.set_param_component(i, old);
            assert_eq!(m.get_param_component(i), old);
        }
    }

    #[test]
    fn cast_preserves_values() {
        let m = NetModel::<f32>::build(tiny_config(), &InitSpec::rayleigh(6)).unwrap();
        let m64: NetModel<f64> = m.cast();
        let back: NetModel<f32> = m64.cast();
        for (a, b) in m.trainable_tensors().into_iter().zip(back.trainable_tensors()) {
            assert_eq!(a, b);
        }
    }
}

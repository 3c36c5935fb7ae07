//! Small fully convolutional per-pixel softmax segmentation model with
//! analytic forward/backward passes and an Adam optimizer with a stepped
//! learning-rate decay schedule.
//!
//! Fixed architecture: conv3x3(1->16) -> ReLU -> conv3x3(16->16) -> ReLU ->
//! conv3x3(16->16) -> ReLU -> conv1x1(16->K). All convolutions are
//! zero-padded to "same" size with stride 1. ReLU uses subgradient 0 at
//! exactly 0. Convolutions run as im2col plus a cache-friendly
//! multiply-accumulate, which is what keeps whole training sweeps at
//! desk scale.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sgt1;
use crate::tensor::{LogitMap, Tensor};

pub const HIDDEN_CHANNELS: usize = 16;

/// One convolution layer: kernel `[out, in, kh, kw]` plus bias `[out]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerDims {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
}

impl LayerDims {
    fn fan_in(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

fn architecture(k_classes: usize) -> [LayerDims; 4] {
    let h = HIDDEN_CHANNELS;
    [
        LayerDims { out_ch: h, in_ch: 1, kh: 3, kw: 3 },
        LayerDims { out_ch: h, in_ch: h, kh: 3, kw: 3 },
        LayerDims { out_ch: h, in_ch: h, kh: 3, kw: 3 },
        LayerDims { out_ch: k_classes, in_ch: h, kh: 1, kw: 1 },
    ]
}

/// All parameters of the fixed architecture for a given class count.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layers: Vec<ConvLayer>,
    pub k_classes: usize,
}

/// Per-layer parameter gradients, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<ConvLayer>,
}

impl ModelParams {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Flat count of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn dims(&self) -> [LayerDims; 4] {
        architecture(self.k_classes)
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Result<Self> {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                Ok(ConvLayer {
                    weight: Tensor::zeros(l.weight.shape().to_vec())?,
                    bias: Tensor::zeros(l.bias.shape().to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamGrads { layers })
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::InvalidArgument {
                what: "gradient accumulation",
                reason: "layer count mismatch".into(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, 1.0)?;
            a.bias.add_scaled(&b.bias, 1.0)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for l in &mut self.layers {
            for v in l.weight.data_mut() {
                *v *= c;
            }
            for v in l.bias.data_mut() {
                *v *= c;
            }
        }
    }
}

/// He-style initialization: zero-mean normal with variance `2 / fan_in`,
/// zero biases. Deterministic per seed.
pub fn init_params(k_classes: usize, rng: &mut Rng) -> Result<ModelParams> {
    if k_classes < 2 {
        return Err(Error::InvalidArgument {
            what: "k_classes",
            reason: format!("need at least 2 classes, got {k_classes}"),
        });
    }
    let mut layers = Vec::with_capacity(4);
    for dims in architecture(k_classes) {
        let std = (2.0 / dims.fan_in() as f64).sqrt();
        let n = dims.out_ch * dims.in_ch * dims.kh * dims.kw;
        let weight = Tensor::new(
            vec![dims.out_ch, dims.in_ch, dims.kh, dims.kw],
            (0..n).map(|_| std * rng.next_normal()).collect(),
        )?;
        let bias = Tensor::zeros(vec![dims.out_ch])?;
        layers.push(ConvLayer { weight, bias });
    }
    Ok(ModelParams { layers, k_classes })
}

/// Intermediate activations retained for the backward pass: the input to
/// every layer, per image. ReLU masks are recovered from the activations
/// themselves (`a > 0`).
#[derive(Debug)]
pub struct ActivationCache {
    /// `per_image[i][l]` is the input to layer `l` as `[in_ch, H*W]`.
    per_image: Vec<Vec<Vec<f64>>>,
    height: usize,
    width: usize,
    k_classes: usize,
}

fn check_image_shape(images: &Tensor) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [B, 1, H, W] input images".into(),
        });
    }
    if s[2] < 3 || s[3] < 3 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "spatial extents must be at least 3".into(),
        });
    }
    Ok((s[0], s[2], s[3]))
}

/// Forward pass over a batch. Returns logits `[B, K, H, W]` and the cache
/// needed by [`backward`]. Pure; images in a batch are processed in
/// parallel and assembled in index order.
pub fn forward(params: &ModelParams, images: &Tensor) -> Result<(LogitMap, ActivationCache)> {
    let (batch, height, width) = check_image_shape(images)?;
    if !images.is_finite() {
        return Err(Error::NonFinite {
            context: "forward input images".into(),
        });
    }
    let hw = height * width;
    let dims = params.dims();
    for (l, d) in dims.iter().enumerate() {
        let want = vec![d.out_ch, d.in_ch, d.kh, d.kw];
        if params.layers[l].weight.shape() != want.as_slice() {
            return Err(Error::InvalidShape {
                shape: params.layers[l].weight.shape().to_vec(),
                reason: format!("layer {l} weight does not match architecture {want:?}"),
            });
        }
    }

    let results: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let image = images.data()[b * hw..(b + 1) * hw].to_vec();
            forward_one(params, &dims, image, height, width)
        })
        .collect();

    let k = params.k_classes;
    let mut logits = vec![0.0; batch * k * hw];
    let mut per_image = Vec::with_capacity(batch);
    for (b, (img_logits, inputs)) in results.into_iter().enumerate() {
        logits[b * k * hw..(b + 1) * k * hw].copy_from_slice(&img_logits);
        per_image.push(inputs);
    }
    let logits = Tensor::new(vec![batch, k, height, width], logits)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            context: "forward logits".into(),
        });
    }
    Ok((
        logits,
        ActivationCache {
            per_image,
            height,
            width,
            k_classes: k,
        },
    ))
}

/// Forward for one image. Returns the logits `[K, HW]` flattened and the
/// inputs seen by each layer.
fn forward_one(
    params: &ModelParams,
    dims: &[LayerDims; 4],
    image: Vec<f64>,
    height: usize,
    width: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let hw = height * width;
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut act = image;
    for (l, d) in dims.iter().enumerate() {
        let mut out = conv_forward(
            params.layers[l].weight.data(),
            params.layers[l].bias.data(),
            &act,
            *d,
            height,
            width,
        );
        inputs.push(std::mem::take(&mut act));
        if l < 3 {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        act = out;
    }
    debug_assert_eq!(act.len(), params.k_classes * hw);
    (act, inputs)
}

/// Backward pass: propagates `grad_logits` `[B, K, H, W]` to gradients for
/// every parameter. Per-image contributions are summed in index order, so
/// results do not depend on scheduling.
pub fn backward(
    params: &ModelParams,
    cache: &ActivationCache,
    grad_logits: &Tensor,
) -> Result<ParamGrads> {
    let batch = cache.per_image.len();
    let hw = cache.height * cache.width;
    let expected = vec![batch, cache.k_classes, cache.height, cache.width];
    if grad_logits.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            left: grad_logits.shape().to_vec(),
            right: expected,
        });
    }
    if params.k_classes != cache.k_classes {
        return Err(Error::InvalidArgument {
            what: "backward cache",
            reason: "cache was built for a different class count".into(),
        });
    }
    let dims = params.dims();

    let per_image: Vec<ParamGrads> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let g = &grad_logits.data()[b * cache.k_classes * hw..(b + 1) * cache.k_classes * hw];
            backward_one(params, &dims, &cache.per_image[b], g, cache.height, cache.width)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = ParamGrads::zeros_like(params)?;
    for g in &per_image {
        total.add_assign(g)?;
    }
    Ok(total)
}

fn backward_one(
    params: &ModelParams,
    dims: &[LayerDims; 4],
    inputs: &[Vec<f64>],
    grad_logits: &[f64],
    height: usize,
    width: usize,
) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros_like(params)?;
    let mut dz = grad_logits.to_vec();
    for l in (0..4).rev() {
        let d = dims[l];
        let input = &inputs[l];
        let (dw, db, dx) = conv_backward(
            params.layers[l].weight.data(),
            input,
            &dz,
            d,
            height,
            width,
            l > 0,
        );
        grads.layers[l].weight.data_mut().copy_from_slice(&dw);
        grads.layers[l].bias.data_mut().copy_from_slice(&db);
        if l > 0 {
            let mut dx = dx.expect("dx requested for non-input layer");
            // The input to layer l is ReLU output; its zeros mark
            // non-positive preactivations (subgradient 0 at 0).
            for (g, &a) in dx.iter_mut().zip(input.iter()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            dz = dx;
        }
    }
    Ok(grads)
}

// ---- convolution kernels ----------------------------------------------

/// im2col for zero-padded same-size convolution: input `[C, HW]` becomes
/// `[C*kh*kw, HW]` with out-of-bounds taps left at zero.
fn im2col(input: &[f64], in_ch: usize, kh: usize, kw: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let pad_h = (kh - 1) / 2;
    let pad_w = (kw - 1) / 2;
    let mut col = vec![0.0; in_ch * kh * kw * hw];
    for c in 0..in_ch {
        let src = &input[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let dy = ky as isize - pad_h as isize;
                let dx = kx as isize - pad_w as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    // valid destination x range: 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut col[row + y * w + x0..row + y * w + x1];
                    let src_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    dst.copy_from_slice(src_row);
                }
            }
        }
    }
    col
}

/// Scatter-add transpose of [`im2col`].
fn col2im(col: &[f64], in_ch: usize, kh: usize, kw: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let pad_h = (kh - 1) / 2;
    let pad_w = (kw - 1) / 2;
    let mut out = vec![0.0; in_ch * hw];
    for c in 0..in_ch {
        let dst_base = c * hw;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let dy = ky as isize - pad_h as isize;
                let dx = kx as isize - pad_w as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let src = &col[row + y * w + x0..row + y * w + x1];
                    let dst =
                        &mut out[dst_base + sy * w + sx0..dst_base + sy * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

const LANES: usize = 4;

/// `acc[p] += a * x[p]`, unrolled in fixed 4-lane blocks.
#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    let n = acc.len();
    debug_assert_eq!(n, x.len());
    let main = n - n % LANES;
    let (acc_main, acc_tail) = acc.split_at_mut(main);
    let (x_main, x_tail) = x.split_at(main);
    for (ac, xc) in acc_main
        .chunks_exact_mut(LANES)
        .zip(x_main.chunks_exact(LANES))
    {
        for i in 0..LANES {
            ac[i] += a * xc[i];
        }
    }
    for (o, &v) in acc_tail.iter_mut().zip(x_tail) {
        *o += a * v;
    }
}

/// Dot product with four independent accumulators (fixed summation order,
/// breaks the serial FP dependency chain).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let main = n - n % LANES;
    let (a_main, a_tail) = a.split_at(main);
    let (b_main, b_tail) = b.split_at(main);
    let mut s = [0.0f64; LANES];
    for (ac, bc) in a_main.chunks_exact(LANES).zip(b_main.chunks_exact(LANES)) {
        for i in 0..LANES {
            s[i] += ac[i] * bc[i];
        }
    }
    let mut acc = (s[0] + s[1]) + (s[2] + s[3]);
    for (&x, &y) in a_tail.iter().zip(b_tail) {
        acc += x * y;
    }
    acc
}

/// out[c, p] = bias[c] + sum_k weight[c, k] * col[k, p]
fn conv_forward(
    weight: &[f64],
    bias: &[f64],
    input: &[f64],
    d: LayerDims,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let k_len = d.fan_in();
    let col_storage;
    let col: &[f64] = if d.kh == 1 && d.kw == 1 {
        input
    } else {
        col_storage = im2col(input, d.in_ch, d.kh, d.kw, h, w);
        &col_storage
    };
    let mut out = vec![0.0; d.out_ch * hw];
    for c in 0..d.out_ch {
        out[c * hw..(c + 1) * hw].fill(bias[c]);
    }
    // pixel tiles keep the active col columns resident in cache while all
    // output channels consume them
    for t0 in (0..hw).step_by(PIXEL_TILE) {
        let t1 = (t0 + PIXEL_TILE).min(hw);
        for c in 0..d.out_ch {
            let orow = &mut out[c * hw + t0..c * hw + t1];
            for k in 0..k_len {
                axpy(orow, weight[c * k_len + k], &col[k * hw + t0..k * hw + t1]);
            }
        }
    }
    out
}

/// Pixel-tile width for the blocked conv kernels; 512 f64 columns of a
/// 144-row col matrix stay within L2.
const PIXEL_TILE: usize = 512;

/// Gradients of a conv layer given `dz` on its output: weight grad,
/// bias grad, and (optionally) the gradient on its input.
fn conv_backward(
    weight: &[f64],
    input: &[f64],
    dz: &[f64],
    d: LayerDims,
    h: usize,
    w: usize,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let hw = h * w;
    let k_len = d.fan_in();
    let is_1x1 = d.kh == 1 && d.kw == 1;
    let col_storage;
    let col: &[f64] = if is_1x1 {
        input
    } else {
        col_storage = im2col(input, d.in_ch, d.kh, d.kw, h, w);
        &col_storage
    };

    let mut dw = vec![0.0; d.out_ch * k_len];
    let mut db = vec![0.0; d.out_ch];
    for c in 0..d.out_ch {
        db[c] = dz[c * hw..(c + 1) * hw].iter().sum();
    }
    for t0 in (0..hw).step_by(PIXEL_TILE) {
        let t1 = (t0 + PIXEL_TILE).min(hw);
        for c in 0..d.out_ch {
            let dzr = &dz[c * hw + t0..c * hw + t1];
            for k in 0..k_len {
                dw[c * k_len + k] += dot(dzr, &col[k * hw + t0..k * hw + t1]);
            }
        }
    }

    let dx = if need_dx {
        // dcol[k, p] = sum_c weight[c, k] * dz[c, p]
        let mut dcol = vec![0.0; k_len * hw];
        for t0 in (0..hw).step_by(PIXEL_TILE) {
            let t1 = (t0 + PIXEL_TILE).min(hw);
            for c in 0..d.out_ch {
                let dzr = &dz[c * hw + t0..c * hw + t1];
                for k in 0..k_len {
                    axpy(
                        &mut dcol[k * hw + t0..k * hw + t1],
                        weight[c * k_len + k],
                        dzr,
                    );
                }
            }
        }
        Some(if is_1x1 {
            dcol
        } else {
            col2im(&dcol, d.in_ch, d.kh, d.kw, h, w)
        })
    } else {
        None
    };
    (dw, db, dx)
}

// ---- Adam ---------------------------------------------------------------

/// Adam optimizer state with a stepped learning-rate schedule:
/// `lr(epoch) = base_lr * decay_factor^floor(epoch / decay_interval)`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<ConvLayer>,
    v: Vec<ConvLayer>,
    pub step: u64,
    pub epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
}

/// Scalar hyperparameters of [`AdamState`], as persisted in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamScalars {
    pub step: u64,
    pub epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
}

impl AdamState {
    pub fn new(
        params: &ModelParams,
        base_lr: f64,
        decay_factor: f64,
        decay_interval: usize,
    ) -> Result<Self> {
        if decay_interval == 0 {
            return Err(Error::InvalidArgument {
                what: "decay_interval",
                reason: "must be at least 1 epoch".into(),
            });
        }
        Ok(AdamState {
            m: ParamGrads::zeros_like(params)?.layers,
            v: ParamGrads::zeros_like(params)?.layers,
            step: 0,
            epoch: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            decay_factor,
            decay_interval,
        })
    }

    /// Inform the schedule which epoch the next steps belong to.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Effective learning rate for the current epoch.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr
            * self
                .decay_factor
                .powi((self.epoch / self.decay_interval) as i32)
    }

    pub fn scalars(&self) -> AdamScalars {
        AdamScalars {
            step: self.step,
            epoch: self.epoch,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            base_lr: self.base_lr,
            decay_factor: self.decay_factor,
            decay_interval: self.decay_interval,
        }
    }
}

/// One bias-corrected Adam update in place. Errors (naming the layer) if a
/// parameter would become non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::InvalidArgument {
            what: "adam_step",
            reason: "gradient layer count mismatch".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.effective_lr();
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], name: String| {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument {
                what: "adam_step",
                reason: format!("{name} gradient shape mismatch"),
            });
        }
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            if !p[i].is_finite() {
                return Err(Error::NonFiniteUpdate { layer: name });
            }
        }
        Ok(())
    };

    for (l, (layer, grad)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        update(
            layer.weight.data_mut(),
            grad.weight.data(),
            state.m[l].weight.data_mut(),
            state.v[l].weight.data_mut(),
            format!("layer{l}.weight"),
        )?;
        update(
            layer.bias.data_mut(),
            grad.bias.data(),
            state.m[l].bias.data_mut(),
            state.v[l].bias.data_mut(),
            format!("layer{l}.bias"),
        )?;
    }
    Ok(())
}

// ---- checkpoints ----------------------------------------------------------

/// Manifest stored next to the per-parameter SGT1 files of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub k_classes: usize,
    pub layers: Vec<LayerEntry>,
    pub adam: AdamScalars,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub weight_file: String,
    pub weight_shape: Vec<usize>,
    pub bias_file: String,
    pub bias_shape: Vec<usize>,
}

impl CheckpointManifest {
    /// Parse and structurally validate manifest JSON.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::json("checkpoint manifest", e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            return Err(Error::Config("manifest k_classes must be >= 2".into()));
        }
        let dims = architecture(self.k_classes);
        if self.layers.len() != dims.len() {
            return Err(Error::Config(format!(
                "manifest lists {} layers, architecture has {}",
                self.layers.len(),
                dims.len()
            )));
        }
        for (l, (entry, d)) in self.layers.iter().zip(dims.iter()).enumerate() {
            let want = vec![d.out_ch, d.in_ch, d.kh, d.kw];
            if entry.weight_shape != want {
                return Err(Error::Config(format!(
                    "layer {l} weight shape {:?} does not match architecture {want:?}",
                    entry.weight_shape
                )));
            }
            if entry.bias_shape != vec![d.out_ch] {
                return Err(Error::Config(format!(
                    "layer {l} bias shape {:?} does not match architecture [{}]",
                    entry.bias_shape, d.out_ch
                )));
            }
            for f in [&entry.weight_file, &entry.bias_file] {
                if f.is_empty() || f.contains('/') || f.contains('\\') || f.contains("..") {
                    return Err(Error::Config(format!(
                        "layer {l} file name {f:?} must be a bare file name"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Write the checkpoint: one SGT1 file per parameter tensor plus
/// `manifest.json`.
pub fn save_checkpoint(
    params: &ModelParams,
    adam: &AdamScalars,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let weight_file = format!("layer{l}_weight.sgt1");
        let bias_file = format!("layer{l}_bias.sgt1");
        sgt1::save_tensor(&layer.weight, dir.join(&weight_file))?;
        sgt1::save_tensor(&layer.bias, dir.join(&bias_file))?;
        layers.push(LayerEntry {
            name: format!("layer{l}"),
            weight_file,
            weight_shape: layer.weight.shape().to_vec(),
            bias_file,
            bias_shape: layer.bias.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        k_classes: params.k_classes,
        layers,
        adam: adam.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("checkpoint manifest", e))?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, AdamScalars)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest = CheckpointManifest::from_json_bytes(&bytes)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let weight = sgt1::load_tensor(dir.join(&entry.weight_file))?;
        let bias = sgt1::load_tensor(dir.join(&entry.bias_file))?;
        if weight.shape() != entry.weight_shape.as_slice()
            || bias.shape() != entry.bias_shape.as_slice()
        {
            return Err(Error::Config(format!(
                "tensor shapes on disk do not match manifest for {}",
                entry.name
            )));
        }
        layers.push(ConvLayer { weight, bias });
    }
    Ok((
        ModelParams {
            layers,
            k_classes: manifest.k_classes,
        },
        manifest.adam,
    ))
}

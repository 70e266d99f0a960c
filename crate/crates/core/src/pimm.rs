//! Three-class importance model: a small all-convolutional residual network
//! that maps a macroblock feature stack to per-macroblock class scores.
//!
//! ```text
//! input (C) -> batchnorm -> [dropout -> residual block] x 3 -> 1x1 conv (3)
//! block 1:   relu(conv3x3(relu(conv3x3(x))) + conv1x1(x))     C -> 8
//! block 2,3: relu(conv3x3(relu(conv3x3(x))) + x)              8 -> 8
//! ```
//!
//! Everything runs in f64 on a single `rows × cols` grid (batch size one).
//! Activations are stored row-major with channels fastest.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::gridmap::{classes_to_importance, ClassGrid, ImportanceClass, MacroblockGrid};

pub const FILTERS: usize = 8;
pub const CLASSES: usize = 3;
pub const WEIGHTS_VERSION: u32 = 1;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const WEIGHTS_MAGIC: &[u8; 4] = b"PIMW";

/// Trainable parameter count for `c` input channels.
pub const fn parameter_count(c: usize) -> usize {
    82 * c + 2963
}

/// A same-padded `k × k` convolution. Weights are laid out `[out][ky][kx][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    fn zeros(in_c: usize, out_c: usize, k: usize) -> Self {
        Self { in_c, out_c, k, weight: vec![0.0; out_c * k * k * in_c], bias: vec![0.0; out_c] }
    }

    fn glorot(in_c: usize, out_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / ((in_c + out_c) * k * k) as f64).sqrt();
        let mut conv = Self::zeros(in_c, out_c, k);
        conv.weight.iter_mut().for_each(|w| *w = rng.gen_range(-limit..limit));
        conv
    }

    fn forward(&self, input: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let (ci, co, k) = (self.in_c, self.out_c, self.k);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; rows * cols * co];
        for y in 0..rows {
            for x in 0..cols {
                let acc = &mut out[(y * cols + x) * co..][..co];
                acc.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let yy = y as isize + ky as isize - pad;
                    if yy < 0 || yy >= rows as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x as isize + kx as isize - pad;
                        if xx < 0 || xx >= cols as isize {
                            continue;
                        }
                        let inp = &input[(yy as usize * cols + xx as usize) * ci..][..ci];
                        for (o, a) in acc.iter_mut().enumerate() {
                            let w = &self.weight[((o * k + ky) * k + kx) * ci..][..ci];
                            *a += w.iter().zip(inp).map(|(w, v)| w * v).sum::<f64>();
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and, when requested, input
    /// gradients into `din`.
    fn backward(
        &self,
        input: &[f64],
        dout: &[f64],
        rows: usize,
        cols: usize,
        grad: &mut Conv,
        mut din: Option<&mut [f64]>,
    ) {
        let (ci, co, k) = (self.in_c, self.out_c, self.k);
        let pad = (k / 2) as isize;
        for y in 0..rows {
            for x in 0..cols {
                let g = &dout[(y * cols + x) * co..][..co];
                for (b, &gv) in grad.bias.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..k {
                    let yy = y as isize + ky as isize - pad;
                    if yy < 0 || yy >= rows as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x as isize + kx as isize - pad;
                        if xx < 0 || xx >= cols as isize {
                            continue;
                        }
                        let at = (yy as usize * cols + xx as usize) * ci;
                        let inp = &input[at..at + ci];
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let off = ((o * k + ky) * k + kx) * ci;
                            for (gw, &v) in grad.weight[off..off + ci].iter_mut().zip(inp) {
                                *gw += gv * v;
                            }
                            if let Some(d) = din.as_deref_mut() {
                                for (dv, &w) in d[at..at + ci].iter_mut().zip(&self.weight[off..off + ci]) {
                                    *dv += gv * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn flipped(&self, horizontal: bool, vertical: bool) -> Conv {
        let (ci, k) = (self.in_c, self.k);
        let mut out = self.clone();
        for o in 0..self.out_c {
            for ky in 0..k {
                for kx in 0..k {
                    let sy = if vertical { k - 1 - ky } else { ky };
                    let sx = if horizontal { k - 1 - kx } else { kx };
                    let dst = ((o * k + ky) * k + kx) * ci;
                    let src = ((o * k + sy) * k + sx) * ci;
                    out.weight[dst..dst + ci].copy_from_slice(&self.weight[src..src + ci]);
                }
            }
        }
        out
    }
}

/// All trainable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub block1_conv1: Conv,
    pub block1_conv2: Conv,
    pub block1_skip: Conv,
    pub block2_conv1: Conv,
    pub block2_conv2: Conv,
    pub block3_conv1: Conv,
    pub block3_conv2: Conv,
    pub head: Conv,
}

/// Tensor names in serialization order.
const PARAM_NAMES: [&str; 18] = [
    "bn.scale",
    "bn.shift",
    "block1.conv1.weight",
    "block1.conv1.bias",
    "block1.conv2.weight",
    "block1.conv2.bias",
    "block1.skip.weight",
    "block1.skip.bias",
    "block2.conv1.weight",
    "block2.conv1.bias",
    "block2.conv2.weight",
    "block2.conv2.bias",
    "block3.conv1.weight",
    "block3.conv1.bias",
    "block3.conv2.weight",
    "block3.conv2.bias",
    "head.weight",
    "head.bias",
];

impl Params {
    fn zeros(c: usize) -> Self {
        Self {
            bn_scale: vec![0.0; c],
            bn_shift: vec![0.0; c],
            block1_conv1: Conv::zeros(c, FILTERS, 3),
            block1_conv2: Conv::zeros(FILTERS, FILTERS, 3),
            block1_skip: Conv::zeros(c, FILTERS, 1),
            block2_conv1: Conv::zeros(FILTERS, FILTERS, 3),
            block2_conv2: Conv::zeros(FILTERS, FILTERS, 3),
            block3_conv1: Conv::zeros(FILTERS, FILTERS, 3),
            block3_conv2: Conv::zeros(FILTERS, FILTERS, 3),
            head: Conv::zeros(FILTERS, CLASSES, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.bn_scale.len())
    }

    fn convs(&self) -> [&Conv; 8] {
        [
            &self.block1_conv1,
            &self.block1_conv2,
            &self.block1_skip,
            &self.block2_conv1,
            &self.block2_conv2,
            &self.block3_conv1,
            &self.block3_conv2,
            &self.head,
        ]
    }

    /// Named tensors in serialization order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<&[f64]> = vec![&self.bn_scale, &self.bn_shift];
        for conv in self.convs() {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        PARAM_NAMES.into_iter().zip(out).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.bn_scale, &mut self.bn_shift];
        for conv in [
            &mut self.block1_conv1,
            &mut self.block1_conv2,
            &mut self.block1_skip,
            &mut self.block2_conv1,
            &mut self.block2_conv2,
            &mut self.block3_conv1,
            &mut self.block3_conv2,
            &mut self.head,
        ] {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, t) in self.tensors() {
            for v in t {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub version: u32,
    pub in_channels: usize,
    pub dropout: f64,
    pub params: Params,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ModelWeights {
    /// Glorot-uniform convolutions, zero biases, identity batch-norm affine.
    pub fn init(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels < 1 {
            return Err(Error::InvalidConfig("model needs at least one input channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = in_channels;
        let params = Params {
            bn_scale: vec![1.0; c],
            bn_shift: vec![0.0; c],
            block1_conv1: Conv::glorot(c, FILTERS, 3, &mut rng),
            block1_conv2: Conv::glorot(FILTERS, FILTERS, 3, &mut rng),
            block1_skip: Conv::glorot(c, FILTERS, 1, &mut rng),
            block2_conv1: Conv::glorot(FILTERS, FILTERS, 3, &mut rng),
            block2_conv2: Conv::glorot(FILTERS, FILTERS, 3, &mut rng),
            block3_conv1: Conv::glorot(FILTERS, FILTERS, 3, &mut rng),
            block3_conv2: Conv::glorot(FILTERS, FILTERS, 3, &mut rng),
            head: Conv::glorot(FILTERS, CLASSES, 1, &mut rng),
        };
        Ok(Self {
            version: WEIGHTS_VERSION,
            in_channels: c,
            dropout: 0.2,
            params,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count()
    }

    /// The same network with every spatial kernel mirrored. Running the result
    /// on a flipped input yields the flipped output of the original network.
    pub fn flipped_kernels(&self, horizontal: bool, vertical: bool) -> Self {
        let mut out = self.clone();
        let p = &mut out.params;
        for conv in [
            &mut p.block1_conv1,
            &mut p.block1_conv2,
            &mut p.block1_skip,
            &mut p.block2_conv1,
            &mut p.block2_conv2,
            &mut p.block3_conv1,
            &mut p.block3_conv2,
            &mut p.head,
        ] {
            *conv = conv.flipped(horizontal, vertical);
        }
        out
    }

    fn check_input(&self, x: &FeatureStack) -> Result<()> {
        if x.channel_count() != self.in_channels {
            return Err(Error::ChannelMismatch { expected: self.in_channels, found: x.channel_count() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and active dropout driven by `seed`.
    Train { seed: u64 },
    Infer,
}

#[derive(Debug, Clone)]
struct BlockCache {
    mask: Vec<f64>,
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    sum: Vec<f64>,
}

/// Activations kept by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    digest: u64,
    xhat: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    blocks: Vec<BlockCache>,
    head_in: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols × 3` unnormalised class scores.
    pub logits: Vec<f64>,
    pub cache: Option<ForwardCache>,
}

impl ForwardCache {
    /// Sign of every ReLU input in evaluation order. Two passes with equal
    /// patterns lie on the same linear piece of the network, which is what a
    /// finite-difference check needs.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.z1.iter().chain(&b.sum).map(|&v| v > 0.0))
            .collect()
    }
}

impl ForwardPass {
    pub fn cell_logits(&self, cell: usize) -> &[f64] {
        &self.logits[cell * CLASSES..(cell + 1) * CLASSES]
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Per-channel (mean, biased variance) over all cells.
fn channel_moments(data: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for cell in data.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(cell) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for cell in data.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(cell).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

pub fn forward(w: &ModelWeights, x: &FeatureStack, mode: Mode) -> Result<ForwardPass> {
    w.check_input(x)?;
    let (rows, cols, c) = (x.rows, x.cols, w.in_channels);
    let p = &w.params;
    let (mean, var) = match mode {
        Mode::Train { .. } => channel_moments(&x.data, c),
        Mode::Infer => (w.running_mean.clone(), w.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.data.len());
    let mut h = Vec::with_capacity(x.data.len());
    for cell in x.data.chunks_exact(c) {
        for k in 0..c {
            let n = (cell[k] - mean[k]) * inv_std[k];
            xhat.push(n);
            h.push(p.bn_scale[k] * n + p.bn_shift[k]);
        }
    }

    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Infer => None,
    };
    let keep = 1.0 - w.dropout;
    let blocks = [
        (&p.block1_conv1, &p.block1_conv2, Some(&p.block1_skip)),
        (&p.block2_conv1, &p.block2_conv2, None),
        (&p.block3_conv1, &p.block3_conv2, None),
    ];
    let mut caches = Vec::with_capacity(3);
    for (conv1, conv2, skip) in blocks {
        let mask: Vec<f64> = match rng.as_mut() {
            Some(r) if w.dropout > 0.0 => {
                (0..h.len()).map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
            }
            _ => Vec::new(),
        };
        let input: Vec<f64> =
            if mask.is_empty() { h } else { h.iter().zip(&mask).map(|(a, m)| a * m).collect() };
        let z1 = conv1.forward(&input, rows, cols);
        let a1 = relu(&z1);
        let mut sum = conv2.forward(&a1, rows, cols);
        match skip {
            Some(s) => sum.iter_mut().zip(s.forward(&input, rows, cols)).for_each(|(a, b)| *a += b),
            None => sum.iter_mut().zip(&input).for_each(|(a, b)| *a += b),
        }
        h = relu(&sum);
        if rng.is_some() {
            caches.push(BlockCache { mask, input, z1, a1, sum });
        }
    }
    let logits = p.head.forward(&h, rows, cols);
    let cache = match mode {
        Mode::Train { .. } => Some(ForwardCache {
            digest: p.digest(),
            xhat,
            batch_mean: mean,
            batch_var: var,
            blocks: caches,
            head_in: h,
        }),
        Mode::Infer => None,
    };
    Ok(ForwardPass { rows, cols, logits, cache })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

fn check_targets(logits: &[f64], targets: &ClassGrid) -> Result<()> {
    if logits.len() != targets.len() * CLASSES {
        return Err(Error::DimensionMismatch(format!(
            "{} logits for {} target cells",
            logits.len(),
            targets.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Class-weighted cross-entropy, normalised by the summed weight of the
/// targets so that scaling all weights leaves the loss unchanged. Zero when
/// every target has zero weight.
pub fn loss_wce(logits: &[f64], targets: &ClassGrid, class_weights: &[f64; CLASSES]) -> Result<f64> {
    check_targets(logits, targets)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (cell, t) in logits.chunks_exact(CLASSES).zip(targets.cells()) {
        let wt = class_weights[t.index()];
        num -= wt * log_softmax(cell)[t.index()];
        den += wt;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

fn dlogits(logits: &[f64], targets: &ClassGrid, class_weights: &[f64; CLASSES]) -> Vec<f64> {
    let den: f64 = targets.cells().iter().map(|t| class_weights[t.index()]).sum();
    let mut out = vec![0.0; logits.len()];
    if den == 0.0 {
        return out;
    }
    for ((cell, t), d) in logits.chunks_exact(CLASSES).zip(targets.cells()).zip(out.chunks_exact_mut(CLASSES)) {
        let scale = class_weights[t.index()] / den;
        for (k, (dv, pk)) in d.iter_mut().zip(softmax(cell)).enumerate() {
            let y = if k == t.index() { 1.0 } else { 0.0 };
            *dv = scale * (pk - y);
        }
    }
    out
}

/// Exact gradients of [`loss_wce`] with respect to every trainable tensor.
pub fn backward(
    w: &ModelWeights,
    pass: &ForwardPass,
    targets: &ClassGrid,
    class_weights: &[f64; CLASSES],
) -> Result<Params> {
    let cache = pass
        .cache
        .as_ref()
        .ok_or_else(|| Error::StaleCache("backward needs a training-mode forward pass".into()))?;
    if cache.digest != w.params.digest() || cache.xhat.len() != pass.rows * pass.cols * w.in_channels {
        return Err(Error::StaleCache("weights changed since the forward pass".into()));
    }
    if (targets.rows(), targets.cols()) != (pass.rows, pass.cols) {
        return Err(Error::DimensionMismatch("targets do not match the forward pass grid".into()));
    }
    check_targets(&pass.logits, targets)?;
    let (rows, cols) = (pass.rows, pass.cols);
    let p = &w.params;
    let mut g = p.zeros_like();

    let dz = dlogits(&pass.logits, targets, class_weights);
    let mut dh = vec![0.0; cache.head_in.len()];
    p.head.backward(&cache.head_in, &dz, rows, cols, &mut g.head, Some(&mut dh));

    for (b, bc) in cache.blocks.iter().enumerate().rev() {
        // relu(sum)
        let dsum: Vec<f64> = dh.iter().zip(&bc.sum).map(|(&d, &s)| if s > 0.0 { d } else { 0.0 }).collect();
        let (conv1, conv2, g1, g2) = match b {
            0 => (&p.block1_conv1, &p.block1_conv2, &mut g.block1_conv1, &mut g.block1_conv2),
            1 => (&p.block2_conv1, &p.block2_conv2, &mut g.block2_conv1, &mut g.block2_conv2),
            _ => (&p.block3_conv1, &p.block3_conv2, &mut g.block3_conv1, &mut g.block3_conv2),
        };
        let mut da1 = vec![0.0; bc.a1.len()];
        conv2.backward(&bc.a1, &dsum, rows, cols, g2, Some(&mut da1));
        let dz1: Vec<f64> = da1.iter().zip(&bc.z1).map(|(&d, &z)| if z > 0.0 { d } else { 0.0 }).collect();
        let mut dinput = vec![0.0; bc.input.len()];
        conv1.backward(&bc.input, &dz1, rows, cols, g1, Some(&mut dinput));
        if b == 0 {
            p.block1_skip.backward(&bc.input, &dsum, rows, cols, &mut g.block1_skip, Some(&mut dinput));
        } else {
            dinput.iter_mut().zip(&dsum).for_each(|(a, b)| *a += b);
        }
        dh = if bc.mask.is_empty() {
            dinput
        } else {
            dinput.iter().zip(&bc.mask).map(|(d, m)| d * m).collect()
        };
    }

    // The network input is data, so only the affine terms need gradients.
    let c = w.in_channels;
    for (dcell, xcell) in dh.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for k in 0..c {
            g.bn_scale[k] += dcell[k] * xcell[k];
            g.bn_shift[k] += dcell[k];
        }
    }
    Ok(g)
}

/// Folds a training pass's batch statistics into the running estimates.
pub fn update_running_stats(w: &mut ModelWeights, cache: &ForwardCache) {
    for (r, &b) in w.running_mean.iter_mut().zip(&cache.batch_mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
    for (r, &b) in w.running_var.iter_mut().zip(&cache.batch_var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut Params, state: &mut AdamState, grads: &Params, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.count() != grads.count() || params.count() != state.m.count() {
        return Err(Error::DimensionMismatch("Adam shapes do not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.tensors();
    for (((w, (_, g)), m), v) in
        params.tensors_mut().into_iter().zip(grads).zip(state.m.tensors_mut()).zip(state.v.tensors_mut())
    {
        for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// `None` derives inverse-frequency weights from the training targets.
    pub class_weights: Option<[f64; CLASSES]>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            iterations_per_epoch: 499,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            class_weights: None,
            dropout: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_epoch == 0 {
            return Err(Error::InvalidConfig("iterations per epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if let Some(cw) = self.class_weights {
            if cw.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::InvalidConfig("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Inverse class frequency over the targets, renormalised to mean one over
/// the classes that occur. Absent classes get weight zero.
pub fn inverse_frequency_weights(targets: &[&ClassGrid]) -> [f64; CLASSES] {
    let mut counts = [0usize; CLASSES];
    for t in targets {
        for c in t.cells() {
            counts[c.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let mut w = [0.0; CLASSES];
    for (wk, &n) in w.iter_mut().zip(&counts) {
        if n > 0 {
            *wk = total as f64 / n as f64;
        }
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    let mean = w.iter().sum::<f64>() / present.max(1) as f64;
    if mean > 0.0 {
        w.iter_mut().for_each(|v| *v /= mean);
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub iteration: usize,
    /// Mean training loss over the epoch's iterations.
    pub loss: f64,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch={} iteration={} loss={:.6}", self.epoch, self.iteration, self.loss)
    }
}

fn flip_classes(t: &ClassGrid, horizontal: bool, vertical: bool) -> ClassGrid {
    let t = if horizontal { t.flipped_horizontal() } else { t.clone() };
    if vertical {
        t.flipped_vertical()
    } else {
        t
    }
}

/// Trains from scratch. Each iteration draws one item uniformly, flips it
/// horizontally and/or vertically with probability one half each, and takes
/// one Adam step. Fully deterministic given `cfg.seed`.
pub fn train(dataset: &[(FeatureStack, ClassGrid)], cfg: &TrainConfig) -> Result<(ModelWeights, Vec<LogRecord>)> {
    train_with(dataset, cfg, |_| {})
}

/// [`train`] with a callback receiving each epoch's log record as it finishes.
pub fn train_with(
    dataset: &[(FeatureStack, ClassGrid)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRecord),
) -> Result<(ModelWeights, Vec<LogRecord>)> {
    cfg.validate()?;
    let (first, _) = dataset.first().ok_or_else(|| Error::Empty("training dataset".into()))?;
    let c = first.channel_count();
    for (x, t) in dataset {
        if x.channel_count() != c {
            return Err(Error::ChannelMismatch { expected: c, found: x.channel_count() });
        }
        if (x.rows, x.cols) != (t.rows(), t.cols()) {
            return Err(Error::DimensionMismatch("feature stack and target grid differ".into()));
        }
    }
    let class_weights = cfg
        .class_weights
        .unwrap_or_else(|| inverse_frequency_weights(&dataset.iter().map(|(_, t)| t).collect::<Vec<_>>()));

    let mut w = ModelWeights::init(c, cfg.seed)?;
    w.dropout = cfg.dropout;
    let mut adam = AdamState::new(&w.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e_d00d_f00d);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.iterations_per_epoch {
            let (x, t) = &dataset[rng.gen_range(0..dataset.len())];
            let (fh, fv) = (rng.gen::<bool>(), rng.gen::<bool>());
            let x = x.flipped(fh, fv);
            let t = flip_classes(t, fh, fv);
            let pass = forward(&w, &x, Mode::Train { seed: rng.gen() })?;
            total += loss_wce(&pass.logits, &t, &class_weights)?;
            let grads = backward(&w, &pass, &t, &class_weights)?;
            if let Some(cache) = &pass.cache {
                update_running_stats(&mut w, cache);
            }
            adam_step(&mut w.params, &mut adam, &grads, cfg.learning_rate, &cfg.adam)?;
        }
        let record = LogRecord {
            epoch,
            iteration: (epoch + 1) * cfg.iterations_per_epoch,
            loss: total / cfg.iterations_per_epoch as f64,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok((w, log))
}

/// Most likely class per cell; ties go to the lower class.
pub fn predict_classes(w: &ModelWeights, x: &FeatureStack) -> Result<ClassGrid> {
    let pass = forward(w, x, Mode::Infer)?;
    let cells = pass
        .logits
        .chunks_exact(CLASSES)
        .map(|z| {
            let mut best = 0;
            for k in 1..CLASSES {
                if z[k] > z[best] {
                    best = k;
                }
            }
            ImportanceClass::from_index(best).expect("class index")
        })
        .collect();
    MacroblockGrid::new(pass.rows, pass.cols, cells)
}

pub fn predict_map(w: &ModelWeights, x: &FeatureStack) -> Result<MacroblockGrid<u8>> {
    Ok(classes_to_importance(&predict_classes(w, x)?))
}

/// Fraction of cells whose predicted class equals the target.
pub fn accuracy(w: &ModelWeights, dataset: &[(FeatureStack, ClassGrid)]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (x, t) in dataset {
        let pred = predict_classes(w, x)?;
        hit += pred.cells().iter().zip(t.cells()).filter(|(a, b)| a == b).count();
        n += t.len();
    }
    Ok(hit as f64 / n.max(1) as f64)
}

fn expected_shapes(c: usize) -> Vec<(&'static str, Vec<u32>)> {
    let conv = |o: usize, k: usize, i: usize| vec![o as u32, k as u32, k as u32, i as u32];
    let f = FILTERS;
    let mut shapes = vec![("bn.scale", vec![c as u32]), ("bn.shift", vec![c as u32])];
    let convs = [(f, 3, c), (f, 3, f), (f, 1, c), (f, 3, f), (f, 3, f), (f, 3, f), (f, 3, f), (CLASSES, 1, f)];
    for (idx, (o, k, i)) in convs.into_iter().enumerate() {
        shapes.push((PARAM_NAMES[2 + 2 * idx], conv(o, k, i)));
        shapes.push((PARAM_NAMES[3 + 2 * idx], vec![o as u32]));
    }
    shapes.push(("bn.running_mean", vec![c as u32]));
    shapes.push(("bn.running_var", vec![c as u32]));
    shapes
}

/// Writes the `PIMW` container: magic, version, input channels, dropout,
/// array count, then per array its name, shape and little-endian f32 data.
pub fn save_weights<W: Write>(w: &ModelWeights, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&w.version.to_le_bytes());
    buf.extend_from_slice(&(w.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(w.dropout as f32).to_le_bytes());
    let shapes = expected_shapes(w.in_channels);
    buf.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    let mut data: Vec<&[f64]> = w.params.tensors().into_iter().map(|(_, t)| t).collect();
    data.push(&w.running_mean);
    data.push(&w.running_var);
    for ((name, shape), values) in shapes.iter().zip(data) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated("weights file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a `PIMW` container. With `expected_channels`, a file declaring a
/// different input width is rejected.
pub fn load_weights<R: Read>(mut input: R, expected_channels: Option<usize>) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: "PIMW".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported weights version {version}")));
    }
    let c = cur.u32()? as usize;
    if c == 0 {
        return Err(Error::ZeroDimension);
    }
    if let Some(e) = expected_channels {
        if e != c {
            return Err(Error::ChannelMismatch { expected: e, found: c });
        }
    }
    let dropout = f64::from(cur.f32()?);
    let shapes = expected_shapes(c);
    let count = cur.u32()? as usize;
    if count != shapes.len() {
        return Err(Error::MalformedHeader(format!("expected {} arrays, found {count}", shapes.len())));
    }
    let mut arrays = Vec::with_capacity(count);
    for (name, shape) in &shapes {
        let len = cur.u32()? as usize;
        let found = String::from_utf8_lossy(cur.take(len)?).into_owned();
        if found != *name {
            return Err(Error::MalformedHeader(format!("expected array {name}, found {found}")));
        }
        let ndims = cur.u32()? as usize;
        let dims = (0..ndims).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        if dims != *shape {
            return Err(Error::DimensionMismatch(format!("{name} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let values = (0..n).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        arrays.push(values);
    }
    if cur.at != bytes.len() {
        return Err(Error::PayloadSize("trailing bytes after weights".into()));
    }
    let running_var = arrays.pop().expect("running var");
    let running_mean = arrays.pop().expect("running mean");
    let mut params = Params::zeros(c);
    for (dst, src) in params.tensors_mut().into_iter().zip(arrays) {
        *dst = src;
    }
    Ok(ModelWeights { version, in_channels: c, dropout, params, running_mean, running_var })
}

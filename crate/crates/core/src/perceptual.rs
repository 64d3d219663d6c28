//! Frozen convolutional feature extractor (VGG19 layout) and the losses and
//! anomaly map computed in its feature space.
//!
//! Tap indices count convolutional layers in forward order, 1-based, and
//! refer to the post-ReLU output of that convolution. With the VGG19 layout
//! tap 12 is the last conv of the fourth block and has 512 channels.

use std::env;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::cae::read_f32_tensors;
use crate::error::{Error, Result};
use crate::imaging::{FloatMap, Raster};
use crate::nn::conv::{conv_backward_input, conv_forward};
use crate::nn::{he_uniform, ConvGeometry};
use crate::tensor::Tensor;

pub const VGG19_LOSS_TAPS: [usize; 4] = [5, 8, 13, 15];
pub const VGG19_ANOMALY_TAP: usize = 12;
pub const VGG19_WEIGHTS_FILE: &str = "vgg19.safetensors";
pub const CACHE_ENV: &str = "PCB_SENTINEL_CACHE";
/// Seed used for the backbone when no pretrained weights are cached.
pub const FALLBACK_SEED: u64 = 19;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Output channels per conv, `0` marks a 2x2 max pool.
const VGG19_PLAN: [usize; 21] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
];

#[derive(Debug, Clone)]
pub enum StackOp {
    /// Stride-1 convolution with "same" padding; weight layout `[out_c, in_c, k, k]`.
    Conv {
        weight: Vec<f32>,
        bias: Vec<f32>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        relu: bool,
    },
    /// 2x2 max pool with stride 2 (odd trailing rows/columns dropped).
    MaxPool,
}

/// A plain feed-forward stack of convolutions and pools.
#[derive(Debug, Clone)]
pub struct ConvStack {
    in_channels: usize,
    ops: Vec<StackOp>,
    conv_ops: Vec<usize>,
}

enum StepCache {
    Conv {
        g: ConvGeometry,
        active: Option<Vec<bool>>,
    },
    Pool {
        in_shape: [usize; 4],
        argmax: Vec<usize>,
    },
}

impl ConvStack {
    pub fn new(in_channels: usize, ops: Vec<StackOp>) -> Result<Self> {
        let mut c = in_channels;
        let mut conv_ops = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            if let StackOp::Conv {
                weight,
                bias,
                in_c,
                out_c,
                kernel,
                ..
            } = op
            {
                if *in_c != c || kernel % 2 == 0 {
                    return Err(Error::Argument(format!(
                        "conv op {i}: expects {c} input channels and an odd kernel"
                    )));
                }
                if weight.len() != out_c * in_c * kernel * kernel || bias.len() != *out_c {
                    return Err(Error::Argument(format!(
                        "conv op {i}: weight or bias length mismatch"
                    )));
                }
                c = *out_c;
                conv_ops.push(i);
            }
        }
        Ok(ConvStack {
            in_channels,
            ops,
            conv_ops,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Number of convolutional layers.
    pub fn depth(&self) -> usize {
        self.conv_ops.len()
    }

    pub fn ops(&self) -> &[StackOp] {
        &self.ops
    }

    /// Output channels of conv `layer` (1-based).
    pub fn channels_at(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        match &self.ops[self.conv_ops[layer - 1]] {
            StackOp::Conv { out_c, .. } => Ok(*out_c),
            StackOp::MaxPool => unreachable!(),
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.depth() {
            return Err(Error::LayerIndex {
                index: layer,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    /// SHA-256 over every weight and bias in order, little-endian.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for op in &self.ops {
            if let StackOp::Conv { weight, bias, .. } = op {
                weight
                    .iter()
                    .chain(bias)
                    .for_each(|v| h.update(v.to_le_bytes()));
            }
        }
        hex::encode(h.finalize())
    }

    /// Runs up to the deepest requested tap, returning tap outputs in `taps` order.
    fn run(
        &self,
        x: &Tensor,
        taps: &[usize],
        trace: bool,
    ) -> Result<(Vec<Tensor>, Vec<StepCache>)> {
        for &t in taps {
            self.check_layer(t)?;
        }
        let last = *taps
            .iter()
            .max()
            .ok_or_else(|| Error::Argument("no taps requested".into()))?;
        let stop = self.conv_ops[last - 1];
        let mut outputs: Vec<Option<Tensor>> = vec![None; taps.len()];
        let mut caches = Vec::new();
        let mut cur = x.clone();
        let mut conv_idx = 0;
        for op in &self.ops[..=stop] {
            match op {
                StackOp::Conv {
                    weight,
                    bias,
                    in_c,
                    out_c,
                    kernel,
                    relu,
                } => {
                    let g = ConvGeometry::same(*in_c, *out_c, *kernel, 1, cur.h(), cur.w());
                    cur = conv_forward(&cur, weight, Some(bias), &g)?;
                    let mut active = None;
                    if *relu {
                        if trace {
                            active = Some(cur.data().iter().map(|&v| v > 0.0).collect());
                        }
                        cur.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    conv_idx += 1;
                    for (slot, &t) in outputs.iter_mut().zip(taps) {
                        if t == conv_idx {
                            *slot = Some(cur.clone());
                        }
                    }
                    if trace {
                        caches.push(StepCache::Conv { g, active });
                    }
                }
                StackOp::MaxPool => {
                    let (pooled, argmax) = max_pool(&cur)?;
                    if trace {
                        caches.push(StepCache::Pool {
                            in_shape: cur.shape(),
                            argmax,
                        });
                    }
                    cur = pooled;
                }
            }
        }
        Ok((outputs.into_iter().map(Option::unwrap).collect(), caches))
    }

    /// Activations at each tap.
    pub fn forward(&self, x: &Tensor, taps: &[usize]) -> Result<Vec<Tensor>> {
        if x.c() != self.in_channels {
            return Err(Error::mismatch(
                format!("{} input channels", self.in_channels),
                x.c(),
            ));
        }
        Ok(self.run(x, taps, false)?.0)
    }

    /// Activations at each tap plus a closure-free backward: given `d loss / d tap`
    /// for every tap, returns `d loss / d x`.
    fn forward_backward(
        &self,
        x: &Tensor,
        taps: &[usize],
        grad_fn: impl FnOnce(&[Tensor]) -> Result<Vec<Tensor>>,
    ) -> Result<Tensor> {
        let (outs, caches) = self.run(x, taps, true)?;
        let tap_grads = grad_fn(&outs)?;
        let mut g: Option<Tensor> = None;
        let mut conv_idx = caches
            .iter()
            .filter(|c| matches!(c, StepCache::Conv { .. }))
            .count();
        let mut conv_ops = self.conv_ops[..conv_idx].iter().rev();
        for cache in caches.iter().rev() {
            match cache {
                StepCache::Conv { g: geom, active } => {
                    for (t, tg) in taps.iter().zip(&tap_grads) {
                        if *t == conv_idx {
                            g = Some(match g {
                                None => tg.clone(),
                                Some(mut acc) => {
                                    acc.data_mut()
                                        .iter_mut()
                                        .zip(tg.data())
                                        .for_each(|(a, b)| *a += b);
                                    acc
                                }
                            });
                        }
                    }
                    let mut dy = g.take().expect("deepest executed conv is a tap");
                    if let Some(active) = active {
                        dy.data_mut().iter_mut().zip(active).for_each(|(d, &on)| {
                            if !on {
                                *d = 0.0
                            }
                        });
                    }
                    let weight = match &self.ops[*conv_ops.next().unwrap()] {
                        StackOp::Conv { weight, .. } => weight,
                        StackOp::MaxPool => unreachable!(),
                    };
                    g = Some(conv_backward_input(&dy, weight, geom)?);
                    conv_idx -= 1;
                }
                StepCache::Pool { in_shape, argmax } => {
                    let dy = g.take().expect("pool precedes a conv");
                    let mut dx = Tensor::zeros(*in_shape);
                    for (&src, &d) in argmax.iter().zip(dy.data()) {
                        dx.data_mut()[src] += d;
                    }
                    g = Some(dx);
                }
            }
        }
        Ok(g.expect("stack has at least one conv"))
    }
}

fn max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} activation is too small to pool"
        )));
    }
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[k] = src[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Where the backbone weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSource {
    Pretrained(PathBuf),
    /// Deterministic He-uniform initialization; used when no weights are cached.
    Seeded(u64),
    Custom,
}

impl fmt::Display for BackboneSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneSource::Pretrained(p) => write!(f, "pretrained:{}", p.display()),
            BackboneSource::Seeded(s) => write!(f, "seeded:{s}"),
            BackboneSource::Custom => f.write_str("custom"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_mse: f32,
    pub lambda_feat: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mse: 0.01,
            lambda_feat: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_mse: f32, lambda_feat: f32) -> Result<Self> {
        if !(lambda_mse >= 0.0 && lambda_feat >= 0.0) || lambda_mse + lambda_feat == 0.0 {
            return Err(Error::Argument(format!(
                "loss weights must be non-negative and not both zero, got ({lambda_mse}, {lambda_feat})"
            )));
        }
        Ok(LossWeights {
            lambda_mse,
            lambda_feat,
        })
    }
}

/// Frozen backbone with per-channel input normalization applied internally.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stack: ConvStack,
    mean: Vec<f32>,
    std: Vec<f32>,
    loss_taps: Vec<usize>,
    anomaly_tap: usize,
    source: BackboneSource,
    hash: String,
}

impl FeatureExtractor {
    /// Wraps an arbitrary stack; `mean`/`std` have one entry per input channel.
    pub fn from_stack(
        stack: ConvStack,
        mean: Vec<f32>,
        std: Vec<f32>,
        loss_taps: Vec<usize>,
        anomaly_tap: usize,
    ) -> Result<Self> {
        if mean.len() != stack.in_channels()
            || std.len() != stack.in_channels()
            || std.iter().any(|&s| s <= 0.0)
        {
            return Err(Error::Argument(
                "mean/std must match input channels, std > 0".into(),
            ));
        }
        if loss_taps.is_empty() {
            return Err(Error::Argument("at least one loss tap is required".into()));
        }
        for &t in loss_taps.iter().chain([&anomaly_tap]) {
            stack.check_layer(t)?;
        }
        let hash = stack.weights_hash();
        Ok(FeatureExtractor {
            stack,
            mean,
            std,
            loss_taps,
            anomaly_tap,
            source: BackboneSource::Custom,
            hash,
        })
    }

    /// VGG19 from `$PCB_SENTINEL_CACHE/vgg19.safetensors` when present,
    /// otherwise the seeded fallback.
    pub fn vgg19() -> Result<Self> {
        if let Some(dir) = env::var_os(CACHE_ENV) {
            let path = Path::new(&dir).join(VGG19_WEIGHTS_FILE);
            if path.exists() {
                return Self::vgg19_from_file(path);
            }
            log::warn!(
                "{} not found, using seeded backbone weights",
                path.display()
            );
        }
        Self::vgg19_seeded(FALLBACK_SEED)
    }

    /// Loads torchvision-named weights (`features.{i}.weight`, `features.{i}.bias`).
    pub fn vgg19_from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut tensors = read_f32_tensors(&raw)?;
        let mut take = |name: String, len: usize| {
            let v = tensors
                .remove(&name)
                .ok_or_else(|| Error::Serialization(format!("{} lacks {name}", path.display())))?;
            if v.len() != len {
                return Err(Error::Serialization(format!(
                    "{name}: {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let ops = vgg19_ops(|idx, in_c, out_c| {
            Ok((
                take(format!("features.{idx}.weight"), out_c * in_c * 9)?,
                take(format!("features.{idx}.bias"), out_c)?,
            ))
        })?;
        let mut fe = Self::vgg19_with(ops)?;
        fe.source = BackboneSource::Pretrained(path.to_path_buf());
        Ok(fe)
    }

    pub fn vgg19_seeded(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = vgg19_ops(|_, in_c, out_c| {
            Ok((
                he_uniform(&mut rng, out_c * in_c * 9, in_c * 9),
                vec![0.0; out_c],
            ))
        })?;
        let mut fe = Self::vgg19_with(ops)?;
        fe.source = BackboneSource::Seeded(seed);
        Ok(fe)
    }

    fn vgg19_with(ops: Vec<StackOp>) -> Result<Self> {
        Self::from_stack(
            ConvStack::new(3, ops)?,
            IMAGENET_MEAN.to_vec(),
            IMAGENET_STD.to_vec(),
            VGG19_LOSS_TAPS.to_vec(),
            VGG19_ANOMALY_TAP,
        )
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }

    pub fn loss_taps(&self) -> &[usize] {
        &self.loss_taps
    }

    pub fn anomaly_tap(&self) -> usize {
        self.anomaly_tap
    }

    pub fn source(&self) -> &BackboneSource {
        &self.source
    }

    /// Content hash of the backbone parameters, fixed at construction.
    pub fn weights_hash(&self) -> &str {
        &self.hash
    }

    fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.mean.len() {
            return Err(Error::mismatch(
                format!("{} channels", self.mean.len()),
                x.c(),
            ));
        }
        let mut t = x.clone();
        let plane = t.h() * t.w();
        let c = t.c();
        for (i, chunk) in t.data_mut().chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(t)
    }

    /// Activations of every `taps` layer for a batch.
    pub fn features(&self, x: &Tensor, taps: &[usize]) -> Result<Vec<Tensor>> {
        self.stack.forward(&self.preprocess(x)?, taps)
    }

    /// `C x H x W` activation of `layer` for one image.
    pub fn extract(&self, img: &Raster, layer: usize) -> Result<Tensor> {
        self.stack.check_layer(layer)?;
        Ok(self
            .features(&Tensor::from_raster(img), &[layer])?
            .remove(0))
    }

    /// Loss-tap activations of a target batch, reusable across steps.
    pub fn target_features(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        self.features(y, &self.loss_taps)
    }

    /// Content loss of each sample, summed over taps.
    pub fn content_loss_tensor(&self, y_hat: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        same_shape(y_hat, y)?;
        let a = self.features(y_hat, &self.loss_taps)?;
        let b = self.features(y, &self.loss_taps)?;
        let mut out = vec![0.0; y.n()];
        for (fa, fb) in a.iter().zip(&b) {
            let norm = fa.sample_len() as f64;
            for (i, o) in out.iter_mut().enumerate() {
                *o += sq_dist(fa.sample(i), fb.sample(i)) / norm;
            }
        }
        Ok(out)
    }

    pub fn content_loss(&self, y_hat: &Raster, y: &Raster) -> Result<f64> {
        Ok(self.content_loss_tensor(&Tensor::from_raster(y_hat), &Tensor::from_raster(y))?[0])
    }

    pub fn combined_loss(&self, weights: LossWeights, y_hat: &Raster, y: &Raster) -> Result<f64> {
        let (a, b) = (Tensor::from_raster(y_hat), Tensor::from_raster(y));
        same_shape(&a, &b)?;
        let mse = sq_dist(a.data(), b.data()) / a.data().len() as f64;
        let content = if weights.lambda_feat == 0.0 {
            0.0
        } else {
            self.content_loss_tensor(&a, &b)?[0]
        };
        Ok(weights.lambda_mse as f64 * mse + weights.lambda_feat as f64 * content)
    }

    /// Combined loss of one sample and its gradient w.r.t. `y_hat`.
    ///
    /// `target` holds the loss-tap activations of the clean image, as from
    /// [`FeatureExtractor::target_features`] on a batch of one.
    pub fn combined_loss_grad(
        &self,
        weights: LossWeights,
        y_hat: &Tensor,
        y: &Tensor,
        target: &[Tensor],
    ) -> Result<(f64, Tensor)> {
        same_shape(y_hat, y)?;
        if y_hat.n() != 1 || target.len() != self.loss_taps.len() {
            return Err(Error::Argument(
                "combined_loss_grad takes one sample and its tap features".into(),
            ));
        }
        let n_px = y.data().len() as f64;
        let mse = sq_dist(y_hat.data(), y.data()) / n_px;
        let mut grad = Tensor::zeros(y.shape());
        let scale = (2.0 * weights.lambda_mse as f64 / n_px) as f32;
        for ((g, &a), &b) in grad.data_mut().iter_mut().zip(y_hat.data()).zip(y.data()) {
            *g = scale * (a - b);
        }
        let mut content = 0.0;
        if weights.lambda_feat != 0.0 {
            let lf = weights.lambda_feat;
            let dx =
                self.stack
                    .forward_backward(&self.preprocess(y_hat)?, &self.loss_taps, |outs| {
                        outs.iter()
                            .zip(target)
                            .map(|(fa, fb)| {
                                same_shape(fa, fb)?;
                                let norm = fa.data().len() as f64;
                                content += sq_dist(fa.data(), fb.data()) / norm;
                                let k = (2.0 / norm) as f32 * lf;
                                let mut d = fa.clone();
                                d.data_mut()
                                    .iter_mut()
                                    .zip(fb.data())
                                    .for_each(|(v, &t)| *v = k * (*v - t));
                                Ok(d)
                            })
                            .collect()
                    })?;
            let plane = grad.h() * grad.w();
            for (c, (gch, dch)) in grad
                .data_mut()
                .chunks_exact_mut(plane)
                .zip(dx.data().chunks_exact(plane))
                .enumerate()
            {
                let inv = 1.0 / self.std[c];
                gch.iter_mut().zip(dch).for_each(|(g, &d)| *g += d * inv);
            }
        }
        Ok((
            weights.lambda_mse as f64 * mse + weights.lambda_feat as f64 * content,
            grad,
        ))
    }

    /// Raw anomaly map for one sample pair: channel sum of `|phi(y_hat) - phi(y)|` at the anomaly tap.
    pub fn anomaly_map_tensor(&self, y_hat: &Tensor, y: &Tensor) -> Result<FloatMap> {
        same_shape(y_hat, y)?;
        if y.n() != 1 {
            return Err(Error::Argument("anomaly_map takes a single sample".into()));
        }
        let a = self.features(y_hat, &[self.anomaly_tap])?.remove(0);
        let b = self.features(y, &[self.anomaly_tap])?.remove(0);
        let plane = a.h() * a.w();
        let mut map = vec![0.0f32; plane];
        for (ca, cb) in a
            .data()
            .chunks_exact(plane)
            .zip(b.data().chunks_exact(plane))
        {
            for ((m, &va), &vb) in map.iter_mut().zip(ca).zip(cb) {
                *m += (va - vb).abs();
            }
        }
        FloatMap::new(a.h(), a.w(), map)
    }

    pub fn anomaly_map(&self, y_hat: &Raster, y: &Raster) -> Result<FloatMap> {
        self.anomaly_map_tensor(&Tensor::from_raster(y_hat), &Tensor::from_raster(y))
    }
}

fn vgg19_ops(
    mut params: impl FnMut(usize, usize, usize) -> Result<(Vec<f32>, Vec<f32>)>,
) -> Result<Vec<StackOp>> {
    let mut ops = Vec::new();
    let mut in_c = 3;
    let mut torch_idx = 0;
    for &out_c in &VGG19_PLAN {
        if out_c == 0 {
            ops.push(StackOp::MaxPool);
            torch_idx += 1;
        } else {
            let (weight, bias) = params(torch_idx, in_c, out_c)?;
            ops.push(StackOp::Conv {
                weight,
                bias,
                in_c,
                out_c,
                kernel: 3,
                relu: true,
            });
            in_c = out_c;
            torch_idx += 2;
        }
    }
    Ok(ops)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;
    use rand::Rng;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Two 3x3 convs with a pool between them, on 2-channel inputs.
    fn stub(seed: u64) -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = vec![
            StackOp::Conv {
                weight: he_uniform(&mut rng, 4 * 2 * 9, 18),
                bias: vec![0.1, -0.1, 0.05, 0.0],
                in_c: 2,
                out_c: 4,
                kernel: 3,
                relu: true,
            },
            StackOp::MaxPool,
            StackOp::Conv {
                weight: he_uniform(&mut rng, 3 * 4 * 9, 36),
                bias: vec![0.0; 3],
                in_c: 4,
                out_c: 3,
                kernel: 3,
                relu: true,
            },
        ];
        FeatureExtractor::from_stack(
            ConvStack::new(2, ops).unwrap(),
            vec![0.5, 0.4],
            vec![0.25, 0.5],
            vec![1, 2],
            2,
        )
        .unwrap()
    }

    #[test]
    fn one_by_one_stub_matches_hand_arithmetic() {
        // Identity 1x1 conv, no normalization: features are the pixels.
        let ops = vec![StackOp::Conv {
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
            in_c: 2,
            out_c: 2,
            kernel: 1,
            relu: false,
        }];
        let fe = FeatureExtractor::from_stack(
            ConvStack::new(2, ops).unwrap(),
            vec![0.0; 2],
            vec![1.0; 2],
            vec![1],
            1,
        )
        .unwrap();
        let a = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([1, 2, 1, 2], vec![0.0, 2.0, 1.0, 4.0]).unwrap();
        // (1 + 0 + 4 + 0) / 4
        assert_eq!(fe.content_loss_tensor(&a, &b).unwrap(), vec![1.25]);
        let map = fe.anomaly_map_tensor(&a, &b).unwrap();
        assert_eq!(map.values(), &[3.0, 0.0]);
    }

    #[test]
    fn losses_vanish_on_identical_and_are_symmetric() {
        let fe = stub(1);
        let a = rand_tensor([1, 2, 8, 8], 2);
        let b = rand_tensor([1, 2, 8, 8], 3);
        assert_eq!(fe.content_loss_tensor(&a, &a).unwrap(), vec![0.0]);
        let ab = fe.content_loss_tensor(&a, &b).unwrap()[0];
        let ba = fe.content_loss_tensor(&b, &a).unwrap()[0];
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
        let m = fe.anomaly_map_tensor(&a, &a).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        assert_eq!(
            fe.anomaly_map_tensor(&a, &b).unwrap(),
            fe.anomaly_map_tensor(&b, &a).unwrap()
        );
    }

    #[test]
    fn mse_term_alone() {
        let fe = FeatureExtractor::vgg19_seeded(0).unwrap();
        let zero = Raster::filled(32, 32, ColorSpace::Rgb, 0.0).unwrap();
        let half = Raster::filled(32, 32, ColorSpace::Rgb, 0.5).unwrap();
        let l = fe
            .combined_loss(LossWeights::new(0.01, 0.0).unwrap(), &zero, &half)
            .unwrap();
        assert!((l - 0.0025).abs() < 1e-9);
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    fn grad_check(weights: LossWeights) {
        let fe = stub(7);
        let y = rand_tensor([1, 2, 8, 8], 8);
        let y_hat = rand_tensor([1, 2, 8, 8], 9);
        let target = fe.target_features(&y).unwrap();
        let (loss, grad) = fe.combined_loss_grad(weights, &y_hat, &y, &target).unwrap();
        let eval = |t: &Tensor| fe.combined_loss_grad(weights, t, &y, &target).unwrap().0;
        assert!((loss - eval(&y_hat)).abs() < 1e-12);
        let h = 1e-3;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y_hat.data().len() {
            let mut p = y_hat.clone();
            p.data_mut()[i] += h;
            let mut m = y_hat.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h as f64);
            num += (fd - grad.data()[i] as f64).powi(2);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-2, "relative gradient error {rel}");
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        grad_check(LossWeights::default());
        grad_check(LossWeights::new(0.0, 1.0).unwrap());
        grad_check(LossWeights::new(1.0, 0.0).unwrap());
    }

    #[test]
    fn layer_index_is_checked() {
        let fe = FeatureExtractor::vgg19_seeded(0).unwrap();
        let img = Raster::filled(32, 32, ColorSpace::Rgb, 0.3).unwrap();
        assert!(matches!(fe.extract(&img, 0), Err(Error::LayerIndex { .. })));
        assert!(matches!(
            fe.extract(&img, 17),
            Err(Error::LayerIndex {
                index: 17,
                depth: 16
            })
        ));
    }

    #[test]
    fn vgg19_layout() {
        let fe = FeatureExtractor::vgg19_seeded(0).unwrap();
        assert_eq!(fe.stack().depth(), 16);
        let chans: Vec<usize> = (1..=16)
            .map(|j| fe.stack().channels_at(j).unwrap())
            .collect();
        assert_eq!(
            chans,
            vec![64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512]
        );
        let img = Raster::filled(64, 64, ColorSpace::Rgb, 0.3).unwrap();
        let f = fe.extract(&img, 12).unwrap();
        assert_eq!(f.shape(), [1, 512, 8, 8]);
        assert_eq!(fe.extract(&img, 12).unwrap(), f);
        assert_eq!(fe.source(), &BackboneSource::Seeded(0));
        assert_eq!(
            fe.weights_hash(),
            FeatureExtractor::vgg19_seeded(0).unwrap().weights_hash()
        );
        assert_ne!(
            fe.weights_hash(),
            FeatureExtractor::vgg19_seeded(1).unwrap().weights_hash()
        );
    }

    #[test]
    fn pretrained_file_round_trip() {
        let seeded = FeatureExtractor::vgg19_seeded(3).unwrap();
        let mut names = Vec::new();
        let mut bufs = Vec::new();
        let mut idx = 0;
        for op in seeded.stack().ops() {
            match op {
                StackOp::Conv {
                    weight,
                    bias,
                    in_c,
                    out_c,
                    ..
                } => {
                    names.push((format!("features.{idx}.weight"), vec![*out_c, *in_c, 3, 3]));
                    bufs.push(
                        weight
                            .iter()
                            .flat_map(|v| v.to_le_bytes())
                            .collect::<Vec<u8>>(),
                    );
                    names.push((format!("features.{idx}.bias"), vec![*out_c]));
                    bufs.push(bias.iter().flat_map(|v| v.to_le_bytes()).collect());
                    idx += 2;
                }
                StackOp::MaxPool => idx += 1,
            }
        }
        let views: Vec<_> = names
            .iter()
            .zip(&bufs)
            .map(|((n, s), b)| {
                (
                    n.clone(),
                    safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b)
                        .unwrap(),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(VGG19_WEIGHTS_FILE);
        safetensors::serialize_to_file(views, &None, &path).unwrap();
        let loaded = FeatureExtractor::vgg19_from_file(&path).unwrap();
        assert_eq!(loaded.weights_hash(), seeded.weights_hash());
        assert!(matches!(loaded.source(), BackboneSource::Pretrained(_)));
    }

    #[test]
    fn anomaly_map_peaks_near_changed_block() {
        let fe = FeatureExtractor::vgg19_seeded(FALLBACK_SEED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px: Vec<f32> = (0..64 * 64 * 3)
            .map(|_| rng.random_range(0.2..0.8))
            .collect();
        let a = Raster::new(64, 64, ColorSpace::Rgb, px).unwrap();
        let mut b = a.clone();
        for y in 40..56 {
            for x in 8..24 {
                for c in 0..3 {
                    b.set(y, x, c, 1.0 - a.get(y, x, c));
                }
            }
        }
        let map = fe.anomaly_map(&b, &a).unwrap();
        assert_eq!((map.height(), map.width()), (8, 8));
        // Block spans rows 40..56, cols 8..24: cells 5..7 and 1..3 at stride 8.
        let (y, x) = map.argmax();
        assert!(
            (4..=7).contains(&y) && (0..=3).contains(&x),
            "argmax at {:?}",
            (y, x)
        );
    }
}

//! Per-region training: cutout-style input corruption, augmentation, the
//! warmup + cosine learning-rate schedule and the Adam loop with best
//! validation checkpointing.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cae::{Cae, CaeConfig, ModelBundle, TrainManifest};
use crate::error::{Error, Result};
use crate::imaging::{load_raster, Raster};
use crate::nn::{Adam, AdamConfig};
use crate::partition::{extract_region_shifted, RegionSpec};
use crate::perceptual::{FeatureExtractor, LossWeights};
use crate::tensor::Tensor;

/// Target features are cached when they fit in this many bytes.
const TARGET_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub rect_count_range: (usize, usize),
    pub rect_side_fraction_range: (f32, f32),
    pub fill_value: f32,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            rect_count_range: (1, 3),
            rect_side_fraction_range: (0.1, 0.4),
            fill_value: 0.0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rect_side_fraction_range;
        if self.rect_count_range.0 > self.rect_count_range.1 || !(lo > 0.0 && lo <= hi && hi <= 1.0)
        {
            return Err(Error::Argument(format!(
                "invalid corruption config {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::Argument("fill_value must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Maximum magnitudes of the random photometric and geometric jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvtecAugment {
    pub rotation_deg: f32,
    pub shear_deg: f32,
    pub saturation: f32,
    pub contrast: f32,
    pub brightness: f32,
    pub scale: f32,
}

impl Default for MvtecAugment {
    fn default() -> Self {
        MvtecAugment {
            rotation_deg: 10.0,
            shear_deg: 5.0,
            saturation: 0.1,
            contrast: 0.1,
            brightness: 0.1,
            scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Range of the random region-anchor shift, per axis, in board pixels.
    pub mpi_offset_px: (usize, usize),
    pub mvtec: MvtecAugment,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mpi_offset_px: (0, 80),
            mvtec: MvtecAugment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_floor: f32,
    pub lr_peak: f32,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub corruption: CorruptionConfig,
    pub augmentation: AugmentConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 1000,
            lr_floor: 1e-5,
            lr_peak: 0.0072,
            warmup_epochs: 3,
            seed: 0,
            corruption: CorruptionConfig::default(),
            augmentation: AugmentConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile paired with [`CaeConfig::toy`].
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 50,
            lr_peak: 0.01,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor < self.lr_peak) {
            return Err(Error::Argument("need 0 < lr_floor < lr_peak".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Argument("warmup_epochs must be below epochs".into()));
        }
        self.corruption.validate()?;
        LossWeights::new(self.loss.lambda_mse, self.loss.lambda_feat).map(|_| ())
    }
}

/// Rectangle in pixel coordinates, `[y0, y0 + h) x [x0, x0 + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

fn draw_rects(
    height: usize,
    width: usize,
    cfg: &CorruptionConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Rect> {
    let (lo, hi) = cfg.rect_count_range;
    let n = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let (flo, fhi) = cfg.rect_side_fraction_range;
    let side = |len: usize, rng: &mut ChaCha8Rng| {
        let f = if flo == fhi {
            flo
        } else {
            rng.random_range(flo..=fhi)
        };
        ((f * len as f32).round() as usize).clamp(1, len)
    };
    (0..n)
        .map(|_| {
            let h = side(height, rng);
            let w = side(width, rng);
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            Rect { y0, x0, h, w }
        })
        .collect()
}

/// Rectangles that [`corrupt`] draws for `seed`.
pub fn corruption_rects(
    height: usize,
    width: usize,
    cfg: &CorruptionConfig,
    seed: u64,
) -> Vec<Rect> {
    draw_rects(height, width, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Overwrites `N` random rectangles with `fill_value`.
pub fn corrupt(img: &Raster, cfg: &CorruptionConfig, seed: u64) -> Raster {
    let mut out = img.clone();
    for r in corruption_rects(img.height(), img.width(), cfg, seed) {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                for c in 0..img.channels() {
                    out.set(y, x, c, cfg.fill_value);
                }
            }
        }
    }
    out
}

fn corrupt_sample(t: &mut Tensor, i: usize, cfg: &CorruptionConfig, rng: &mut ChaCha8Rng) {
    let (h, w) = (t.h(), t.w());
    let rects = draw_rects(h, w, cfg, rng);
    let sample = t.sample_mut(i);
    for plane in sample.chunks_exact_mut(h * w) {
        for r in &rects {
            for y in r.y0..r.y0 + r.h {
                plane[y * w + r.x0..y * w + r.x0 + r.w].fill(cfg.fill_value);
            }
        }
    }
}

/// Learning rate for optimizer step `step` of `total_steps`.
///
/// Linear from `lr_floor` to `lr_peak` over the warmup steps, then a cosine
/// back down to `lr_floor` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f32> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Argument(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    let (floor, peak) = (cfg.lr_floor as f64, cfg.lr_peak as f64);
    let warmup = total_steps as f64 * cfg.warmup_epochs as f64 / cfg.epochs as f64;
    let s = step as f64;
    let lr = if s <= warmup && warmup > 0.0 {
        floor + (peak - floor) * s / warmup
    } else {
        let progress = ((s - warmup) / (total_steps as f64 - warmup)).clamp(0.0, 1.0);
        floor + 0.5 * (peak - floor) * (1.0 + (PI * progress).cos())
    };
    Ok(lr.clamp(floor, peak) as f32)
}

/// A finite, indexable stream of anomaly-free training images.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `index`; `rng` drives any augmentation.
    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Raster>;

    /// True when `sample` ignores `rng`, so clean-target features can be cached.
    fn is_static(&self) -> bool {
        false
    }

    /// Stable content identifier recorded in the train manifest.
    fn fingerprint(&self) -> String;
}

/// Pre-cropped region images, no augmentation.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    images: Vec<Raster>,
}

impl InMemorySource {
    pub fn new(images: Vec<Raster>) -> Self {
        InMemorySource { images }
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn sample(&self, index: usize, _: &mut ChaCha8Rng) -> Result<Raster> {
        Ok(self.images[index].clone())
    }

    fn is_static(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            h.update((img.height() as u64).to_le_bytes());
            h.update((img.width() as u64).to_le_bytes());
            img.pixels().iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub enum BoardImage {
    Loaded(Raster),
    /// Decoded on every access, for datasets too large to hold in memory.
    Path(PathBuf),
}

/// Region crops of whole boards with a random anchor shift.
#[derive(Debug, Clone)]
pub struct BoardRegionSource {
    boards: Vec<BoardImage>,
    spec: RegionSpec,
    out_side: usize,
    offset: (usize, usize),
}

impl BoardRegionSource {
    /// `offset` is the per-axis shift range; a random sign is applied to each axis.
    pub fn new(
        boards: Vec<BoardImage>,
        spec: RegionSpec,
        out_side: usize,
        offset: (usize, usize),
    ) -> Result<Self> {
        if offset.0 > offset.1 {
            return Err(Error::Argument("offset range is reversed".into()));
        }
        Ok(BoardRegionSource {
            boards,
            spec,
            out_side,
            offset,
        })
    }
}

impl SampleSource for BoardRegionSource {
    fn len(&self) -> usize {
        self.boards.len()
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Raster> {
        let loaded;
        let board = match &self.boards[index] {
            BoardImage::Loaded(r) => r,
            BoardImage::Path(p) => {
                loaded = load_raster(p)?;
                &loaded
            }
        };
        let (lo, hi) = self.offset;
        let shift = |rng: &mut ChaCha8Rng| {
            if hi == 0 {
                return 0;
            }
            let d = rng.random_range(lo..=hi) as isize;
            if rng.random_bool(0.5) {
                -d
            } else {
                d
            }
        };
        let dx = shift(rng);
        let dy = shift(rng);
        extract_region_shifted(board, &self.spec, dx, dy, self.out_side)
    }

    fn is_static(&self) -> bool {
        self.offset.1 == 0
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}{}{:?}", self.spec, self.out_side, self.offset));
        for b in &self.boards {
            match b {
                BoardImage::Path(p) => h.update(p.to_string_lossy().as_bytes()),
                BoardImage::Loaded(r) => r.pixels().iter().for_each(|v| h.update(v.to_le_bytes())),
            }
        }
        hex::encode(h.finalize())
    }
}

/// Whole-image samples with random affine and colour jitter.
#[derive(Debug, Clone)]
pub struct AugmentedSource {
    images: Vec<Raster>,
    aug: MvtecAugment,
}

impl AugmentedSource {
    pub fn new(images: Vec<Raster>, aug: MvtecAugment) -> Self {
        AugmentedSource { images, aug }
    }
}

impl SampleSource for AugmentedSource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Raster> {
        augment(&self.images[index], &self.aug, rng)
    }

    fn fingerprint(&self) -> String {
        InMemorySource::new(self.images.clone()).fingerprint()
    }
}

fn jitter(rng: &mut ChaCha8Rng, magnitude: f32) -> f32 {
    if magnitude == 0.0 {
        0.0
    } else {
        rng.random_range(-magnitude..=magnitude)
    }
}

/// Random rotation/shear/scale about the centre (edge-replicated) followed by
/// brightness, contrast and saturation jitter.
pub fn augment(img: &Raster, aug: &MvtecAugment, rng: &mut ChaCha8Rng) -> Result<Raster> {
    let theta = jitter(rng, aug.rotation_deg).to_radians();
    let shear = jitter(rng, aug.shear_deg).to_radians().tan();
    let scale = 1.0 + jitter(rng, aug.scale);
    let brightness = 1.0 + jitter(rng, aug.brightness);
    let contrast = 1.0 + jitter(rng, aug.contrast);
    let saturation = 1.0 + jitter(rng, aug.saturation);

    // Forward map A = s * R * Sh; sample the source at A^-1 (p - c) + c.
    let (sn, cs) = theta.sin_cos();
    let a = [
        [scale * cs, scale * (cs * shear - sn)],
        [scale * sn, scale * (sn * shear + cs)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut px = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let sx = (inv[0][0] * dx + inv[0][1] * dy + cx).clamp(0.0, (w - 1) as f32);
            let sy = (inv[1][0] * dx + inv[1][1] * dy + cy).clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for c in 0..ch {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                px[(y * w + x) * ch + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let mean = px.iter().sum::<f32>() / px.len() as f32;
    for pixel in px.chunks_exact_mut(ch) {
        let gray = if ch == 3 {
            0.299 * pixel[0] + 0.587 * pixel[1] + 0.114 * pixel[2]
        } else {
            pixel[0]
        };
        for v in pixel.iter_mut() {
            let s = gray + (*v - gray) * saturation;
            let c = mean + (s - mean) * contrast;
            *v = c * brightness;
        }
    }
    Raster::from_clamped(h, w, img.color_space(), px)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f32,
}

/// Loss of a reconstructed batch against its clean targets, averaged over
/// samples, with the gradient w.r.t. the reconstruction.
pub fn batch_loss_grad(
    extractor: &FeatureExtractor,
    weights: LossWeights,
    y_hat: &Tensor,
    clean: &Tensor,
    cached_targets: Option<&[&[Tensor]]>,
) -> Result<(f64, Tensor)> {
    let n = clean.n();
    let mut grad = Tensor::zeros(y_hat.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (yh, y) = (y_hat.select(i), clean.select(i));
        let computed;
        let target = match cached_targets {
            Some(t) => t[i],
            None => {
                computed = if weights.lambda_feat == 0.0 {
                    Vec::new()
                } else {
                    extractor.target_features(&y)?
                };
                &computed[..]
            }
        };
        let (l, g) = if weights.lambda_feat == 0.0 {
            mse_only(weights, &yh, &y)
        } else {
            extractor.combined_loss_grad(weights, &yh, &y, target)?
        };
        total += l;
        let inv = 1.0 / n as f32;
        grad.sample_mut(i)
            .iter_mut()
            .zip(g.data())
            .for_each(|(d, &s)| *d = s * inv);
    }
    Ok((total / n as f64, grad))
}

fn mse_only(weights: LossWeights, y_hat: &Tensor, y: &Tensor) -> (f64, Tensor) {
    let n = y.data().len() as f64;
    let mut g = Tensor::zeros(y.shape());
    let mut sum = 0.0;
    let k = (2.0 * weights.lambda_mse as f64 / n) as f32;
    for ((d, &a), &b) in g.data_mut().iter_mut().zip(y_hat.data()).zip(y.data()) {
        sum += ((a - b) as f64).powi(2);
        *d = k * (a - b);
    }
    (weights.lambda_mse as f64 * sum / n, g)
}

/// One optimizer step on `corrupted -> clean`; returns the batch loss.
pub fn train_step(
    cae: &mut Cae,
    adam: &mut Adam,
    extractor: &FeatureExtractor,
    weights: LossWeights,
    corrupted: &Tensor,
    clean: &Tensor,
    cached_targets: Option<&[&[Tensor]]>,
    lr: f32,
) -> Result<f64> {
    let y_hat = cae.forward_train(corrupted)?;
    let (loss, grad) = batch_loss_grad(extractor, weights, &y_hat, clean, cached_targets)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    cae.backward(&grad)?;
    adam.step(&mut cae.params_mut(), lr);
    Ok(loss)
}

/// Mean inference-mode loss of reconstructing each sample (uncorrupted) in batches.
pub fn evaluate_loss(
    cae: &Cae,
    extractor: &FeatureExtractor,
    weights: LossWeights,
    samples: &[Raster],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = Tensor::from_rasters(chunk)?;
        let y_hat = cae.reconstruct_tensor(&x)?;
        total += batch_loss_grad(extractor, weights, &y_hat, &x, None)?.0 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains one region's autoencoder on anomaly-free samples.
///
/// Every step reconstructs a corrupted batch and scores it against the clean
/// batch. The parameters with the lowest validation loss (training loss when
/// `val` is absent) are returned; `on_epoch` sees every epoch record.
pub fn train_region(
    region_id: &str,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    extractor: &FeatureExtractor,
    cae_cfg: &CaeConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ModelBundle> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no training samples for {region_id}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cae = Cae::new(cae_cfg.clone())?;
    let mut adam = Adam::new(cfg.adam, &cae.params_mut());

    let n = train.len();
    let batch = cfg.batch_size.min(n);
    // A trailing batch of one would give degenerate batch statistics.
    let steps_per_epoch = if n % batch == 1 && n > 1 {
        n / batch
    } else {
        n.div_ceil(batch)
    };
    let total_steps = steps_per_epoch * cfg.epochs;

    let cache = if train.is_static() && cfg.loss.lambda_feat != 0.0 {
        let probe = extractor.target_features(&Tensor::from_raster(&train.sample(0, &mut rng)?))?;
        let per_sample: usize = probe.iter().map(|t| t.data().len() * 4).sum();
        if per_sample * n <= TARGET_CACHE_BYTES {
            let mut all = Vec::with_capacity(n);
            for i in 0..n {
                all.push(
                    extractor.target_features(&Tensor::from_raster(&train.sample(i, &mut rng)?))?,
                );
            }
            Some(all)
        } else {
            None
        }
    } else {
        None
    };

    let val_samples = match val {
        Some(v) if !v.is_empty() => {
            let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_f7a1);
            Some(
                (0..v.len())
                    .map(|i| v.sample(i, &mut vrng))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut best: Option<(f64, usize, Cae)> = None;
    let mut last = (f64::NAN, None);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(step, total_steps, cfg)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for b in 0..steps_per_epoch {
            let end = if b + 1 == steps_per_epoch {
                n
            } else {
                (b + 1) * batch
            };
            let idx = &order[b * batch..end];
            let clean = Tensor::from_rasters(
                &idx.iter()
                    .map(|&i| train.sample(i, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let mut corrupted = clean.clone();
            for i in 0..corrupted.n() {
                let mut crng = ChaCha8Rng::seed_from_u64(rng.next_u64());
                corrupt_sample(&mut corrupted, i, &cfg.corruption, &mut crng);
            }
            let targets: Option<Vec<&[Tensor]>> = cache
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i].as_slice()).collect());
            let lr = lr_at(step, total_steps, cfg)?;
            let loss = train_step(
                &mut cae,
                &mut adam,
                extractor,
                cfg.loss,
                &corrupted,
                &clean,
                targets.as_deref(),
                lr,
            )?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            sum += loss * idx.len() as f64;
            count += idx.len();
            step += 1;
        }
        let train_loss = sum / count as f64;
        let val_loss = match &val_samples {
            Some(v) => Some(evaluate_loss(&cae, extractor, cfg.loss, v, cfg.batch_size)?),
            None => None,
        };
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, epoch, cae.clone()));
        }
        last = (train_loss, val_loss);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: epoch_lr,
        };
        log::debug!("{region_id}: {record:?}");
        on_epoch(&record);
    }

    let (best_score, best_epoch, best_cae) = best.expect("epochs > 0");
    let mut bundle = ModelBundle {
        region_id: region_id.to_string(),
        cae: best_cae,
        norm_range: None,
        operating_threshold: None,
        train_manifest: None,
    };
    bundle.train_manifest = Some(TrainManifest {
        dataset_hash: train.fingerprint(),
        epochs: cfg.epochs,
        best_epoch,
        final_train_loss: last.0,
        final_val_loss: last.1,
        best_val_loss: val_samples.as_ref().map(|_| best_score),
        backbone_hash: extractor.weights_hash().to_string(),
        adam: cfg.adam,
        seed: cfg.seed,
    });
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;
    use std::collections::HashSet;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        let total = 1000 * 12;
        let warm = 3 * 12;
        assert!((lr_at(0, total, &c).unwrap() - 1e-5).abs() < 1e-12);
        assert!((lr_at(warm, total, &c).unwrap() - 0.0072).abs() < 1e-9);
        assert!((lr_at(total, total, &c).unwrap() - 1e-5).abs() < 1e-7);
        let mid = warm + (total - warm) / 2;
        assert!((lr_at(mid, total, &c).unwrap() - 0.003605).abs() < 1e-6);
        assert!(lr_at(total + 1, total, &c).is_err());
    }

    #[test]
    fn corruption_noop_and_total() {
        let img = Raster::filled(20, 30, ColorSpace::Rgb, 0.7).unwrap();
        let none = CorruptionConfig {
            rect_count_range: (0, 0),
            ..CorruptionConfig::default()
        };
        assert_eq!(corrupt(&img, &none, 3), img);
        let full = CorruptionConfig {
            rect_count_range: (1, 1),
            rect_side_fraction_range: (1.0, 1.0),
            fill_value: 0.0,
        };
        assert!(corrupt(&img, &full, 3).pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupted_pixel_count_matches_rect_union() {
        let img = Raster::filled(64, 48, ColorSpace::Gray, 1.0).unwrap();
        let c = CorruptionConfig::default();
        for seed in 0..20 {
            let out = corrupt(&img, &c, seed);
            // Independent re-draw of the same seeded sequence.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=3usize);
            let mut cells = HashSet::new();
            for _ in 0..n {
                let fh: f32 = rng.random_range(0.1..=0.4);
                let h = ((fh * 64.0).round() as usize).clamp(1, 64);
                let fw: f32 = rng.random_range(0.1..=0.4);
                let w = ((fw * 48.0).round() as usize).clamp(1, 48);
                let y0 = rng.random_range(0..=64 - h);
                let x0 = rng.random_range(0..=48 - w);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        cells.insert((y, x));
                    }
                }
            }
            let zeros = out.pixels().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, cells.len(), "seed {seed}");
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let px: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 17) as f32 / 17.0).collect();
        let img = Raster::new(16, 16, ColorSpace::Rgb, px).unwrap();
        let zero = MvtecAugment {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            brightness: 0.0,
            scale: 0.0,
        };
        let out = augment(&img, &zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
        let jittered = augment(
            &img,
            &MvtecAugment::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_ne!(jittered, img);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let fe = FeatureExtractor::vgg19_seeded(0).unwrap();
        let r = train_region(
            "grid1_1",
            &InMemorySource::new(vec![]),
            None,
            &fe,
            &CaeConfig::toy(),
            &TrainConfig::toy(),
            |_| {},
        );
        assert!(matches!(r, Err(Error::EmptyDataset(_))));
    }
}

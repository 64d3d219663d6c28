//! Convolutional autoencoder: strided-conv encoder, dense bottleneck, and a
//! mirrored transposed-conv decoder ending in a sigmoid.
//!
//! Every conv/transposed-conv layer uses a `kernel x kernel` filter with stride
//! 2 and "same" padding, so each encoder layer halves the side and each
//! decoder layer doubles it exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, Raster};
use crate::nn::{
    Activation, AdamConfig, BatchNorm, Conv2d, ConvGeometry, ConvTranspose2d, Linear, Param,
};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub encoder_filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub fc_width: usize,
    pub latent_dim: usize,
    pub leaky_slope: f32,
    pub bn_momentum: f32,
    pub bn_eps: f32,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            input_side: 256,
            input_channels: 3,
            encoder_filters: vec![32, 64, 128, 128, 256, 256, 256],
            kernel: 5,
            stride: 2,
            fc_width: 1024,
            latent_dim: 500,
            leaky_slope: 0.2,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            seed: 0,
        }
    }
}

impl CaeConfig {
    /// Desk-scale profile: 64x64 inputs and four encoder layers.
    pub fn toy() -> Self {
        CaeConfig {
            input_side: 64,
            encoder_filters: vec![32, 64, 64, 64],
            latent_dim: 128,
            bn_momentum: 0.9,
            ..CaeConfig::default()
        }
    }

    /// Side length of the last encoder feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.input_side / self.stride.pow(self.encoder_filters.len() as u32)
    }

    pub fn pre_fc_width(&self) -> usize {
        let s = self.bottleneck_side();
        s * s * self.encoder_filters.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.encoder_filters.is_empty() || self.encoder_filters.contains(&0) {
            return bad("encoder_filters must be non-empty and positive".into());
        }
        if self.stride < 2 || self.kernel == 0 {
            return bad("stride must be >= 2 and kernel positive".into());
        }
        let shrink = self.stride.pow(self.encoder_filters.len() as u32);
        if self.input_side % shrink != 0 || self.input_side / shrink < 1 {
            return bad(format!(
                "input side {} is not divisible by stride^layers = {shrink}",
                self.input_side
            ));
        }
        if self.pre_fc_width() != self.fc_width {
            return bad(format!(
                "decoder reshape needs fc_width == {}x{}x{} = {}, got {}",
                self.bottleneck_side(),
                self.bottleneck_side(),
                self.encoder_filters.last().unwrap(),
                self.pre_fc_width(),
                self.fc_width
            ));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return bad("input_channels must be 1 or 3".into());
        }
        if self.latent_dim == 0 || !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("latent_dim, bn_momentum or bn_eps out of range".into());
        }
        Ok(())
    }
}

/// One row of the architecture trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Output shape of every conv, dense and transposed-conv layer, in order.
pub fn intermediate_shapes(config: &CaeConfig) -> Result<Vec<LayerShape>> {
    config.validate()?;
    let shape = |name: String, side: usize, channels: usize| LayerShape {
        name,
        height: side,
        width: side,
        channels,
    };
    let mut out = Vec::new();
    let mut side = config.input_side;
    for (i, &f) in config.encoder_filters.iter().enumerate() {
        side = side.div_ceil(config.stride);
        out.push(shape(format!("enc.conv{i}"), side, f));
    }
    out.push(shape("enc.fc".into(), 1, config.fc_width));
    out.push(shape("latent".into(), 1, config.latent_dim));
    out.push(shape("dec.fc".into(), 1, config.fc_width));
    let mut chans: Vec<usize> = vec![config.input_channels];
    chans.extend(&config.encoder_filters[..config.encoder_filters.len() - 1]);
    for (i, &c) in chans.iter().rev().enumerate() {
        side *= config.stride;
        out.push(shape(format!("dec.deconv{i}"), side, c));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Block {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Dense(Linear),
    Norm(BatchNorm),
    Act(Activation),
    Flatten([usize; 3]),
    Unflatten([usize; 3]),
}

impl Block {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Conv(l) => l.infer(x),
            Block::Deconv(l) => l.infer(x),
            Block::Dense(l) => l.infer(x),
            Block::Norm(l) => l.infer(x),
            Block::Act(a) => Ok(a.infer(x)),
            Block::Flatten([c, h, w]) => x.clone().reshape([x.n(), c * h * w, 1, 1]),
            Block::Unflatten([c, h, w]) => x.clone().reshape([x.n(), *c, *h, *w]),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Conv(l) => l.forward_train(x),
            Block::Deconv(l) => l.forward_train(x),
            Block::Dense(l) => l.forward_train(x),
            Block::Norm(l) => l.forward_train(x),
            Block::Act(a) => Ok(a.forward_train(x)),
            _ => self.infer(x),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            Block::Conv(l) => l.backward(dy),
            Block::Deconv(l) => l.backward(dy),
            Block::Dense(l) => l.backward(dy),
            Block::Norm(l) => l.backward(dy),
            Block::Act(a) => a.backward(dy),
            Block::Flatten([c, h, w]) => dy.clone().reshape([dy.n(), *c, *h, *w]),
            Block::Unflatten([c, h, w]) => dy.clone().reshape([dy.n(), *c * *h * *w, 1, 1]),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Block::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Block::Deconv(l) => vec![&mut l.weight, &mut l.bias],
            Block::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Block::Norm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            _ => vec![],
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Block::Conv(l) => vec![&l.weight, &l.bias],
            Block::Deconv(l) => vec![&l.weight, &l.bias],
            Block::Dense(l) => vec![&l.weight, &l.bias],
            Block::Norm(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            _ => vec![],
        }
    }
}

/// The autoencoder network.
#[derive(Debug, Clone)]
pub struct Cae {
    config: CaeConfig,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
}

impl Cae {
    pub fn new(config: CaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (k, s, slope) = (config.kernel, config.stride, config.leaky_slope);
        let bn = |name: &str, c: usize| {
            Block::Norm(BatchNorm::new(name, c, config.bn_momentum, config.bn_eps))
        };

        let mut encoder = Vec::new();
        let mut side = config.input_side;
        let mut in_c = config.input_channels;
        let mut geometries = Vec::new();
        for (i, &f) in config.encoder_filters.iter().enumerate() {
            let g = ConvGeometry::same(in_c, f, k, s, side, side);
            geometries.push(g);
            encoder.push(Block::Conv(Conv2d::new(
                &format!("enc.conv{i}"),
                g,
                &mut rng,
            )));
            encoder.push(bn(&format!("enc.bn{i}"), f));
            encoder.push(Block::Act(Activation::leaky(slope)));
            side = g.out_h;
            in_c = f;
        }
        let bottleneck = [in_c, side, side];
        encoder.push(Block::Flatten(bottleneck));
        encoder.push(Block::Dense(Linear::new(
            "enc.fc",
            config.pre_fc_width(),
            config.fc_width,
            &mut rng,
        )));
        encoder.push(bn("enc.fc_bn", config.fc_width));
        encoder.push(Block::Act(Activation::leaky(slope)));
        encoder.push(Block::Dense(Linear::new(
            "latent",
            config.fc_width,
            config.latent_dim,
            &mut rng,
        )));
        encoder.push(Block::Act(Activation::leaky(slope)));

        let mut decoder = vec![
            Block::Dense(Linear::new(
                "dec.fc",
                config.latent_dim,
                config.fc_width,
                &mut rng,
            )),
            bn("dec.fc_bn", config.fc_width),
            Block::Act(Activation::leaky(slope)),
            Block::Unflatten(bottleneck),
        ];
        let last = geometries.len() - 1;
        for (i, g) in geometries.iter().rev().enumerate() {
            decoder.push(Block::Deconv(ConvTranspose2d::new(
                &format!("dec.deconv{i}"),
                *g,
                &mut rng,
            )));
            if i == last {
                decoder.push(Block::Act(Activation::sigmoid()));
            } else {
                decoder.push(bn(&format!("dec.bn{i}"), g.in_c));
                decoder.push(Block::Act(Activation::leaky(slope)));
            }
        }
        Ok(Cae {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &CaeConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.shape()[1..] != [c.input_channels, c.input_side, c.input_side] {
            return Err(Error::Shape(format!(
                "expected [_, {}, {}, {}] input, got {:?}",
                c.input_channels,
                c.input_side,
                c.input_side,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.iter().try_fold(x.clone(), |t, b| b.infer(&t))
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        if z.sample_len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent length {} != {}",
                z.sample_len(),
                self.config.latent_dim
            )));
        }
        self.decoder.iter().try_fold(z.clone(), |t, b| b.infer(&t))
    }

    /// Inference-mode reconstruction of a batch.
    pub fn reconstruct_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.decode_tensor(&self.encode_tensor(x)?)
    }

    /// Training-mode forward pass (batch statistics, caches for backward).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut t = x.clone();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            t = b.forward_train(&t)?;
        }
        Ok(t)
    }

    /// Backpropagates `dy` (gradient w.r.t. the reconstruction), accumulating parameter gradients.
    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        for b in self
            .decoder
            .iter_mut()
            .rev()
            .chain(self.encoder.iter_mut().rev())
        {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(Block::params_mut)
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(Block::params)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn load_params(&mut self, mut values: HashMap<String, Vec<f32>>) -> Result<()> {
        for p in self.params_mut() {
            let v = values
                .remove(&p.name)
                .ok_or_else(|| Error::Serialization(format!("weights archive lacks {}", p.name)))?;
            if v.len() != p.value.len() {
                return Err(Error::Serialization(format!(
                    "{} holds {} values, architecture expects {}",
                    p.name,
                    v.len(),
                    p.value.len()
                )));
            }
            p.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Serialization(format!(
                "unexpected tensor {extra} in weights archive"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Provenance recorded after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub dataset_hash: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub backbone_hash: String,
    pub adam: AdamConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    region_id: String,
    config: CaeConfig,
    norm_range: Option<(f32, f32)>,
    operating_threshold: Option<f32>,
    train_manifest: Option<TrainManifest>,
}

/// A trained autoencoder for one board region plus its calibration.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub region_id: String,
    pub cae: Cae,
    /// Global `(min, max)` of raw anomaly-map values over the evaluation set.
    pub norm_range: Option<(f32, f32)>,
    /// Best-IoU threshold found during evaluation.
    pub operating_threshold: Option<f32>,
    pub train_manifest: Option<TrainManifest>,
}

impl ModelBundle {
    pub fn new(region_id: impl Into<String>, config: CaeConfig) -> Result<Self> {
        Ok(ModelBundle {
            region_id: region_id.into(),
            cae: Cae::new(config)?,
            norm_range: None,
            operating_threshold: None,
            train_manifest: None,
        })
    }

    pub fn config(&self) -> &CaeConfig {
        self.cae.config()
    }

    fn check_raster(&self, x: &Raster) -> Result<()> {
        let c = self.config();
        if x.height() != c.input_side
            || x.width() != c.input_side
            || x.channels() != c.input_channels
        {
            return Err(Error::Shape(format!(
                "expected {0}x{0}x{1} raster, got {2}x{3}x{4}",
                c.input_side,
                c.input_channels,
                x.height(),
                x.width(),
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Raster) -> Result<LatentVector> {
        self.check_raster(x)?;
        let z = self.cae.encode_tensor(&Tensor::from_raster(x))?;
        Ok(LatentVector(z.into_data()))
    }

    pub fn decode(&self, z: &LatentVector) -> Result<Raster> {
        let t = Tensor::from_vec([1, z.len(), 1, 1], z.0.clone())?;
        self.cae.decode_tensor(&t)?.to_raster(0)
    }

    pub fn reconstruct(&self, x: &Raster) -> Result<Raster> {
        self.check_raster(x)?;
        self.cae
            .reconstruct_tensor(&Tensor::from_raster(x))?
            .to_raster(0)
    }

    /// Writes `manifest.json` and `weights.safetensors` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = ManifestFile {
            region_id: self.region_id.clone(),
            config: self.config().clone(),
            norm_range: self.norm_range,
            operating_threshold: self.operating_threshold,
            train_manifest: self.train_manifest.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

        let params = self.cae.params();
        let bytes: Vec<Vec<u8>> = params
            .iter()
            .map(|p| p.value.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = params
            .iter()
            .zip(&bytes)
            .map(|(p, b)| {
                TensorView::new(Dtype::F32, p.shape.clone(), b)
                    .map(|v| (p.name.clone(), v))
                    .map_err(|e| Error::Serialization(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = dir.join(WEIGHTS_FILE);
        safetensors::serialize_to_file(views, &None, &path)
            .map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let manifest: ManifestFile =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let mut cae = Cae::new(manifest.config)?;
        let path = dir.join(WEIGHTS_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        cae.load_params(read_f32_tensors(&raw)?)?;
        Ok(ModelBundle {
            region_id: manifest.region_id,
            cae,
            norm_range: manifest.norm_range,
            operating_threshold: manifest.operating_threshold,
            train_manifest: manifest.train_manifest,
        })
    }
}

/// Reads every `F32` tensor of a safetensors archive.
pub(crate) fn read_f32_tensors(raw: &[u8]) -> Result<HashMap<String, Vec<f32>>> {
    let st = safetensors::SafeTensors::deserialize(raw)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Serialization(format!(
                    "{name}: expected F32, found {:?}",
                    view.dtype()
                )));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((name, values))
        })
        .collect()
}

/// Builds an `input_side` square raster of the configured channel count, for tests and fixtures.
pub fn blank_input(config: &CaeConfig, value: f32) -> Result<Raster> {
    let cs = if config.input_channels == 3 {
        ColorSpace::Rgb
    } else {
        ColorSpace::Gray
    };
    Raster::filled(config.input_side, config.input_side, cs, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_raster(side: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..side * side * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Raster::new(side, side, ColorSpace::Rgb, px).unwrap()
    }

    #[test]
    fn default_trace_halves_to_two() {
        let shapes = intermediate_shapes(&CaeConfig::default()).unwrap();
        let enc: Vec<_> = shapes
            .iter()
            .filter(|s| s.name.starts_with("enc.conv"))
            .collect();
        let dec: Vec<_> = shapes
            .iter()
            .filter(|s| s.name.starts_with("dec.deconv"))
            .collect();
        assert_eq!(enc.len(), 7);
        assert_eq!(dec.len(), 7);
        let sides: Vec<usize> = enc.iter().map(|s| s.height).collect();
        assert_eq!(sides, vec![128, 64, 32, 16, 8, 4, 2]);
        let last = enc.last().unwrap();
        assert_eq!((last.height, last.width, last.channels), (2, 2, 256));
        assert_eq!(last.height * last.width * last.channels, 1024);
        let dec_ch: Vec<usize> = dec.iter().map(|s| s.channels).collect();
        assert_eq!(dec_ch, vec![256, 256, 128, 128, 64, 32, 3]);
        assert_eq!(dec.last().unwrap().height, 256);
    }

    #[test]
    fn half_size_input_ends_at_one() {
        let cfg = CaeConfig {
            input_side: 128,
            fc_width: 256,
            ..CaeConfig::default()
        };
        let shapes = intermediate_shapes(&cfg).unwrap();
        let last = shapes
            .iter()
            .filter(|s| s.name.starts_with("enc.conv"))
            .last()
            .unwrap();
        assert_eq!((last.height, last.width, last.channels), (1, 1, 256));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = CaeConfig {
            input_side: 100,
            ..CaeConfig::toy()
        };
        assert!(cfg.validate().is_err());
        let cfg = CaeConfig {
            fc_width: 500,
            ..CaeConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_network_shapes_and_ranges() {
        let bundle = ModelBundle::new("grid1_1", CaeConfig::toy()).unwrap();
        let x = random_raster(64, 1);
        let z = bundle.encode(&x).unwrap();
        assert_eq!(z.len(), 128);
        assert!(z.0.iter().all(|v| v.is_finite()));
        assert_eq!(bundle.encode(&x).unwrap(), z);
        let y = bundle.decode(&LatentVector(vec![0.0; 128])).unwrap();
        assert_eq!((y.height(), y.width(), y.channels()), (64, 64, 3));
        assert!(y.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        let r = bundle.reconstruct(&x).unwrap();
        assert_eq!((r.height(), r.width()), (64, 64));
        assert!(bundle.reconstruct(&random_raster(32, 2)).is_err());
        assert!(bundle.decode(&LatentVector(vec![0.0; 3])).is_err());
    }

    #[test]
    fn actual_layer_shapes_match_trace() {
        let cfg = CaeConfig::toy();
        let cae = Cae::new(cfg.clone()).unwrap();
        let trace = intermediate_shapes(&cfg).unwrap();
        let mut t = Tensor::from_raster(&random_raster(64, 3));
        let mut observed = Vec::new();
        for b in cae.encoder.iter().chain(cae.decoder.iter()) {
            t = b.infer(&t).unwrap();
            if matches!(b, Block::Conv(_) | Block::Deconv(_) | Block::Dense(_)) {
                observed.push((t.h(), t.w(), t.c()));
            }
        }
        let expected: Vec<_> = trace
            .iter()
            .map(|s| (s.height, s.width, s.channels))
            .collect();
        assert_eq!(observed, expected);
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = Cae::new(CaeConfig::toy()).unwrap();
        let b = Cae::new(CaeConfig {
            seed: 99,
            ..CaeConfig::toy()
        })
        .unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert!(a.parameter_count() > 0);
    }

    #[test]
    fn save_load_reproduces_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = ModelBundle::new("grid2_3", CaeConfig::toy()).unwrap();
        bundle.norm_range = Some((0.25, 3.5));
        bundle.save(dir.path().join("grid2_3")).unwrap();
        let back = ModelBundle::load(dir.path().join("grid2_3")).unwrap();
        assert_eq!(back.region_id, "grid2_3");
        assert_eq!(back.norm_range, Some((0.25, 3.5)));
        let x = random_raster(64, 4);
        assert_eq!(
            bundle.reconstruct(&x).unwrap(),
            back.reconstruct(&x).unwrap()
        );
    }
}

//! Reconstruction-based modification detection for printed circuit boards.
//!
//! Boards are registered to a golden reference, partitioned into square
//! regions, and each region is scored by a convolutional autoencoder trained
//! only on unmodified boards. Deviations are measured in the feature space of
//! a fixed VGG19 backbone rather than in pixel space.

pub mod cae;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod nn;
pub mod partition;
pub mod perceptual;
pub mod pipeline;
pub mod registration;
pub mod tensor;
pub mod training;

pub use cae::{
    intermediate_shapes, CaeConfig, LatentVector, LayerShape, ModelBundle, TrainManifest,
};
pub use error::{Error, Result};
pub use imaging::{BinaryMask, ColorSpace, FloatMap, Raster, Resample};
pub use perceptual::{FeatureExtractor, LossWeights};
pub use tensor::Tensor;

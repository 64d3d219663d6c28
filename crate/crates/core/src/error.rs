use std::path::PathBuf;

/// Errors raised by the inspection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("degenerate value range: every value equals {value}")]
    DegenerateRange { value: f32 },
    #[error("insufficient features: {found} matches, need at least 4")]
    InsufficientFeatures { found: usize },
    #[error("degenerate configuration: no non-collinear minimal sample found")]
    DegenerateConfiguration,
    #[error("no consensus: best inlier ratio {inlier_ratio:.3} below 0.2")]
    NoConsensus { inlier_ratio: f64 },
    #[error("registration quality too low: mean reprojection error {error_px:.3} px exceeds {ceiling_px} px")]
    RegistrationQuality { error_px: f64, ceiling_px: f64 },
    #[error("layer index {index} outside backbone depth {depth}")]
    LayerIndex { index: usize, depth: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("model for region {region_id} has no calibration range")]
    UncalibratedModel { region_id: String },
    #[error("no model bundle for region {region_id}")]
    MissingModel { region_id: String },
    #[error("metric undefined: {0} has a zero denominator")]
    UndefinedMetric(&'static str),
    #[error("ROC requires both classes, got only label {label}")]
    SingleClass { label: u8 },
    #[error("ground truth contains no positive pixels")]
    NoPositives,
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("anomalous image {image} has no matching mask")]
    MaskMismatch { image: PathBuf },
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

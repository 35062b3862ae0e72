//! Model-backend interfaces consumed by the pipeline and the evaluator.
//!
//! Backends exchange decoded images in memory; the pipeline owns persistence.
//! Each input image travels with its manifest-relative key so table-driven
//! mocks can look answers up without touching pixels.

mod http;
mod mock;

pub use http::{HttpBackend, HttpConfig};
pub use mock::{
    unit_hash, MockBackend, MockConfig, MockDetector, MockGenerator, MockInpainter, MockRaceClassifier,
    MockScorer, MockSegmenter, MockVqa, MockZeroShot, RelativeBox, ScoreOffset, VqaRule, VqaTableEntry,
};

use std::sync::Arc;

use image::{GrayImage, RgbImage};
use thiserror::Error;

use crate::dataset::{BoundingBox, DemographicGroup, VqaAnswer};

pub type VqaResult = VqaAnswer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("no face found in {0}")]
    NoFace(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("backend returned invalid output: {0}")]
    InvalidOutput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub const fn square(side: u32) -> Self {
        Self { width: side, height: side }
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self::square(1024)
    }
}

/// An image handed to a backend, keyed by its manifest-relative path.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub key: &'a str,
    pub image: &'a RgbImage,
}

/// Per-label cosine similarities, ordered like the label list.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector(pub Vec<f64>);

impl SimilarityVector {
    pub fn checked(values: Vec<f64>, expected_len: usize) -> Result<Self, AdapterError> {
        if values.len() != expected_len {
            return Err(AdapterError::InvalidOutput(format!(
                "expected {expected_len} similarities, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(AdapterError::InvalidOutput(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(Self(values))
    }
}

/// Joint log probability of each answer continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector(pub Vec<f64>);

impl LogProbVector {
    pub fn checked(values: Vec<f64>, expected_len: usize) -> Result<Self, AdapterError> {
        if values.len() != expected_len {
            return Err(AdapterError::InvalidOutput(format!(
                "expected {expected_len} log probabilities, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v > 0.0) {
            return Err(AdapterError::InvalidOutput(format!("log probability {v} must be finite and <= 0")));
        }
        Ok(Self(values))
    }
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64, size: ImageSize) -> Result<RgbImage, AdapterError>;
}

/// Regenerates the masked region (mask value 255) of `base` from `prompt`.
pub trait Inpainter: Send + Sync {
    fn inpaint(&self, base: ImageInput<'_>, mask: &GrayImage, prompt: &str, seed: u64) -> Result<RgbImage, AdapterError>;
}

pub trait VqaModel: Send + Sync {
    fn answer(&self, image: ImageInput<'_>, question: &str) -> Result<VqaResult, AdapterError>;
}

pub trait PersonDetector: Send + Sync {
    fn detect(&self, image: ImageInput<'_>, query: &str) -> Result<Vec<BoundingBox>, AdapterError>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: ImageInput<'_>, bbox: &BoundingBox) -> Result<GrayImage, AdapterError>;
}

/// Four-way perceived-race classifier. Fails with [`AdapterError::NoFace`]
/// when no face is found.
pub trait RaceClassifier: Send + Sync {
    fn classify(&self, image: ImageInput<'_>) -> Result<DemographicGroup, AdapterError>;
}

pub trait ZeroShotClassifier: Send + Sync {
    fn similarities(&self, image: ImageInput<'_>, label_texts: &[String]) -> Result<SimilarityVector, AdapterError>;
}

/// Scores answer continuations of a prompt template by summed token log
/// probabilities.
pub trait GenerativeScorer: Send + Sync {
    fn log_probs(
        &self,
        image: ImageInput<'_>,
        prompt_template: &str,
        answers: &[String],
    ) -> Result<LogProbVector, AdapterError>;
}

/// The backends the dataset pipeline needs.
#[derive(Clone)]
pub struct PipelineAdapters {
    pub generator: Arc<dyn ImageGenerator>,
    pub inpainter: Arc<dyn Inpainter>,
    pub vqa: Arc<dyn VqaModel>,
    pub detector: Arc<dyn PersonDetector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub race_classifier: Arc<dyn RaceClassifier>,
}

impl PipelineAdapters {
    pub fn mock(config: &MockConfig) -> Self {
        let backend = MockBackend::new(config.clone());
        Self {
            generator: Arc::new(backend.generator),
            inpainter: Arc::new(backend.inpainter),
            vqa: Arc::new(backend.vqa),
            detector: Arc::new(backend.detector),
            segmenter: Arc::new(backend.segmenter),
            race_classifier: Arc::new(backend.race_classifier),
        }
    }
}

//! Deterministic, table-driven mock backends.
//!
//! Every mock answer is a pure function of its configuration and inputs.
//! Where a table has no entry, values fall back to [`unit_hash`] of the
//! inputs so larger synthetic runs still show spread.
//!
//! Mock configuration file (JSON, every section optional):
//!
//! ```json
//! {
//!   "generator":       { "fail_seeds": [3], "grayscale_seeds": [5] },
//!   "inpainter":       { "fail_seeds": [], "fail_prompts_containing": [] },
//!   "vqa": {
//!     "table": [{ "image": "images/base/chef-00001.png", "question": "Is there a chef in this image?",
//!                 "answer": "yes", "score": 0.9 }],
//!     "rules": [{ "question_contains": "Is there a", "answer": "yes", "otherwise": "no", "rate": 0.9 }]
//!   },
//!   "detector":        { "boxes": { "<key>": [{"x0":0,"y0":0,"x1":8,"y1":8,"confidence":0.9}] },
//!                        "default_relative": [{"x0":0.25,"y0":0.1,"x1":0.75,"y1":1.0,"confidence":0.8}],
//!                        "empty_rate": 0.0 },
//!   "segmenter":       { "fail_keys": [] },
//!   "race_classifier": { "labels": { "<key>": "Black" }, "infer_from_ref": true,
//!                        "mismatch_rate": 0.0, "no_face_rate": 0.0 },
//!   "zero_shot":       { "vectors": { "<key>": [0.3, 0.1] }, "center": 0.2, "spread": 0.05,
//!                        "offsets": [{ "key_contains": "black", "label_contains": "line cook", "delta": 0.04 }] },
//!   "scorer":          { "token_log_probs": { "chef": [-1.0, -0.5] }, "default_token_log_prob": -5.0,
//!                        "jitter": 0.5 }
//! }
//! ```
//!
//! VQA lookups try the exact `(image, question)` table first, then the first
//! rule whose `question_contains` matches, and finally answer `("no", 0.5)`.

use std::collections::BTreeMap;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AdapterError, GenerativeScorer, ImageGenerator, ImageInput, ImageSize, Inpainter, LogProbVector,
    PersonDetector, RaceClassifier, Segmenter, SimilarityVector, VqaModel, VqaResult, ZeroShotClassifier,
};
use crate::dataset::{BoundingBox, DemographicGroup};

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

/// Uniform value in [0, 1) determined by `parts`.
pub fn unit_hash(parts: &[&str]) -> f64 {
    let d = digest(parts);
    let v = u64::from_le_bytes(d[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}

fn rng_for(parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(parts))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub generator: MockGenerator,
    pub inpainter: MockInpainter,
    pub vqa: MockVqa,
    pub detector: MockDetector,
    pub segmenter: MockSegmenter,
    pub race_classifier: MockRaceClassifier,
    pub zero_shot: MockZeroShot,
    pub scorer: MockScorer,
}

impl MockConfig {
    /// Defaults that let most images through every filter: Q1 yes for 90% of
    /// images, Q2 no for 90%, hashed Q3 realism scores, one centered person.
    pub fn permissive() -> Self {
        Self {
            vqa: MockVqa {
                table: Vec::new(),
                rules: vec![
                    VqaRule {
                        question_contains: "Is there a".into(),
                        answer: "yes".into(),
                        otherwise: Some("no".into()),
                        rate: 0.9,
                        score: None,
                    },
                    VqaRule {
                        question_contains: "limbs".into(),
                        answer: "no".into(),
                        otherwise: Some("yes".into()),
                        rate: 0.9,
                        score: None,
                    },
                    VqaRule {
                        question_contains: "real or fake".into(),
                        answer: "real".into(),
                        otherwise: None,
                        rate: 1.0,
                        score: None,
                    },
                ],
            },
            detector: MockDetector {
                default_relative: vec![RelativeBox { x0: 0.25, y0: 0.125, x1: 0.75, y1: 1.0, confidence: 0.8 }],
                ..MockDetector::default()
            },
            race_classifier: MockRaceClassifier { infer_from_ref: true, ..MockRaceClassifier::default() },
            ..Self::default()
        }
    }
}

/// All mocks built from one configuration.
pub struct MockBackend {
    pub generator: MockGenerator,
    pub inpainter: MockInpainter,
    pub vqa: MockVqa,
    pub detector: MockDetector,
    pub segmenter: MockSegmenter,
    pub race_classifier: MockRaceClassifier,
    pub zero_shot: MockZeroShot,
    pub scorer: MockScorer,
}

impl MockBackend {
    pub fn new(c: MockConfig) -> Self {
        Self {
            generator: c.generator,
            inpainter: c.inpainter,
            vqa: c.vqa,
            detector: c.detector,
            segmenter: c.segmenter,
            race_classifier: c.race_classifier,
            zero_shot: c.zero_shot,
            scorer: c.scorer,
        }
    }
}

/// Seed-keyed RGB noise; `(prompt, seed)` fully determines the pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockGenerator {
    pub fail_seeds: Vec<u64>,
    pub grayscale_seeds: Vec<u64>,
}

fn noise_image(prompt: &str, seed: u64, size: ImageSize, gray: bool) -> RgbImage {
    let mut rng = rng_for(&["generate", prompt, &seed.to_string()]);
    let mut img = RgbImage::new(size.width, size.height);
    for px in img.pixels_mut() {
        let v = rng.next_u32().to_le_bytes();
        *px = if gray { Rgb([v[0], v[0], v[0]]) } else { Rgb([v[0], v[1], v[2]]) };
    }
    img
}

impl ImageGenerator for MockGenerator {
    fn generate(&self, prompt: &str, seed: u64, size: ImageSize) -> Result<RgbImage, AdapterError> {
        if self.fail_seeds.contains(&seed) {
            return Err(AdapterError::Unavailable(format!("mock generator configured to fail seed {seed}")));
        }
        Ok(noise_image(prompt, seed, size, self.grayscale_seeds.contains(&seed)))
    }
}

/// Copies unmasked pixels from the base and fills masked pixels with the
/// generator's noise for `(prompt, seed)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockInpainter {
    pub fail_seeds: Vec<u64>,
    pub fail_prompts_containing: Vec<String>,
}

impl Inpainter for MockInpainter {
    fn inpaint(&self, base: ImageInput<'_>, mask: &GrayImage, prompt: &str, seed: u64) -> Result<RgbImage, AdapterError> {
        if mask.dimensions() != base.image.dimensions() {
            return Err(AdapterError::Precondition(format!(
                "mask {:?} does not match image {:?}",
                mask.dimensions(),
                base.image.dimensions()
            )));
        }
        if self.fail_seeds.contains(&seed) || self.fail_prompts_containing.iter().any(|s| prompt.contains(s.as_str())) {
            return Err(AdapterError::Unavailable(format!("mock inpainter configured to fail {prompt:?}")));
        }
        let (w, h) = base.image.dimensions();
        let fill = noise_image(prompt, seed, ImageSize { width: w, height: h }, false);
        let mut out = base.image.clone();
        for (x, y, m) in mask.enumerate_pixels() {
            if m[0] >= 128 {
                out.put_pixel(x, y, *fill.get_pixel(x, y));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaTableEntry {
    pub image: String,
    pub question: String,
    pub answer: String,
    pub score: f64,
}

/// Fallback answer for questions containing `question_contains`. The image
/// answers `answer` when its hash falls below `rate`, else `otherwise`. A
/// missing `score` is drawn from the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRule {
    pub question_contains: String,
    pub answer: String,
    #[serde(default)]
    pub otherwise: Option<String>,
    #[serde(default = "one")]
    pub rate: f64,
    #[serde(default)]
    pub score: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockVqa {
    pub table: Vec<VqaTableEntry>,
    pub rules: Vec<VqaRule>,
}

impl VqaModel for MockVqa {
    fn answer(&self, image: ImageInput<'_>, question: &str) -> Result<VqaResult, AdapterError> {
        if let Some(e) = self.table.iter().find(|e| e.image == image.key && e.question == question) {
            return Ok(VqaResult { answer: e.answer.clone(), score: e.score });
        }
        if let Some(rule) = self.rules.iter().find(|r| question.contains(r.question_contains.as_str())) {
            let draw = unit_hash(&["vqa-answer", image.key, question]);
            let answer = match (&rule.otherwise, draw < rule.rate) {
                (Some(other), false) => other.clone(),
                _ => rule.answer.clone(),
            };
            let score = rule.score.unwrap_or_else(|| unit_hash(&["vqa-score", image.key, question]));
            return Ok(VqaResult { answer, score });
        }
        Ok(VqaResult { answer: "no".into(), score: 0.5 })
    }
}

/// Box expressed as fractions of the image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockDetector {
    pub boxes: BTreeMap<String, Vec<BoundingBox>>,
    pub default_relative: Vec<RelativeBox>,
    pub empty_rate: f64,
}

impl PersonDetector for MockDetector {
    fn detect(&self, image: ImageInput<'_>, query: &str) -> Result<Vec<BoundingBox>, AdapterError> {
        if query.trim().is_empty() {
            return Err(AdapterError::Precondition("detector query must be nonempty".into()));
        }
        if let Some(b) = self.boxes.get(image.key) {
            return Ok(b.clone());
        }
        if unit_hash(&["detect-empty", image.key]) < self.empty_rate {
            return Ok(Vec::new());
        }
        let (w, h) = image.image.dimensions();
        let (w, h) = (w as f64, h as f64);
        Ok(self
            .default_relative
            .iter()
            .map(|r| BoundingBox::new((r.x0 * w).round(), (r.y0 * h).round(), (r.x1 * w).round(), (r.y1 * h).round(), r.confidence))
            .collect())
    }
}

/// Fills the box rectangle with 255.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSegmenter {
    pub fail_keys: Vec<String>,
}

impl Segmenter for MockSegmenter {
    fn segment(&self, image: ImageInput<'_>, bbox: &BoundingBox) -> Result<GrayImage, AdapterError> {
        let (w, h) = image.image.dimensions();
        if bbox.is_degenerate() {
            return Err(AdapterError::Precondition(format!("degenerate box {bbox:?}")));
        }
        if !bbox.within(w, h) {
            return Err(AdapterError::Precondition(format!("box {bbox:?} outside {w}x{h} image")));
        }
        if self.fail_keys.iter().any(|k| k == image.key) {
            return Err(AdapterError::Unavailable(format!("mock segmenter configured to fail {}", image.key)));
        }
        let mut mask = GrayImage::new(w, h);
        let (x0, y0) = (bbox.x0.floor() as u32, bbox.y0.floor() as u32);
        let (x1, y1) = ((bbox.x1.ceil() as u32).min(w), (bbox.y1.ceil() as u32).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                mask.put_pixel(x, y, Luma([255]));
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockRaceClassifier {
    pub labels: BTreeMap<String, DemographicGroup>,
    /// Read the group from a `.../<group file stem>.png` image key.
    pub infer_from_ref: bool,
    pub mismatch_rate: f64,
    pub no_face_rate: f64,
}

fn group_in_key(key: &str) -> Option<DemographicGroup> {
    let stem = key.rsplit('/').next()?.strip_suffix(".png")?;
    DemographicGroup::ALL.into_iter().find(|g| g.file_stem() == stem)
}

impl RaceClassifier for MockRaceClassifier {
    fn classify(&self, image: ImageInput<'_>) -> Result<DemographicGroup, AdapterError> {
        if let Some(g) = self.labels.get(image.key) {
            return Ok(*g);
        }
        if !self.infer_from_ref {
            return Err(AdapterError::NoFace(image.key.to_string()));
        }
        if unit_hash(&["race-noface", image.key]) < self.no_face_rate {
            return Err(AdapterError::NoFace(image.key.to_string()));
        }
        let group = group_in_key(image.key).ok_or_else(|| AdapterError::NoFace(image.key.to_string()))?;
        if unit_hash(&["race-mismatch", image.key]) < self.mismatch_rate {
            let i = DemographicGroup::ALL.iter().position(|g| *g == group).unwrap();
            return Ok(DemographicGroup::ALL[(i + 1) % DemographicGroup::ALL.len()]);
        }
        Ok(group)
    }
}

/// Similarity adjustment applied when both substrings match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOffset {
    #[serde(default)]
    pub key_contains: Option<String>,
    pub label_contains: String,
    pub delta: f64,
}

/// Fixed vectors per image key, else `center + spread * (u - 0.5)` plus
/// matching offsets, clamped to [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockZeroShot {
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub center: f64,
    pub spread: f64,
    pub offsets: Vec<ScoreOffset>,
}

impl Default for MockZeroShot {
    fn default() -> Self {
        Self { vectors: BTreeMap::new(), center: 0.2, spread: 0.05, offsets: Vec::new() }
    }
}

impl ZeroShotClassifier for MockZeroShot {
    fn similarities(&self, image: ImageInput<'_>, label_texts: &[String]) -> Result<SimilarityVector, AdapterError> {
        if label_texts.is_empty() {
            return Err(AdapterError::Precondition("label list must be nonempty".into()));
        }
        if let Some(v) = self.vectors.get(image.key) {
            return SimilarityVector::checked(v.clone(), label_texts.len());
        }
        let values = label_texts
            .iter()
            .map(|label| {
                let mut s = self.center + self.spread * (unit_hash(&["zero-shot", image.key, label]) - 0.5);
                for o in &self.offsets {
                    let key_ok = o.key_contains.as_deref().is_none_or(|k| image.key.contains(k));
                    if key_ok && label.contains(o.label_contains.as_str()) {
                        s += o.delta;
                    }
                }
                s.clamp(-1.0, 1.0)
            })
            .collect();
        SimilarityVector::checked(values, label_texts.len())
    }
}

/// Joint log probability = sum of configured token log probabilities. Answers
/// without a table entry get `default_token_log_prob` per whitespace token,
/// lowered by up to `jitter` from the hash of the image and answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScorer {
    pub token_log_probs: BTreeMap<String, Vec<f64>>,
    pub default_token_log_prob: f64,
    pub jitter: f64,
}

impl Default for MockScorer {
    fn default() -> Self {
        Self { token_log_probs: BTreeMap::new(), default_token_log_prob: -5.0, jitter: 0.0 }
    }
}

impl GenerativeScorer for MockScorer {
    fn log_probs(
        &self,
        image: ImageInput<'_>,
        prompt_template: &str,
        answers: &[String],
    ) -> Result<LogProbVector, AdapterError> {
        if answers.is_empty() {
            return Err(AdapterError::Precondition("answer list must be nonempty".into()));
        }
        let values = answers
            .iter()
            .map(|a| match self.token_log_probs.get(a) {
                Some(tokens) => tokens.iter().sum(),
                None => {
                    let n = a.split_whitespace().count().max(1) as f64;
                    let jitter = self.jitter * unit_hash(&["scorer", image.key, prompt_template, a]);
                    n * self.default_token_log_prob - jitter
                }
            })
            .collect();
        LogProbVector::checked(values, answers.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input<'a>(key: &'a str, img: &'a RgbImage) -> ImageInput<'a> {
        ImageInput { key, image: img }
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let g = MockGenerator::default();
        let size = ImageSize::square(64);
        let a = g.generate("p", 7, size).unwrap();
        let b = g.generate("p", 7, size).unwrap();
        let c = g.generate("p", 8, size).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        assert_ne!(a.as_raw(), c.as_raw());
        assert_eq!(a.dimensions(), (64, 64));
    }

    #[test]
    fn generator_fails_configured_seeds() {
        let g = MockGenerator { fail_seeds: vec![3], ..Default::default() };
        assert!(matches!(g.generate("p", 3, ImageSize::square(4)), Err(AdapterError::Unavailable(_))));
    }

    #[test]
    fn inpaint_empty_mask_is_identity() {
        let base = MockGenerator::default().generate("base", 1, ImageSize::square(32)).unwrap();
        let mask = GrayImage::new(32, 32);
        let out = MockInpainter::default().inpaint(input("b", &base), &mask, "new", 9).unwrap();
        assert_eq!(out.as_raw(), base.as_raw());
    }

    #[test]
    fn inpaint_full_mask_regenerates_from_prompt_and_seed() {
        let size = ImageSize::square(32);
        let base = MockGenerator::default().generate("base", 1, size).unwrap();
        let mask = GrayImage::from_pixel(32, 32, Luma([255]));
        let out = MockInpainter::default().inpaint(input("b", &base), &mask, "new", 9).unwrap();
        let fresh = MockGenerator::default().generate("new", 9, size).unwrap();
        assert_eq!(out.as_raw(), fresh.as_raw());
    }

    #[test]
    fn inpaint_half_mask_preserves_unmasked_half() {
        let base = MockGenerator::default().generate("base", 1, ImageSize::square(32)).unwrap();
        let mut mask = GrayImage::new(32, 32);
        for y in 0..32 {
            for x in 16..32 {
                mask.put_pixel(x, y, Luma([255]));
            }
        }
        let out = MockInpainter::default().inpaint(input("b", &base), &mask, "new", 9).unwrap();
        let mut changed = 0;
        for y in 0..32 {
            for x in 0..32 {
                if x < 16 {
                    assert_eq!(out.get_pixel(x, y), base.get_pixel(x, y));
                } else if out.get_pixel(x, y) != base.get_pixel(x, y) {
                    changed += 1;
                }
            }
        }
        assert!(changed > 400, "masked half should be regenerated, {changed} changed");
    }

    #[test]
    fn inpaint_rejects_resolution_mismatch() {
        let base = RgbImage::new(8, 8);
        let mask = GrayImage::new(4, 8);
        let err = MockInpainter::default().inpaint(input("b", &base), &mask, "p", 1).unwrap_err();
        assert!(matches!(err, AdapterError::Precondition(_)));
    }

    #[test]
    fn vqa_table_and_default() {
        let img = RgbImage::new(1, 1);
        let vqa = MockVqa {
            table: vec![VqaTableEntry { image: "img1".into(), question: "Q1".into(), answer: "yes".into(), score: 0.9 }],
            rules: vec![],
        };
        assert_eq!(vqa.answer(input("img1", &img), "Q1").unwrap(), VqaResult { answer: "yes".into(), score: 0.9 });
        assert_eq!(vqa.answer(input("other", &img), "Q1").unwrap(), VqaResult { answer: "no".into(), score: 0.5 });
    }

    #[test]
    fn vqa_rule_scores_stay_in_unit_interval() {
        let img = RgbImage::new(1, 1);
        let vqa = MockConfig::permissive().vqa;
        for i in 0..200 {
            let r = vqa.answer(input(&format!("k{i}"), &img), "Is this image real or fake?").unwrap();
            assert!((0.0..=1.0).contains(&r.score));
            assert_eq!(r.answer, "real");
        }
    }

    #[test]
    fn detector_table_and_empty() {
        let img = RgbImage::new(16, 16);
        let centered = BoundingBox::new(4.0, 4.0, 12.0, 12.0, 0.9);
        let mut d = MockDetector::default();
        d.boxes.insert("a".into(), vec![centered]);
        d.boxes.insert("b".into(), vec![]);
        assert_eq!(d.detect(input("a", &img), "person").unwrap(), vec![centered]);
        assert!(d.detect(input("b", &img), "person").unwrap().is_empty());
        assert!(d.detect(input("a", &img), " ").is_err());
    }

    #[test]
    fn segmenter_fills_box() {
        let img = RgbImage::new(16, 16);
        let s = MockSegmenter::default();
        let full = s.segment(input("a", &img), &BoundingBox::new(0.0, 0.0, 16.0, 16.0, 1.0)).unwrap();
        assert!(full.pixels().all(|p| p[0] == 255));
        let quarter = s.segment(input("a", &img), &BoundingBox::new(0.0, 0.0, 8.0, 8.0, 1.0)).unwrap();
        let on = quarter.pixels().filter(|p| p[0] == 255).count();
        assert_eq!(on, 64);
        assert!(quarter.pixels().all(|p| p[0] == 0 || p[0] == 255));
        assert!(s.segment(input("a", &img), &BoundingBox::new(3.0, 3.0, 3.0, 9.0, 1.0)).is_err());
        assert!(s.segment(input("a", &img), &BoundingBox::new(0.0, 0.0, 17.0, 9.0, 1.0)).is_err());
    }

    #[test]
    fn race_classifier_table_inference_and_no_face() {
        let img = RgbImage::new(1, 1);
        let mut c = MockRaceClassifier::default();
        c.labels.insert("x".into(), DemographicGroup::Indian);
        assert_eq!(c.classify(input("x", &img)).unwrap(), DemographicGroup::Indian);
        assert!(matches!(c.classify(input("y", &img)), Err(AdapterError::NoFace(_))));
        c.infer_from_ref = true;
        assert_eq!(
            c.classify(input("images/variants/set-1/east_asian.png", &img)).unwrap(),
            DemographicGroup::EastAsian
        );
    }

    #[test]
    fn zero_shot_fixed_and_hashed() {
        let img = RgbImage::new(1, 1);
        let mut z = MockZeroShot::default();
        z.vectors.insert("k".into(), vec![0.3, -0.2]);
        let labels = vec!["A photo of a chef".to_string(), "A photo of a waiter".to_string()];
        assert_eq!(z.similarities(input("k", &img), &labels).unwrap().0, vec![0.3, -0.2]);
        let v = z.similarities(input("other", &img), &labels).unwrap();
        assert_eq!(v.0.len(), 2);
        assert!(v.0.iter().all(|s| (-1.0..=1.0).contains(s)));
        assert!(z.similarities(input("k", &img), &labels[..1]).is_err());
    }

    #[test]
    fn scorer_sums_token_log_probs() {
        let img = RgbImage::new(1, 1);
        let mut s = MockScorer::default();
        s.token_log_probs.insert("chef".into(), vec![-1.0, -0.5]);
        s.token_log_probs.insert("waiter".into(), vec![-2.0]);
        let out = s.log_probs(input("k", &img), "t", &["chef".into(), "waiter".into()]).unwrap();
        assert_eq!(out.0, vec![-1.5, -2.0]);
    }
}

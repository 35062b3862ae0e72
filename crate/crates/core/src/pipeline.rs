//! Staged dataset construction: generate, VQA filter, top-k selection,
//! grayscale filter, person masks, inpainted variants, attribute filter and
//! per-occupation sampling.
//!
//! Stages run in a fixed order. Within a stage records are processed on a
//! bounded worker pool and collected in input order, so the manifest bytes do
//! not depend on scheduling. A record is written to the manifest once, at the
//! stage where its state becomes final: when it is dropped, or when it
//! survives the last stage of a phase. Every stage also writes one drop record
//! per rejected input and a yield record per occupation.
//!
//! The base phase (generate through mask) and the perturb phase (perturb
//! through sample) can run separately; the perturb phase rebuilds its input
//! from the base-phase manifest.
//!
//! Files under the output root:
//!
//! | path | content |
//! |------|---------|
//! | `images/base/{base_id}.png` | generated base image |
//! | `masks/{base_id}.png` | single-channel person mask, values {0, 255} |
//! | `images/variants/{set_id}/{group}.png` | inpainted variant |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{AdapterError, ImageInput, ImageSize, PipelineAdapters};
use crate::dataset::{
    default_occupations, is_no, is_yes, set_id_for, validate_occupations, validate_set, BaseImageRecord,
    DemographicGroup, DropReason, DropRecord, Gender, Manifest, ManifestEntry, ManifestError, ManifestHeader,
    MaskRecord, OccupationSpec, PerturbationSet, Record, Stage, StageYield, Variant, VqaAnswer, GROUP_COUNT,
};
use crate::prompting::{build_base_prompt, build_perturbed_prompt, vqa_q1, PERSON_QUERY, VQA_Q2, VQA_Q3};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderMode {
    #[default]
    Unspecified,
    /// Half of every quota per gender, with the gender named in the prompt.
    Balanced,
}

impl GenderMode {
    fn genders(self) -> Vec<Option<Gender>> {
        match self {
            GenderMode::Unspecified => vec![None],
            GenderMode::Balanced => Gender::BOTH.iter().copied().map(Some).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrayscaleRule {
    /// Largest max-min channel spread for a pixel to count as gray.
    pub max_spread: u8,
    /// Fraction of gray pixels at which the image is grayscale.
    pub min_fraction: f64,
}

impl Default for GrayscaleRule {
    fn default() -> Self {
        Self { max_spread: 8, min_fraction: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub occupations: Vec<OccupationSpec>,
    pub images_per_occupation: usize,
    pub top_k: usize,
    pub sets_per_occupation: usize,
    pub gender_mode: GenderMode,
    pub seed: u64,
    pub grayscale: GrayscaleRule,
    pub box_threshold: f64,
    pub image_size: ImageSize,
    /// Worker threads per stage; 0 uses one per core. Not part of the config hash.
    pub workers: usize,
    /// Opaque settings forwarded to remote backends.
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub backend_params: serde_json::Value,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            occupations: default_occupations(),
            images_per_occupation: 5000,
            top_k: 2000,
            sets_per_occupation: 1200,
            gender_mode: GenderMode::Unspecified,
            seed: 0,
            grayscale: GrayscaleRule::default(),
            box_threshold: 0.35,
            image_size: ImageSize::default(),
            workers: 0,
            backend_params: serde_json::Value::Null,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.occupations.is_empty() {
            return bad("occupations must be nonempty".into());
        }
        if let Some(v) = validate_occupations(&self.occupations).into_iter().next() {
            return bad(format!("occupation {v}"));
        }
        if self.images_per_occupation == 0 {
            return bad("images_per_occupation must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.images_per_occupation {
            return bad(format!(
                "top_k ({}) must lie in 1..=images_per_occupation ({})",
                self.top_k, self.images_per_occupation
            ));
        }
        if self.sets_per_occupation == 0 || self.sets_per_occupation > self.top_k {
            return bad(format!("sets_per_occupation ({}) must lie in 1..=top_k ({})", self.sets_per_occupation, self.top_k));
        }
        if self.gender_mode == GenderMode::Balanced {
            for (name, v) in [
                ("images_per_occupation", self.images_per_occupation),
                ("top_k", self.top_k),
                ("sets_per_occupation", self.sets_per_occupation),
            ] {
                if v % 2 != 0 {
                    return bad(format!("{name} ({v}) must be even in balanced gender mode"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.box_threshold) {
            return bad(format!("box_threshold ({}) must lie in [0, 1]", self.box_threshold));
        }
        if !(self.grayscale.min_fraction > 0.0 && self.grayscale.min_fraction <= 1.0) {
            return bad(format!("grayscale.min_fraction ({}) must lie in (0, 1]", self.grayscale.min_fraction));
        }
        if self.image_size.width == 0 || self.image_size.height == 0 {
            return bad("image_size must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `workers`.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn occupation(&self, name: &str) -> Option<&OccupationSpec> {
        self.occupations.iter().find(|o| o.name == name)
    }
}

/// Images in the final dataset for a config.
pub fn expected_dataset_images(config: &PipelineConfig) -> usize {
    config.sets_per_occupation * GROUP_COUNT * config.occupations.len()
}

/// Seed for an independent random stream keyed by `parts`.
pub fn derive_seed(base_seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage}: no survivors for occupation {occupation}")]
    NoSurvivors { stage: Stage, occupation: String },
    #[error("stage {stage}: occupation {occupation} produced {got} images, need at least {need}")]
    InsufficientYield { stage: Stage, occupation: String, got: usize, need: usize },
    #[error("stage {stage}: backend failed for every {occupation} record: {source}")]
    Adapter {
        stage: Stage,
        occupation: String,
        #[source]
        source: AdapterError,
    },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("manifest was produced by config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("manifest is missing {0}")]
    MissingRecord(String),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::NoSurvivors { stage, .. }
            | PipelineError::InsufficientYield { stage, .. }
            | PipelineError::Adapter { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Everything a stage needs besides its input records.
pub struct StageContext<'a> {
    pub config: &'a PipelineConfig,
    pub adapters: &'a PipelineAdapters,
    pub root: &'a Path,
    pub pool: &'a ThreadPool,
}

impl StageContext<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn load_rgb(&self, rel: &str) -> Result<RgbImage, String> {
        image::open(self.path(rel)).map(|i| i.to_rgb8()).map_err(|e| format!("{rel}: {e}"))
    }

    fn save<P, C>(&self, rel: &str, img: &image::ImageBuffer<P, C>) -> Result<(), PipelineError>
    where
        P: image::PixelWithColorType,
        [P::Subpixel]: image::EncodableLayout,
        C: std::ops::Deref<Target = [P::Subpixel]>,
    {
        let path = self.path(rel);
        let io = |m: String| PipelineError::Io { path: path.display().to_string(), message: m };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io(e.to_string()))?;
        }
        img.save_with_format(&path, image::ImageFormat::Png).map_err(|e| io(e.to_string()))
    }
}

pub fn build_pool(workers: usize) -> Result<ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

/// Result of one stage for one occupation.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub stage: Stage,
    pub occupation: String,
    pub input: usize,
    pub kept: Vec<T>,
    /// Records whose state is final at this stage.
    pub finalized: Vec<Record>,
    pub drops: Vec<DropRecord>,
    pub warnings: Vec<String>,
    /// First backend error among the drops, if any.
    pub backend_error: Option<AdapterError>,
}

impl<T> StageOutcome<T> {
    fn new(stage: Stage, occupation: &str, input: usize) -> Self {
        Self {
            stage,
            occupation: occupation.to_string(),
            input,
            kept: Vec::new(),
            finalized: Vec::new(),
            drops: Vec::new(),
            warnings: Vec::new(),
            backend_error: None,
        }
    }

    fn drop(&mut self, subject: &str, reason: DropReason, detail: impl Into<String>) {
        self.drops.push(DropRecord::new(self.stage, &self.occupation, subject, reason, detail));
    }

    fn backend_drop(&mut self, subject: &str, err: AdapterError) {
        self.drop(subject, DropReason::BackendError, err.to_string());
        self.backend_error.get_or_insert(err);
    }

    pub fn stage_yield(&self) -> StageYield {
        let mut drop_reasons = BTreeMap::new();
        for d in &self.drops {
            *drop_reasons.entry(d.reason).or_insert(0) += 1;
        }
        StageYield {
            yield_id: format!("{}:{}", self.stage, self.occupation),
            occupation: self.occupation.clone(),
            input: self.input,
            kept: self.kept.len(),
            dropped: self.drops.len(),
            drop_reasons,
            warnings: self.warnings.clone(),
        }
    }

    /// Abort when nothing survives, reporting a backend outage distinctly.
    fn require_survivors(&self) -> Result<(), PipelineError> {
        if !self.kept.is_empty() {
            return Ok(());
        }
        let all_backend = !self.drops.is_empty() && self.drops.iter().all(|d| d.reason == DropReason::BackendError);
        match (&self.backend_error, all_backend) {
            (Some(AdapterError::Unavailable(_) | AdapterError::Timeout(_)), true) => Err(PipelineError::Adapter {
                stage: self.stage,
                occupation: self.occupation.clone(),
                source: self.backend_error.clone().expect("checked"),
            }),
            _ => Err(PipelineError::NoSurvivors { stage: self.stage, occupation: self.occupation.clone() }),
        }
    }
}

pub fn base_image_ref(base_id: &str) -> String {
    format!("images/base/{base_id}.png")
}

pub fn mask_ref(base_id: &str) -> String {
    format!("masks/{base_id}.png")
}

pub fn variant_ref(set_id: &str, group: DemographicGroup) -> String {
    format!("images/variants/{set_id}/{}.png", group.file_stem())
}

/// Stage A: one image per index, seeds `seed + i`.
pub fn stage_generate(
    ctx: &StageContext<'_>,
    occupation: &OccupationSpec,
) -> Result<StageOutcome<BaseImageRecord>, PipelineError> {
    let cfg = ctx.config;
    let n = cfg.images_per_occupation;
    let genders = cfg.gender_mode.genders();
    let per_gender = n / genders.len();
    let jobs: Vec<(usize, Option<Gender>)> = (0..n).map(|i| (i, genders[(i / per_gender).min(genders.len() - 1)])).collect();
    let results: Vec<Result<Result<BaseImageRecord, (String, AdapterError)>, PipelineError>> = ctx.pool.install(|| {
        jobs.par_iter()
            .map(|&(i, gender)| {
                let base_id = match gender {
                    Some(g) => format!("{}-{}-{i:05}", occupation.name, g.as_str()),
                    None => format!("{}-{i:05}", occupation.name),
                };
                let prompt = build_base_prompt(occupation, gender);
                let seed = cfg.seed.wrapping_add(i as u64);
                match ctx.adapters.generator.generate(&prompt, seed, cfg.image_size) {
                    Ok(img) => {
                        let image_ref = base_image_ref(&base_id);
                        ctx.save(&image_ref, &img)?;
                        Ok(Ok(BaseImageRecord {
                            base_id,
                            occupation: occupation.name.clone(),
                            gender,
                            prompt,
                            seed,
                            image_ref,
                            vqa_q1: None,
                            vqa_q2: None,
                            vqa_q3_score: None,
                            grayscale: None,
                            selected: false,
                        }))
                    }
                    Err(e) => Ok(Err((base_id, e))),
                }
            })
            .collect()
    });
    let mut out = StageOutcome::new(Stage::Generate, &occupation.name, n);
    for r in results {
        match r? {
            Ok(rec) => out.kept.push(rec),
            Err((id, e)) => out.backend_drop(&id, e),
        }
    }
    out.require_survivors()?;
    if out.kept.len() < cfg.top_k {
        return Err(PipelineError::InsufficientYield {
            stage: Stage::Generate,
            occupation: occupation.name.clone(),
            got: out.kept.len(),
            need: cfg.top_k,
        });
    }
    Ok(out)
}

/// Realism score: confidence in "real"; a "fake" answer scores one minus its
/// confidence, any other answer scores 0.
pub fn q3_real_score(answer: &VqaAnswer) -> f64 {
    let a = answer.answer.trim().to_ascii_lowercase();
    let s = answer.score.clamp(0.0, 1.0);
    if a.starts_with("real") {
        s
    } else if a.starts_with("fake") {
        1.0 - s
    } else {
        0.0
    }
}

/// Stage B: keep iff Q1 is yes and Q2 is no. All three answers are recorded.
pub fn stage_vqa_filter(
    ctx: &StageContext<'_>,
    occupation: &OccupationSpec,
    records: Vec<BaseImageRecord>,
) -> Result<StageOutcome<BaseImageRecord>, PipelineError> {
    let q1 = vqa_q1(occupation);
    let vqa = &ctx.adapters.vqa;
    let input = records.len();
    let results: Vec<(BaseImageRecord, Option<Result<(), String>>, Option<AdapterError>)> = ctx.pool.install(|| {
        records
            .into_par_iter()
            .map(|mut rec| {
                let img = match ctx.load_rgb(&rec.image_ref) {
                    Ok(i) => i,
                    Err(e) => return (rec, Some(Err(e)), None),
                };
                let input = ImageInput { key: &rec.image_ref, image: &img };
                let answers = vqa
                    .answer(input, &q1)
                    .and_then(|a1| vqa.answer(input, VQA_Q2).map(|a2| (a1, a2)))
                    .and_then(|(a1, a2)| vqa.answer(input, VQA_Q3).map(|a3| (a1, a2, a3)));
                match answers {
                    Ok((a1, a2, a3)) => {
                        rec.vqa_q3_score = Some(q3_real_score(&a3));
                        rec.vqa_q1 = Some(VqaAnswer { score: a1.score.clamp(0.0, 1.0), ..a1 });
                        rec.vqa_q2 = Some(VqaAnswer { score: a2.score.clamp(0.0, 1.0), ..a2 });
                        (rec, None, None)
                    }
                    Err(e) => (rec, None, Some(e)),
                }
            })
            .collect()
    });
    let mut out = StageOutcome::new(Stage::VqaFilter, &occupation.name, input);
    for (rec, unreadable, err) in results {
        if let Some(Err(e)) = unreadable {
            out.drop(&rec.base_id, DropReason::Unreadable, e);
            out.finalized.push(Record::BaseImage(rec));
        } else if let Some(e) = err {
            out.backend_drop(&rec.base_id, e);
            out.finalized.push(Record::BaseImage(rec));
        } else {
            let a1 = rec.vqa_q1.as_ref().expect("set above");
            let a2 = rec.vqa_q2.as_ref().expect("set above");
            if !is_yes(&a1.answer) {
                out.drop(&rec.base_id, DropReason::Q1NotYes, format!("Q1 answered {:?}", a1.answer));
                out.finalized.push(Record::BaseImage(rec));
            } else if !is_no(&a2.answer) {
                out.drop(&rec.base_id, DropReason::Q2NotNo, format!("Q2 answered {:?}", a2.answer));
                out.finalized.push(Record::BaseImage(rec));
            } else {
                out.kept.push(rec);
            }
        }
    }
    out.require_survivors()?;
    Ok(out)
}

/// Stage C: the `k` highest realism scores, ties by ascending base id. In
/// balanced mode `k` is split evenly across genders.
pub fn stage_select_topk(
    occupation: &str,
    records: Vec<BaseImageRecord>,
    k: usize,
    gender_mode: GenderMode,
) -> Result<StageOutcome<BaseImageRecord>, PipelineError> {
    let mut out = StageOutcome::new(Stage::SelectTopK, occupation, records.len());
    let genders = gender_mode.genders();
    let quota = k / genders.len();
    let mut rest = records;
    for gender in genders {
        let (mut pool, others): (Vec<_>, Vec<_>) = rest.into_iter().partition(|r| gender.is_none() || r.gender == gender);
        rest = others;
        pool.sort_by(|a, b| {
            let (sa, sb) = (a.vqa_q3_score.unwrap_or(0.0), b.vqa_q3_score.unwrap_or(0.0));
            sb.total_cmp(&sa).then_with(|| a.base_id.cmp(&b.base_id))
        });
        if pool.len() < quota {
            let who = gender.map(|g| format!(" {}", g.as_str())).unwrap_or_default();
            out.warnings.push(format!("only {}{who} images for top {quota}; keeping all", pool.len()));
        }
        for (i, rec) in pool.into_iter().enumerate() {
            if i < quota {
                out.kept.push(rec);
            } else {
                out.drop(&rec.base_id, DropReason::BelowTopK, format!("rank {} of quota {quota}", i + 1));
                out.finalized.push(Record::BaseImage(rec));
            }
        }
    }
    out.kept.sort_by(|a, b| a.base_id.cmp(&b.base_id));
    out.require_survivors()?;
    Ok(out)
}

/// True iff at least `min_fraction` of pixels have a channel spread of at most
/// `max_spread`.
pub fn is_grayscale(img: &RgbImage, rule: &GrayscaleRule) -> bool {
    let total = img.width() as u64 * img.height() as u64;
    if total == 0 {
        return true;
    }
    let gray = img
        .pixels()
        .filter(|p| {
            let [r, g, b] = p.0;
            r.max(g).max(b) - r.min(g).min(b) <= rule.max_spread
        })
        .count() as u64;
    gray as f64 >= rule.min_fraction * total as f64
}

/// Stage D: drop grayscale and unreadable images; survivors are selected.
pub fn stage_grayscale_filter(
    ctx: &StageContext<'_>,
    occupation: &str,
    records: Vec<BaseImageRecord>,
) -> Result<StageOutcome<BaseImageRecord>, PipelineError> {
    let rule = ctx.config.grayscale;
    let input = records.len();
    let results: Vec<(BaseImageRecord, Result<bool, String>)> = ctx.pool.install(|| {
        records
            .into_par_iter()
            .map(|rec| {
                let gray = ctx.load_rgb(&rec.image_ref).map(|img| is_grayscale(&img, &rule));
                (rec, gray)
            })
            .collect()
    });
    let mut out = StageOutcome::new(Stage::GrayscaleFilter, occupation, input);
    for (mut rec, gray) in results {
        match gray {
            Err(e) => {
                out.drop(&rec.base_id, DropReason::Unreadable, e);
                out.finalized.push(Record::BaseImage(rec));
            }
            Ok(true) => {
                rec.grayscale = Some(true);
                out.drop(&rec.base_id, DropReason::Grayscale, "grayscale by channel-spread rule");
                out.finalized.push(Record::BaseImage(rec));
            }
            Ok(false) => {
                rec.grayscale = Some(false);
                rec.selected = true;
                out.kept.push(rec);
            }
        }
    }
    out.require_survivors()?;
    Ok(out)
}

/// Pixelwise union of segment masks; any value of 128 or more counts as set.
pub fn union_masks(width: u32, height: u32, masks: &[GrayImage]) -> GrayImage {
    let mut out = GrayImage::new(width, height);
    for m in masks {
        for (x, y, p) in m.enumerate_pixels() {
            if p.0[0] >= 128 && x < width && y < height {
                out.put_pixel(x, y, Luma([255]));
            }
        }
    }
    out
}

enum MaskResult {
    Ok(Box<MaskRecord>),
    Drop(DropReason, String),
    Backend(AdapterError),
}

/// Stage E: person boxes at or above the confidence threshold, clipped to the
/// image, each segmented; the mask is the union of the segments.
pub fn stage_mask(
    ctx: &StageContext<'_>,
    occupation: &str,
    records: Vec<BaseImageRecord>,
) -> Result<StageOutcome<(BaseImageRecord, MaskRecord)>, PipelineError> {
    let threshold = ctx.config.box_threshold;
    let input = records.len();
    let results: Vec<Result<(BaseImageRecord, MaskResult), PipelineError>> = ctx.pool.install(|| {
        records
            .into_par_iter()
            .map(|rec| {
                let img = match ctx.load_rgb(&rec.image_ref) {
                    Ok(i) => i,
                    Err(e) => return Ok((rec, MaskResult::Drop(DropReason::Unreadable, e))),
                };
                let (w, h) = img.dimensions();
                let input = ImageInput { key: &rec.image_ref, image: &img };
                let boxes = match ctx.adapters.detector.detect(input, PERSON_QUERY) {
                    Ok(b) => b,
                    Err(e) => return Ok((rec, MaskResult::Backend(e))),
                };
                let boxes: Vec<_> = boxes
                    .into_iter()
                    .filter(|b| b.confidence >= threshold)
                    .map(|b| b.clipped(w, h))
                    .filter(|b| !b.is_degenerate())
                    .collect();
                if boxes.is_empty() {
                    return Ok((rec, MaskResult::Drop(DropReason::NoPersonDetected, format!("no box with confidence >= {threshold}"))));
                }
                let mut segments = Vec::with_capacity(boxes.len());
                for b in &boxes {
                    match ctx.adapters.segmenter.segment(input, b) {
                        Ok(m) if m.dimensions() == (w, h) => segments.push(m),
                        Ok(m) => {
                            let detail = format!("segment is {:?}, image is {:?}", m.dimensions(), (w, h));
                            return Ok((rec, MaskResult::Drop(DropReason::SegmentationFailed, detail)));
                        }
                        Err(e) => return Ok((rec, MaskResult::Drop(DropReason::SegmentationFailed, e.to_string()))),
                    }
                }
                let mask = union_masks(w, h, &segments);
                if mask.pixels().all(|p| p.0[0] == 0) {
                    return Ok((rec, MaskResult::Drop(DropReason::SegmentationFailed, "empty mask".into())));
                }
                let mref = mask_ref(&rec.base_id);
                ctx.save(&mref, &mask)?;
                let m = MaskRecord { base_id: rec.base_id.clone(), width: w, height: h, boxes, mask_ref: mref };
                Ok((rec, MaskResult::Ok(Box::new(m))))
            })
            .collect()
    });
    let mut out = StageOutcome::new(Stage::Mask, occupation, input);
    for r in results {
        let (rec, res) = r?;
        match res {
            MaskResult::Ok(m) => {
                out.finalized.push(Record::BaseImage(rec.clone()));
                out.finalized.push(Record::Mask((*m).clone()));
                out.kept.push((rec, *m));
            }
            MaskResult::Drop(reason, detail) => {
                out.drop(&rec.base_id, reason, detail);
                out.finalized.push(Record::BaseImage(rec));
            }
            MaskResult::Backend(e) => {
                out.backend_drop(&rec.base_id, e);
                out.finalized.push(Record::BaseImage(rec));
            }
        }
    }
    out.require_survivors()?;
    Ok(out)
}

/// Stage F: one inpainted variant per group; any failure drops the whole set.
pub fn stage_perturb(
    ctx: &StageContext<'_>,
    occupation: &OccupationSpec,
    masked: Vec<(BaseImageRecord, MaskRecord)>,
) -> Result<StageOutcome<PerturbationSet>, PipelineError> {
    let input = masked.len();
    let results: Vec<Result<Result<PerturbationSet, (String, String, Option<AdapterError>)>, PipelineError>> =
        ctx.pool.install(|| {
            masked
                .into_par_iter()
                .map(|(base, mask)| {
                    let set_id = set_id_for(&base.base_id);
                    let fail = |detail: String, e: Option<AdapterError>| Ok(Err((set_id.clone(), detail, e)));
                    let img = match ctx.load_rgb(&base.image_ref) {
                        Ok(i) => i,
                        Err(e) => return fail(e, None),
                    };
                    let mask_img = match image::open(ctx.path(&mask.mask_ref)) {
                        Ok(m) => m.to_luma8(),
                        Err(e) => return fail(format!("{}: {e}", mask.mask_ref), None),
                    };
                    let mut variants = BTreeMap::new();
                    for group in DemographicGroup::ALL {
                        let prompt = build_perturbed_prompt(occupation, group, base.gender);
                        let seed = derive_seed(ctx.config.seed, &["perturb", &base.base_id, group.canonical_name()]);
                        let input = ImageInput { key: &base.image_ref, image: &img };
                        match ctx.adapters.inpainter.inpaint(input, &mask_img, &prompt, seed) {
                            Ok(v) => {
                                let image_ref = variant_ref(&set_id, group);
                                ctx.save(&image_ref, &v)?;
                                variants.insert(group, Variant { image_ref, prompt, seed, attribute_label: None, passed: false });
                            }
                            Err(e) => return fail(format!("{group} variant: {e}"), Some(e)),
                        }
                    }
                    Ok(Ok(PerturbationSet {
                        set_id: set_id.clone(),
                        occupation: occupation.name.clone(),
                        gender: base.gender,
                        base_id: base.base_id.clone(),
                        k: GROUP_COUNT,
                        variants,
                        sampled: false,
                    }))
                })
                .collect()
        });
    let mut out = StageOutcome::new(Stage::Perturb, &occupation.name, input);
    for r in results {
        match r? {
            Ok(set) => out.kept.push(set),
            Err((id, detail, err)) => {
                out.drop(&id, DropReason::VariantFailed, detail);
                if let Some(e) = err {
                    out.backend_error.get_or_insert(e);
                }
            }
        }
    }
    out.require_survivors()?;
    Ok(out)
}

/// Stage G: keep a set iff every variant is classified as its intended group.
pub fn stage_attribute_filter(
    ctx: &StageContext<'_>,
    occupation: &str,
    sets: Vec<PerturbationSet>,
) -> Result<StageOutcome<PerturbationSet>, PipelineError> {
    let input = sets.len();
    let results: Vec<(PerturbationSet, Option<(DropReason, String)>)> = ctx.pool.install(|| {
        sets.into_par_iter()
            .map(|mut set| {
                let mut failure: Option<(DropReason, String)> = None;
                for (group, variant) in set.variants.iter_mut() {
                    let label = ctx.load_rgb(&variant.image_ref).map_err(|e| (DropReason::Unreadable, e)).and_then(|img| {
                        ctx.adapters
                            .race_classifier
                            .classify(ImageInput { key: &variant.image_ref, image: &img })
                            .map_err(|e| match e {
                                AdapterError::NoFace(_) => (DropReason::NoFace, format!("{group}: {e}")),
                                _ => (DropReason::BackendError, format!("{group}: {e}")),
                            })
                    });
                    match label {
                        Ok(l) => {
                            variant.attribute_label = Some(l);
                            variant.passed = l == *group;
                            if !variant.passed && failure.is_none() {
                                failure = Some((DropReason::AttributeMismatch, format!("{group} variant classified as {l}")));
                            }
                        }
                        Err(f) => {
                            variant.attribute_label = None;
                            variant.passed = false;
                            // Classifier errors outrank mismatches as the recorded reason.
                            if failure.as_ref().is_none_or(|(r, _)| *r == DropReason::AttributeMismatch) {
                                failure = Some(f);
                            }
                        }
                    }
                }
                (set, failure)
            })
            .collect()
    });
    let mut out = StageOutcome::new(Stage::AttributeFilter, occupation, input);
    for (set, failure) in results {
        match failure {
            None => out.kept.push(set),
            Some((reason, detail)) => {
                out.drop(&set.set_id, reason, detail);
                out.finalized.push(Record::PerturbationSet(set));
            }
        }
    }
    out.require_survivors()?;
    Ok(out)
}

/// Stage H: uniform sample of `n` sets without replacement, per gender in
/// balanced mode. Every input set is finalized with its `sampled` flag.
pub fn stage_sample(
    occupation: &str,
    sets: Vec<PerturbationSet>,
    n: usize,
    seed: u64,
    gender_mode: GenderMode,
) -> StageOutcome<PerturbationSet> {
    let mut out = StageOutcome::new(Stage::Sample, occupation, sets.len());
    let genders = gender_mode.genders();
    let quota = n / genders.len();
    let mut rest = sets;
    for gender in genders {
        let (mut pool, others): (Vec<_>, Vec<_>) = rest.into_iter().partition(|s| gender.is_none() || s.gender == gender);
        rest = others;
        pool.sort_by(|a, b| a.set_id.cmp(&b.set_id));
        let gender_tag = gender.map(|g| g.as_str()).unwrap_or("all");
        if pool.len() < quota {
            out.warnings.push(format!("only {} {gender_tag} sets for a sample of {quota}; taking all", pool.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["sample", occupation, gender_tag]));
        let take = quota.min(pool.len());
        let mut chosen = vec![false; pool.len()];
        for i in sample(&mut rng, pool.len(), take) {
            chosen[i] = true;
        }
        for (mut set, pick) in pool.into_iter().zip(chosen) {
            set.sampled = pick;
            if pick {
                out.kept.push(set.clone());
            } else {
                out.drop(&set.set_id, DropReason::NotSampled, "not drawn in sample");
            }
            out.finalized.push(Record::PerturbationSet(set));
        }
    }
    out.kept.sort_by(|a, b| a.set_id.cmp(&b.set_id));
    out
}

/// Collects stage outputs and lays them out in canonical manifest order:
/// by stage, then occupation in config order, then records by kind and id,
/// then drops by id, then the yield.
#[derive(Default)]
struct ManifestBuilder {
    buckets: BTreeMap<Stage, Vec<Record>>,
}

impl ManifestBuilder {
    fn add<T>(&mut self, mut outcome: StageOutcome<T>) -> Vec<T> {
        let stage_yield = outcome.stage_yield();
        let bucket = self.buckets.entry(outcome.stage).or_default();
        outcome.finalized.sort_by(|a, b| kind_rank(a).cmp(&kind_rank(b)).then_with(|| a.id().cmp(b.id())));
        bucket.append(&mut outcome.finalized);
        outcome.drops.sort_by(|a, b| a.drop_id.cmp(&b.drop_id));
        bucket.extend(outcome.drops.into_iter().map(Record::Drop));
        bucket.push(Record::StageYield(stage_yield));
        outcome.kept
    }

    fn finish(self, mut entries: Vec<ManifestEntry>) -> Manifest {
        let mut seq = entries.last().map(|e| e.seq + 1).unwrap_or(0);
        for (stage, records) in self.buckets {
            for record in records {
                entries.push(ManifestEntry { seq, stage, timestamp_ms: None, record });
                seq += 1;
            }
        }
        Manifest::new(entries)
    }
}

fn kind_rank(r: &Record) -> u8 {
    match r {
        Record::Header(_) => 0,
        Record::BaseImage(_) => 1,
        Record::Mask(_) => 2,
        Record::PerturbationSet(_) => 3,
        Record::Drop(_) => 4,
        Record::StageYield(_) => 5,
    }
}

fn header_entry(config: &PipelineConfig) -> ManifestEntry {
    ManifestEntry {
        seq: 0,
        stage: Stage::Config,
        timestamp_ms: None,
        record: Record::Header(ManifestHeader {
            format_version: MANIFEST_FORMAT_VERSION,
            pipeline_config_hash: config.config_hash(),
        }),
    }
}

/// Stages A to E. Returns the manifest up to and including masks.
pub fn run_base_phase(config: &PipelineConfig, adapters: &PipelineAdapters, root: &Path) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let pool = build_pool(config.workers)?;
    let ctx = StageContext { config, adapters, root, pool: &pool };
    let mut builder = ManifestBuilder::default();
    for occ in &config.occupations {
        let generated = builder.add(stage_generate(&ctx, occ)?);
        let answered = builder.add(stage_vqa_filter(&ctx, occ, generated)?);
        let top = builder.add(stage_select_topk(&occ.name, answered, config.top_k, config.gender_mode)?);
        let colored = builder.add(stage_grayscale_filter(&ctx, &occ.name, top)?);
        builder.add(stage_mask(&ctx, &occ.name, colored)?);
    }
    Ok(builder.finish(vec![header_entry(config)]))
}

/// Stages F to H, continuing a base-phase manifest produced by the same config.
pub fn run_perturb_phase(
    config: &PipelineConfig,
    adapters: &PipelineAdapters,
    root: &Path,
    base: &Manifest,
) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let expected = config.config_hash();
    let found = base.config_hash().ok_or_else(|| PipelineError::MissingRecord("header".into()))?;
    if found != expected {
        return Err(PipelineError::ConfigMismatch { expected, found: found.to_string() });
    }
    if base.entries.iter().any(|e| e.stage >= Stage::Perturb) {
        return Err(PipelineError::Config("manifest already contains perturb-phase records".into()));
    }
    let bases: BTreeMap<&str, &BaseImageRecord> = base.base_images().map(|b| (b.base_id.as_str(), b)).collect();
    let pool = build_pool(config.workers)?;
    let ctx = StageContext { config, adapters, root, pool: &pool };
    let mut builder = ManifestBuilder::default();
    for occ in &config.occupations {
        let mut masked = Vec::new();
        for m in base.masks() {
            let b = bases.get(m.base_id.as_str()).ok_or_else(|| PipelineError::MissingRecord(format!("base image {}", m.base_id)))?;
            if b.occupation == occ.name {
                masked.push(((*b).clone(), m.clone()));
            }
        }
        masked.sort_by(|a, b| a.0.base_id.cmp(&b.0.base_id));
        if masked.is_empty() {
            return Err(PipelineError::NoSurvivors { stage: Stage::Mask, occupation: occ.name.clone() });
        }
        let sets = builder.add(stage_perturb(&ctx, occ, masked)?);
        let passed = builder.add(stage_attribute_filter(&ctx, &occ.name, sets)?);
        builder.add(stage_sample(&occ.name, passed, config.sets_per_occupation, config.seed, config.gender_mode));
    }
    let manifest = builder.finish(base.entries.clone());
    debug_assert!(manifest.sampled_sets().all(|s| validate_set(s).is_empty()));
    Ok(manifest)
}

/// All eight stages.
pub fn run_pipeline(config: &PipelineConfig, adapters: &PipelineAdapters, root: &Path) -> Result<Manifest, PipelineError> {
    let base = run_base_phase(config, adapters, root)?;
    run_perturb_phase(config, adapters, root, &base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldRow {
    pub stage: Stage,
    #[serde(flatten)]
    pub counts: StageYield,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub rows: Vec<YieldRow>,
    pub sampled_sets: usize,
    pub dataset_images: usize,
}

impl YieldReport {
    pub fn from_manifest(manifest: &Manifest) -> Self {
        let rows = manifest.yields().map(|(stage, y)| YieldRow { stage, counts: y.clone() }).collect();
        let sampled_sets = manifest.sampled_sets().count();
        Self { rows, sampled_sets, dataset_images: sampled_sets * GROUP_COUNT }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<17} {:<12} {:>7} {:>7} {:>7}  reasons", "stage", "occupation", "input", "kept", "dropped");
        for r in &self.rows {
            let reasons: Vec<String> = r.counts.drop_reasons.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(
                s,
                "{:<17} {:<12} {:>7} {:>7} {:>7}  {}",
                r.stage.as_str(),
                r.counts.occupation,
                r.counts.input,
                r.counts.kept,
                r.counts.dropped,
                reasons.join(" ")
            );
            for w in &r.counts.warnings {
                let _ = writeln!(s, "  warning: {w}");
            }
        }
        let _ = writeln!(s, "sampled sets: {}  dataset images: {}", self.sampled_sets, self.dataset_images);
        s
    }
}

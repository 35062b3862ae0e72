//! Persistent record types, the JSONL manifest, and record validation.
//!
//! A manifest is a line-delimited JSON file. Every line is a [`ManifestEntry`]
//! carrying a `kind` discriminator, the pipeline stage that produced it, and a
//! logical sequence number. Image and mask bytes never live in the manifest;
//! records reference PNG files by path relative to the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of variants in every perturbation set.
pub const GROUP_COUNT: usize = 4;

/// The four perceived-race groups a base image is perturbed into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DemographicGroup {
    Black,
    Caucasian,
    EastAsian,
    Indian,
}

impl DemographicGroup {
    pub const ALL: [DemographicGroup; GROUP_COUNT] = [
        DemographicGroup::Black,
        DemographicGroup::Caucasian,
        DemographicGroup::EastAsian,
        DemographicGroup::Indian,
    ];

    pub fn canonical_name(self) -> &'static str {
        match self {
            Self::Black => "Black",
            Self::Caucasian => "Caucasian",
            Self::EastAsian => "EastAsian",
            Self::Indian => "Indian",
        }
    }

    /// Identifier inserted into inpainting prompts. East Asian uses "Asian"
    /// because that is the word diffusion models render as East Asian.
    pub fn prompt_identifier(self) -> &'static str {
        match self {
            Self::Black => "Black",
            Self::Caucasian => "Caucasian",
            Self::EastAsian => "Asian",
            Self::Indian => "Indian",
        }
    }

    /// Answer option shown to human reviewers for this group.
    pub fn review_label(self) -> &'static str {
        match self {
            Self::Black => "Black",
            Self::Caucasian => "Caucasian",
            Self::EastAsian => "East Asian (e.g. Chinese)",
            Self::Indian => "South Asian (e.g. Indian)",
        }
    }

    /// Lowercase token used in file names.
    pub fn file_stem(self) -> &'static str {
        match self {
            Self::Black => "black",
            Self::Caucasian => "caucasian",
            Self::EastAsian => "east_asian",
            Self::Indian => "indian",
        }
    }

    pub fn from_prompt_identifier(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.prompt_identifier() == s)
    }

    pub fn from_review_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.review_label() == s)
    }
}

impl fmt::Display for DemographicGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for DemographicGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.canonical_name() == s || g.file_stem() == s)
            .ok_or_else(|| format!("unknown demographic group {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const BOTH: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The ten labels shared by every occupation in the base label set.
pub const BASE_LABELS: [&str; 10] = [
    "chef",
    "server",
    "doctor",
    "nurse",
    "pilot",
    "driver",
    "mechanic",
    "engineer",
    "firefighter",
    "police officer",
];

/// An occupation, the phrase used to prompt for it, and its two label sets.
///
/// `name` doubles as the true label in both label sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationSpec {
    pub name: String,
    /// Noun phrase with its leading article, e.g. `a chef in a chef's jacket`.
    pub prompt_phrase: String,
    #[serde(default = "default_base_labels")]
    pub base_labels: Vec<String>,
    pub difficult_labels: Vec<String>,
}

fn default_base_labels() -> Vec<String> {
    BASE_LABELS.iter().map(|s| s.to_string()).collect()
}

impl OccupationSpec {
    pub fn new(name: &str, prompt_phrase: &str, adjacent: &[&str]) -> Self {
        let mut difficult_labels = vec![name.to_string()];
        difficult_labels.extend(adjacent.iter().map(|s| s.to_string()));
        Self {
            name: name.to_string(),
            prompt_phrase: prompt_phrase.to_string(),
            base_labels: default_base_labels(),
            difficult_labels,
        }
    }

    pub fn true_label(&self) -> &str {
        &self.name
    }

    pub fn labels(&self, set: LabelSet) -> &[String] {
        match set {
            LabelSet::Base => &self.base_labels,
            LabelSet::Difficult => &self.difficult_labels,
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let id = &self.name;
        if self.prompt_phrase.trim().is_empty() {
            out.push(Violation::new(id, "prompt_phrase", "must be nonempty"));
        }
        if self.difficult_labels.len() != 8 {
            out.push(Violation::new(
                id,
                "difficult_labels",
                format!("expected 8 entries, found {}", self.difficult_labels.len()),
            ));
        }
        if !self.difficult_labels.iter().any(|l| l == &self.name) {
            out.push(Violation::new(id, "difficult_labels", "must contain the true label"));
        }
        if self.base_labels.len() != BASE_LABELS.len() {
            out.push(Violation::new(
                id,
                "base_labels",
                format!("expected {} entries, found {}", BASE_LABELS.len(), self.base_labels.len()),
            ));
        }
        if !self.base_labels.iter().any(|l| l == &self.name) {
            out.push(Violation::new(id, "base_labels", "must contain the true label"));
        }
        out
    }
}

/// The five occupations with their attire-bearing prompt phrases and the
/// seven adjacent occupations of the difficult label set.
pub fn default_occupations() -> Vec<OccupationSpec> {
    vec![
        OccupationSpec::new(
            "chef",
            "a chef in a chef's jacket",
            &[
                "line cook",
                "cafeteria attendant",
                "waiter",
                "dishwasher",
                "food preparation worker",
                "host",
                "server",
            ],
        ),
        OccupationSpec::new(
            "doctor",
            "a doctor in a white coat with a stethoscope",
            &[
                "nurse",
                "physician assistant",
                "veterinarian",
                "clinical laboratory technician",
                "pharmacist",
                "emergency medical technician",
                "midwife",
            ],
        ),
        OccupationSpec::new(
            "firefighter",
            "a firefighter",
            &[
                "fire chief",
                "coast guard",
                "security guard",
                "paramedic",
                "pilot",
                "police officer",
                "soldier",
            ],
        ),
        OccupationSpec::new(
            "mechanic",
            "a car mechanic",
            &[
                "automobile engineer",
                "civil engineer",
                "aerospace engineer",
                "mechanical engineer",
                "electrical engineer",
                "industrial engineer",
                "petroleum engineer",
            ],
        ),
        OccupationSpec::new(
            "pilot",
            "a commercial pilot",
            &[
                "flight steward",
                "flight stewardess",
                "driver",
                "aircraft fueler",
                "airline reservation agent",
                "air traffic controller",
                "aircraft engineer",
            ],
        ),
    ]
}

/// Check that every occupation is valid and that base label sets agree.
pub fn validate_occupations(occupations: &[OccupationSpec]) -> Vec<Violation> {
    let mut out: Vec<Violation> = occupations.iter().flat_map(|o| o.violations()).collect();
    if let Some(first) = occupations.first() {
        for occ in &occupations[1..] {
            if occ.base_labels != first.base_labels {
                out.push(Violation::new(
                    &occ.name,
                    "base_labels",
                    format!("differs from the base label set of {}", first.name),
                ));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for occ in occupations {
        if !seen.insert(&occ.name) {
            out.push(Violation::new(&occ.name, "name", "duplicate occupation"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSet {
    Base,
    #[default]
    Difficult,
}

impl FromStr for LabelSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(LabelSet::Base),
            "difficult" => Ok(LabelSet::Difficult),
            other => Err(format!("unknown label set {other:?} (expected base or difficult)")),
        }
    }
}

/// A VQA answer with the backend's confidence in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseImageRecord {
    pub base_id: String,
    pub occupation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    pub prompt: String,
    pub seed: u64,
    pub image_ref: String,
    pub vqa_q1: Option<VqaAnswer>,
    pub vqa_q2: Option<VqaAnswer>,
    pub vqa_q3_score: Option<f64>,
    pub grayscale: Option<bool>,
    pub selected: bool,
}

impl BaseImageRecord {
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let id = &self.base_id;
        if let Some(score) = self.vqa_q3_score {
            if !(0.0..=1.0).contains(&score) {
                out.push(Violation::new(id, "vqa_q3_score", "must lie in [0, 1]"));
            }
        }
        for (field, ans) in [("vqa_q1", &self.vqa_q1), ("vqa_q2", &self.vqa_q2)] {
            if let Some(a) = ans {
                if !(0.0..=1.0).contains(&a.score) {
                    out.push(Violation::new(id, field, "score must lie in [0, 1]"));
                }
            }
        }
        if self.selected {
            let q1_yes = self.vqa_q1.as_ref().map(|a| is_yes(&a.answer)).unwrap_or(false);
            let q2_no = self.vqa_q2.as_ref().map(|a| is_no(&a.answer)).unwrap_or(false);
            if !q1_yes {
                out.push(Violation::new(id, "selected", "selected image must answer yes to Q1"));
            }
            if !q2_no {
                out.push(Violation::new(id, "selected", "selected image must answer no to Q2"));
            }
            if self.grayscale != Some(false) {
                out.push(Violation::new(id, "selected", "selected image must not be grayscale"));
            }
        }
        out
    }
}

/// Case-insensitive "yes" prefix test for free-text VQA answers.
pub fn is_yes(answer: &str) -> bool {
    answer.trim().to_ascii_lowercase().starts_with("yes")
}

/// Case-insensitive "no" prefix test for free-text VQA answers.
pub fn is_no(answer: &str) -> bool {
    answer.trim().to_ascii_lowercase().starts_with("no")
}

/// Axis-aligned box in pixel coordinates with detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, confidence: f64) -> Self {
        Self { x0, y0, x1, y1, confidence }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= width as f64
            && self.y1 <= height as f64
    }

    pub fn clipped(&self, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub base_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
    pub mask_ref: String,
}

impl MaskRecord {
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.within(self.width, self.height) {
                out.push(Violation::new(
                    &self.base_id,
                    format!("boxes[{i}]"),
                    "box must lie within image bounds",
                ));
            }
        }
        if !self.boxes.is_empty() && self.mask_ref.is_empty() {
            out.push(Violation::new(&self.base_id, "mask_ref", "mask required when boxes exist"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub image_ref: String,
    pub prompt: String,
    pub seed: u64,
    pub attribute_label: Option<DemographicGroup>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSet {
    pub set_id: String,
    pub occupation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    pub base_id: String,
    pub k: usize,
    pub variants: BTreeMap<DemographicGroup, Variant>,
    pub sampled: bool,
}

/// Deterministic set id: a short SHA-256 digest of the base image id.
pub fn set_id_for(base_id: &str) -> String {
    let digest = Sha256::digest(base_id.as_bytes());
    format!("set-{}", hex::encode(&digest[..8]))
}

/// One broken rule on one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub record_id: String,
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(record_id: impl Into<String>, field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self { record_id: record_id.into(), field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.record_id, self.field, self.rule)
    }
}

/// Check a perturbation set against its invariants. Never fails; problems are
/// returned as data.
pub fn validate_set(set: &PerturbationSet) -> Vec<Violation> {
    let id = set.set_id.as_str();
    let mut out = Vec::new();
    if set.k != GROUP_COUNT {
        out.push(Violation::new(id, "k", format!("expected {GROUP_COUNT}, found {}", set.k)));
    }
    for group in DemographicGroup::ALL {
        if !set.variants.contains_key(&group) {
            out.push(Violation::new(id, "variants", format!("missing group {group}")));
        }
    }
    if set.sampled {
        for (group, variant) in &set.variants {
            if !variant.passed || variant.attribute_label != Some(*group) {
                out.push(Violation::new(
                    id,
                    format!("variants.{group}"),
                    "sampled set requires every variant to pass with attribute_label equal to its group",
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Generate,
    VqaFilter,
    SelectTopK,
    GrayscaleFilter,
    Mask,
    Perturb,
    AttributeFilter,
    Sample,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::Generate,
        Stage::VqaFilter,
        Stage::SelectTopK,
        Stage::GrayscaleFilter,
        Stage::Mask,
        Stage::Perturb,
        Stage::AttributeFilter,
        Stage::Sample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::VqaFilter => "vqa_filter",
            Stage::SelectTopK => "select_top_k",
            Stage::GrayscaleFilter => "grayscale_filter",
            Stage::Mask => "mask",
            Stage::Perturb => "perturb",
            Stage::AttributeFilter => "attribute_filter",
            Stage::Sample => "sample",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Machine-readable reason a record left the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    BackendError,
    Q1NotYes,
    Q2NotNo,
    BelowTopK,
    Grayscale,
    Unreadable,
    NoPersonDetected,
    SegmentationFailed,
    VariantFailed,
    AttributeMismatch,
    NoFace,
    NotSampled,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::BackendError => "backend_error",
            DropReason::Q1NotYes => "q1_not_yes",
            DropReason::Q2NotNo => "q2_not_no",
            DropReason::BelowTopK => "below_top_k",
            DropReason::Grayscale => "grayscale",
            DropReason::Unreadable => "unreadable",
            DropReason::NoPersonDetected => "no_person_detected",
            DropReason::SegmentationFailed => "segmentation_failed",
            DropReason::VariantFailed => "variant_failed",
            DropReason::AttributeMismatch => "attribute_mismatch",
            DropReason::NoFace => "no_face",
            DropReason::NotSampled => "not_sampled",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub drop_id: String,
    pub occupation: String,
    pub subject_id: String,
    pub reason: DropReason,
    pub detail: String,
}

impl DropRecord {
    pub fn new(stage: Stage, occupation: &str, subject_id: &str, reason: DropReason, detail: impl Into<String>) -> Self {
        Self {
            drop_id: format!("{stage}:{subject_id}"),
            occupation: occupation.to_string(),
            subject_id: subject_id.to_string(),
            reason,
            detail: detail.into(),
        }
    }
}

/// Per-stage, per-occupation yield. `kept + dropped == input` always holds for
/// records written by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageYield {
    pub yield_id: String,
    pub occupation: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub drop_reasons: BTreeMap<DropReason, usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub pipeline_config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header(ManifestHeader),
    BaseImage(BaseImageRecord),
    Mask(MaskRecord),
    PerturbationSet(PerturbationSet),
    Drop(DropRecord),
    StageYield(StageYield),
}

impl Record {
    pub fn kind(&self) -> &'static str {
        match self {
            Record::Header(_) => "header",
            Record::BaseImage(_) => "base_image",
            Record::Mask(_) => "mask",
            Record::PerturbationSet(_) => "perturbation_set",
            Record::Drop(_) => "drop",
            Record::StageYield(_) => "stage_yield",
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Record::Header(h) => &h.pipeline_config_hash,
            Record::BaseImage(r) => &r.base_id,
            Record::Mask(r) => &r.base_id,
            Record::PerturbationSet(r) => &r.set_id,
            Record::Drop(r) => &r.drop_id,
            Record::StageYield(r) => &r.yield_id,
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        match self {
            Record::Header(_) | Record::Drop(_) => Vec::new(),
            Record::BaseImage(r) => r.violations(),
            Record::Mask(r) => r.violations(),
            Record::PerturbationSet(r) => validate_set(r),
            Record::StageYield(r) => {
                if r.kept + r.dropped != r.input {
                    vec![Violation::new(&r.yield_id, "kept", "kept + dropped must equal input")]
                } else {
                    Vec::new()
                }
            }
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seq: u64,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
    #[serde(flatten)]
    pub record: Record,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation failed: {0}")]
    Validation(Violation),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.display().to_string(), source }
}

/// Validate every entry: record invariants plus per-kind id uniqueness.
pub fn validate_entries(entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    let mut seen: BTreeSet<(&'static str, &str)> = BTreeSet::new();
    for entry in entries {
        if let Some(v) = entry.record.violations().into_iter().next() {
            return Err(ManifestError::Validation(v));
        }
        let kind = entry.record.kind();
        if !seen.insert((kind, entry.record.id())) {
            return Err(ManifestError::DuplicateId { kind, id: entry.record.id().to_string() });
        }
    }
    Ok(())
}

/// Serialize one entry to its canonical single-line JSON form.
pub fn entry_to_line(entry: &ManifestEntry) -> String {
    serde_json::to_string(entry).expect("manifest entries always serialize")
}

/// Validate and write entries as JSONL, one object per line.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), ManifestError> {
    validate_entries(entries)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for entry in entries {
        w.write_all(entry_to_line(entry).as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|source| ManifestError::Parse { line: i + 1, source })?;
        out.push(entry);
    }
    Ok(out)
}

/// Convenience views over a parsed manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        read_manifest(path).map(Self::new)
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        write_manifest(&self.entries, path)
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.entries.iter().find_map(|e| match &e.record {
            Record::Header(h) => Some(h.pipeline_config_hash.as_str()),
            _ => None,
        })
    }

    pub fn base_images(&self) -> impl Iterator<Item = &BaseImageRecord> {
        self.entries.iter().filter_map(|e| match &e.record {
            Record::BaseImage(r) => Some(r),
            _ => None,
        })
    }

    pub fn masks(&self) -> impl Iterator<Item = &MaskRecord> {
        self.entries.iter().filter_map(|e| match &e.record {
            Record::Mask(r) => Some(r),
            _ => None,
        })
    }

    pub fn sets(&self) -> impl Iterator<Item = &PerturbationSet> {
        self.entries.iter().filter_map(|e| match &e.record {
            Record::PerturbationSet(r) => Some(r),
            _ => None,
        })
    }

    pub fn sampled_sets(&self) -> impl Iterator<Item = &PerturbationSet> {
        self.sets().filter(|s| s.sampled)
    }

    pub fn drops(&self) -> impl Iterator<Item = (Stage, &DropRecord)> {
        self.entries.iter().filter_map(|e| match &e.record {
            Record::Drop(r) => Some((e.stage, r)),
            _ => None,
        })
    }

    pub fn yields(&self) -> impl Iterator<Item = (Stage, &StageYield)> {
        self.entries.iter().filter_map(|e| match &e.record {
            Record::StageYield(r) => Some((e.stage, r)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passing_set() -> PerturbationSet {
        let variants = DemographicGroup::ALL
            .into_iter()
            .map(|g| {
                (
                    g,
                    Variant {
                        image_ref: format!("images/variants/s/{}.png", g.file_stem()),
                        prompt: format!("A photo of the face of a {} chef", g.prompt_identifier()),
                        seed: 1,
                        attribute_label: Some(g),
                        passed: true,
                    },
                )
            })
            .collect();
        PerturbationSet {
            set_id: "set-1".into(),
            occupation: "chef".into(),
            gender: None,
            base_id: "chef-00000".into(),
            k: 4,
            variants,
            sampled: true,
        }
    }

    #[test]
    fn group_mappings_are_bijective() {
        let prompts: BTreeSet<_> = DemographicGroup::ALL.iter().map(|g| g.prompt_identifier()).collect();
        let reviews: BTreeSet<_> = DemographicGroup::ALL.iter().map(|g| g.review_label()).collect();
        assert_eq!(prompts.len(), 4);
        assert_eq!(reviews.len(), 4);
        for g in DemographicGroup::ALL {
            assert_eq!(DemographicGroup::from_prompt_identifier(g.prompt_identifier()), Some(g));
            assert_eq!(DemographicGroup::from_review_label(g.review_label()), Some(g));
            assert_eq!(g.canonical_name().parse::<DemographicGroup>(), Ok(g));
        }
        assert_eq!(DemographicGroup::EastAsian.prompt_identifier(), "Asian");
    }

    #[test]
    fn default_occupations_are_valid() {
        let occs = default_occupations();
        assert_eq!(occs.len(), 5);
        assert!(validate_occupations(&occs).is_empty());
        for o in &occs {
            assert_eq!(o.difficult_labels.len(), 8);
            assert_eq!(o.base_labels.len(), 10);
        }
    }

    #[test]
    fn passing_set_has_no_violations() {
        assert!(validate_set(&passing_set()).is_empty());
    }

    #[test]
    fn missing_group_is_reported() {
        let mut set = passing_set();
        set.sampled = false;
        set.variants.remove(&DemographicGroup::Indian);
        let v = validate_set(&set);
        assert_eq!(v.len(), 1);
        assert_eq!(format!("{}: {}", v[0].field, v[0].rule), "variants: missing group Indian");
    }

    #[test]
    fn sampled_requires_passing_variants() {
        let mut set = passing_set();
        let black = set.variants.get_mut(&DemographicGroup::Black).unwrap();
        black.attribute_label = Some(DemographicGroup::Caucasian);
        let v = validate_set(&set);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "variants.Black");
        assert!(v[0].rule.starts_with("sampled set requires"));
    }

    #[test]
    fn selected_base_image_must_pass_filters() {
        let rec = BaseImageRecord {
            base_id: "chef-00001".into(),
            occupation: "chef".into(),
            gender: None,
            prompt: "p".into(),
            seed: 1,
            image_ref: "images/base/chef-00001.png".into(),
            vqa_q1: Some(VqaAnswer { answer: "yes".into(), score: 0.9 }),
            vqa_q2: Some(VqaAnswer { answer: "yes".into(), score: 0.9 }),
            vqa_q3_score: Some(0.5),
            grayscale: Some(false),
            selected: true,
        };
        let v = rec.violations();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].record_id, "chef-00001");
        assert_eq!(v[0].field, "selected");
    }

    #[test]
    fn write_rejects_invalid_record_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = passing_set();
        set.variants.remove(&DemographicGroup::Black);
        let entry = ManifestEntry { seq: 0, stage: Stage::Sample, timestamp_ms: None, record: Record::PerturbationSet(set) };
        let err = write_manifest(&[entry], &dir.path().join("m.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("set-1") && msg.contains("variants"), "{msg}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let entry = ManifestEntry { seq: 0, stage: Stage::Sample, timestamp_ms: None, record: Record::PerturbationSet(passing_set()) };
        let err = validate_entries(&[entry.clone(), entry]).unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateId { kind: "perturbation_set", .. }));
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = write_manifest(&[], &blocker.join("m.jsonl")).unwrap_err();
        assert!(matches!(err, ManifestError::Io { .. }));
    }

    #[test]
    fn empty_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn one_line_carries_kind_discriminator() {
        let entry = ManifestEntry { seq: 3, stage: Stage::Sample, timestamp_ms: None, record: Record::PerturbationSet(passing_set()) };
        let line = entry_to_line(&entry);
        assert!(line.starts_with(r#"{"seq":3,"stage":"sample","kind":"perturbation_set","set_id":"set-1""#), "{line}");
    }

    #[test]
    fn set_ids_are_stable() {
        assert_eq!(set_id_for("chef-00001"), set_id_for("chef-00001"));
        assert_ne!(set_id_for("chef-00001"), set_id_for("chef-00002"));
        assert_eq!(set_id_for("x").len(), 4 + 16);
    }
}

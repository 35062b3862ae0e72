//! Human review: stratified samples for annotation and aggregation of the
//! returned answers into realism and race-fidelity scores.
//!
//! Annotation CSV header: `image_ref,set_id,intended_group,q_quality,q_identity`.
//! `q_quality` is one of `Yes`, `No`, `Unsure`; `q_identity` is one of
//! `Black`, `Caucasian`, `East Asian (e.g. Chinese)`, `South Asian (e.g. Indian)`,
//! `Others`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DemographicGroup, Manifest};
use crate::pipeline::derive_seed;

pub const CSV_HEADER: [&str; 5] = ["image_ref", "set_id", "intended_group", "q_quality", "q_identity"];

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("bad header: expected {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
    #[error("no annotation rows")]
    Empty,
    #[error("manifest has no sampled sets")]
    NoSampledSets,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityAnswer {
    Yes,
    No,
    Unsure,
}

impl QualityAnswer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Yes" => Some(Self::Yes),
            "No" => Some(Self::No),
            "Unsure" => Some(Self::Unsure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IdentityAnswer {
    Black,
    Caucasian,
    EastAsianExample,
    SouthAsianExample,
    Others,
}

impl IdentityAnswer {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "Others" {
            return Some(Self::Others);
        }
        DemographicGroup::from_review_label(s).map(Self::from_group)
    }

    pub fn from_group(g: DemographicGroup) -> Self {
        match g {
            DemographicGroup::Black => Self::Black,
            DemographicGroup::Caucasian => Self::Caucasian,
            DemographicGroup::EastAsian => Self::EastAsianExample,
            DemographicGroup::Indian => Self::SouthAsianExample,
        }
    }

    pub fn group(self) -> Option<DemographicGroup> {
        match self {
            Self::Black => Some(DemographicGroup::Black),
            Self::Caucasian => Some(DemographicGroup::Caucasian),
            Self::EastAsianExample => Some(DemographicGroup::EastAsian),
            Self::SouthAsianExample => Some(DemographicGroup::Indian),
            Self::Others => None,
        }
    }

    pub fn label(self) -> &'static str {
        self.group().map(|g| g.review_label()).unwrap_or("Others")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub image_ref: String,
    pub set_id: String,
    pub intended_group: DemographicGroup,
    pub q_quality: QualityAnswer,
    pub q_identity: IdentityAnswer,
}

/// Parse an annotation CSV. Errors carry the 1-based file line number.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<AnnotationRow>, ReviewError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != CSV_HEADER {
        return Err(ReviewError::Header { expected: CSV_HEADER.join(","), found: header.join(",") });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let err = |message: String| ReviewError::Row { line, message };
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let intended_group = field(2).parse::<DemographicGroup>().map_err(err)?;
        let q_quality =
            QualityAnswer::parse(field(3)).ok_or_else(|| err(format!("unknown q_quality value {:?}", field(3))))?;
        let q_identity =
            IdentityAnswer::parse(field(4)).ok_or_else(|| err(format!("unknown q_identity value {:?}", field(4))))?;
        rows.push(AnnotationRow {
            image_ref: field(0).to_string(),
            set_id: field(1).to_string(),
            intended_group,
            q_quality,
            q_identity,
        });
    }
    Ok(rows)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRow>, ReviewError> {
    let file = std::fs::File::open(path).map_err(|e| ReviewError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_annotations(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReviewScore {
    pub rows: usize,
    pub no_issue: usize,
    pub identity_match: usize,
    pub realism_score: f64,
    pub race_fidelity_score: f64,
}

impl ReviewScore {
    fn add(&mut self, row: &AnnotationRow) {
        self.rows += 1;
        self.no_issue += (row.q_quality == QualityAnswer::No) as usize;
        self.identity_match += (row.q_identity.group() == Some(row.intended_group)) as usize;
        self.realism_score = self.no_issue as f64 / self.rows as f64;
        self.race_fidelity_score = self.identity_match as f64 / self.rows as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub overall: ReviewScore,
    pub per_occupation: BTreeMap<String, ReviewScore>,
    /// Rows whose occupation could not be resolved; counted in `overall` only.
    pub unassigned: usize,
}

/// Realism is the share of `No` answers to the quality question; fidelity is
/// the share of identity answers naming the intended group. `Unsure` and
/// `Others` count only in the denominators.
pub fn aggregate_review(
    rows: &[AnnotationRow],
    occupation_of: impl Fn(&AnnotationRow) -> Option<String>,
) -> Result<ReviewSummary, ReviewError> {
    if rows.is_empty() {
        return Err(ReviewError::Empty);
    }
    let mut overall = ReviewScore::default();
    let mut per_occupation: BTreeMap<String, ReviewScore> = BTreeMap::new();
    let mut unassigned = 0;
    for row in rows {
        overall.add(row);
        match occupation_of(row) {
            Some(o) => per_occupation.entry(o).or_default().add(row),
            None => unassigned += 1,
        }
    }
    Ok(ReviewSummary { overall, per_occupation, unassigned })
}

/// Set id to occupation, for every set in the manifest.
pub fn occupation_lookup(manifest: &Manifest) -> BTreeMap<String, String> {
    manifest.sets().map(|s| (s.set_id.clone(), s.occupation.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image_ref: String,
    pub set_id: String,
    pub occupation: String,
    pub intended_group: DemographicGroup,
}

/// Uniform sample of `round(fraction * cell size)` images from every
/// occupation-by-group cell of the sampled sets.
pub fn sample_for_review(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Vec<ReviewItem>, ReviewError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ReviewError::Fraction(fraction));
    }
    let mut cells: BTreeMap<(String, DemographicGroup), Vec<ReviewItem>> = BTreeMap::new();
    for set in manifest.sampled_sets() {
        for (group, v) in &set.variants {
            cells.entry((set.occupation.clone(), *group)).or_default().push(ReviewItem {
                image_ref: v.image_ref.clone(),
                set_id: set.set_id.clone(),
                occupation: set.occupation.clone(),
                intended_group: *group,
            });
        }
    }
    if cells.is_empty() {
        return Err(ReviewError::NoSampledSets);
    }
    let mut out = Vec::new();
    for ((occupation, group), mut items) in cells {
        items.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
        let take = ((items.len() as f64 * fraction).round() as usize).min(items.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["review", &occupation, group.canonical_name()]));
        let mut idx = sample(&mut rng, items.len(), take).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| items[i].clone()));
    }
    Ok(out)
}

/// Blank annotation sheet for the sampled images.
pub fn write_review_sheet<W: Write>(items: &[ReviewItem], writer: W) -> Result<(), ReviewError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for it in items {
        w.write_record([it.image_ref.as_str(), it.set_id.as_str(), it.intended_group.canonical_name(), "", ""])?;
    }
    w.flush().map_err(|e| ReviewError::Io { path: "<review sheet>".into(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ManifestEntry, PerturbationSet, Record, Stage, Variant};
    use proptest::prelude::*;

    fn row(group: DemographicGroup, q: QualityAnswer, id: IdentityAnswer) -> AnnotationRow {
        AnnotationRow { image_ref: "x.png".into(), set_id: "s".into(), intended_group: group, q_quality: q, q_identity: id }
    }

    #[test]
    fn realism_counts_unsure_in_denominator() {
        let mut rows = vec![row(DemographicGroup::Black, QualityAnswer::No, IdentityAnswer::Black); 8];
        rows.push(row(DemographicGroup::Black, QualityAnswer::Yes, IdentityAnswer::Others));
        rows.push(row(DemographicGroup::Black, QualityAnswer::Unsure, IdentityAnswer::Caucasian));
        let s = aggregate_review(&rows, |_| Some("chef".into())).unwrap();
        assert_eq!(s.overall.realism_score, 0.8);
        assert_eq!(s.overall.race_fidelity_score, 0.8);
    }

    #[test]
    fn east_asian_label_maps_to_group() {
        let csv = "image_ref,set_id,intended_group,q_quality,q_identity\na.png,s1,EastAsian,No,East Asian (e.g. Chinese)\n";
        let rows = parse_annotations(csv.as_bytes()).unwrap();
        assert_eq!(rows[0].q_identity, IdentityAnswer::EastAsianExample);
        let s = aggregate_review(&rows, |_| None).unwrap();
        assert_eq!(s.overall.race_fidelity_score, 1.0);
        assert_eq!(s.unassigned, 1);
    }

    #[test]
    fn bad_values_name_the_line() {
        let csv = "image_ref,set_id,intended_group,q_quality,q_identity\na,s,Black,No,Black\nb,s,Black,Maybe,Black\n";
        match parse_annotations(csv.as_bytes()).unwrap_err() {
            ReviewError::Row { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("Maybe"));
            }
            e => panic!("{e}"),
        }
        let csv = "image_ref,set_id,group,q_quality,q_identity\n";
        assert!(matches!(parse_annotations(csv.as_bytes()), Err(ReviewError::Header { .. })));
        let csv = "image_ref,set_id,intended_group,q_quality,q_identity\na,s,Martian,No,Black\n";
        assert!(matches!(parse_annotations(csv.as_bytes()), Err(ReviewError::Row { line: 2, .. })));
    }

    #[test]
    fn empty_rows_error() {
        assert!(matches!(aggregate_review(&[], |_| None), Err(ReviewError::Empty)));
    }

    pub(crate) fn manifest_with_sets(per_occ: usize, occupations: &[&str]) -> Manifest {
        let mut entries = Vec::new();
        for occ in occupations {
            for i in 0..per_occ {
                let set_id = format!("set-{occ}-{i:04}");
                let variants = DemographicGroup::ALL
                    .iter()
                    .map(|g| {
                        (*g, Variant {
                            image_ref: format!("images/variants/{set_id}/{}.png", g.file_stem()),
                            prompt: String::new(),
                            seed: 0,
                            attribute_label: Some(*g),
                            passed: true,
                        })
                    })
                    .collect();
                let set = PerturbationSet {
                    set_id,
                    occupation: occ.to_string(),
                    gender: None,
                    base_id: format!("{occ}-{i}"),
                    k: 4,
                    variants,
                    sampled: true,
                };
                entries.push(ManifestEntry { seq: entries.len() as u64, stage: Stage::Sample, timestamp_ms: None, record: Record::PerturbationSet(set) });
            }
        }
        Manifest::new(entries)
    }

    #[test]
    fn stratified_sample_sizes() {
        let m = manifest_with_sets(12, &["chef", "pilot"]);
        let s = sample_for_review(&m, 0.5, 3).unwrap();
        assert_eq!(s.len(), 2 * 4 * 6);
        let mut cells: BTreeMap<(String, DemographicGroup), usize> = BTreeMap::new();
        for it in &s {
            *cells.entry((it.occupation.clone(), it.intended_group)).or_default() += 1;
        }
        assert!(cells.values().all(|c| *c == 6));
        assert_eq!(s, sample_for_review(&m, 0.5, 3).unwrap());
        assert_eq!(sample_for_review(&m, 1.0, 3).unwrap().len(), 96);
        assert!(matches!(sample_for_review(&m, 0.0, 3), Err(ReviewError::Fraction(_))));
        assert!(matches!(sample_for_review(&m, 1.5, 3), Err(ReviewError::Fraction(_))));
    }

    #[test]
    fn review_sheet_round_trips_header() {
        let m = manifest_with_sets(1, &["chef"]);
        let items = sample_for_review(&m, 1.0, 0).unwrap();
        let mut buf = Vec::new();
        write_review_sheet(&items, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("image_ref,set_id,intended_group,q_quality,q_identity\n"));
        assert_eq!(text.lines().count(), 5);
    }

    fn arb_row() -> impl Strategy<Value = AnnotationRow> {
        (0usize..4, 0usize..3, 0usize..5, 0usize..3).prop_map(|(g, q, i, o)| {
            let q = [QualityAnswer::Yes, QualityAnswer::No, QualityAnswer::Unsure][q];
            let id = [
                IdentityAnswer::Black,
                IdentityAnswer::Caucasian,
                IdentityAnswer::EastAsianExample,
                IdentityAnswer::SouthAsianExample,
                IdentityAnswer::Others,
            ][i];
            AnnotationRow { set_id: format!("o{o}"), ..row(DemographicGroup::ALL[g], q, id) }
        })
    }

    proptest! {
        #[test]
        fn overall_is_weighted_mean_and_order_free(rows in prop::collection::vec(arb_row(), 1..60)) {
            let by_set = |r: &AnnotationRow| Some(r.set_id.clone());
            let fwd = aggregate_review(&rows, by_set).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let back = aggregate_review(&rev, by_set).unwrap();
            prop_assert_eq!(&fwd, &back);
            for s in fwd.per_occupation.values().chain([&fwd.overall]) {
                prop_assert!((0.0..=1.0).contains(&s.realism_score));
                prop_assert!((0.0..=1.0).contains(&s.race_fidelity_score));
            }
            let n = fwd.overall.rows as f64;
            let realism: f64 = fwd.per_occupation.values().map(|s| s.realism_score * s.rows as f64).sum::<f64>() / n;
            let fidelity: f64 = fwd.per_occupation.values().map(|s| s.race_fidelity_score * s.rows as f64).sum::<f64>() / n;
            prop_assert!((realism - fwd.overall.realism_score).abs() < 1e-12);
            prop_assert!((fidelity - fwd.overall.race_fidelity_score).abs() < 1e-12);
        }
    }
}

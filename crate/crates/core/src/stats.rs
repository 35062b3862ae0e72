//! Significance tests and error analysis over evaluation outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::DemographicGroup;
use crate::evaluation::{median, PredictionRecord};
use crate::pipeline::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no variation: {0}")]
    NoVariation(String),
    #[error("sample too small: {0}")]
    TooSmall(String),
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma Q(a, x).
fn gamma_q(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-15;
    const MAX_ITER: usize = 10_000;
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).clamp(0.0, 1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (log_prefix.exp() * h).clamp(0.0, 1.0)
    }
}

/// Upper tail probability of the chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    gamma_q(df / 2.0, x / 2.0)
}

/// How observations equal to the grand median are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    Below,
    Above,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MedianTestOptions {
    pub ties: TieRule,
    pub continuity_correction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianTestResult {
    pub grand_median: f64,
    /// Rows: above, not above. Columns: sample a, sample b.
    pub table: [[u64; 2]; 2],
    pub chi2: f64,
    pub p_value: f64,
}

/// Mood's median test for two independent samples.
pub fn moods_median_test(a: &[f64], b: &[f64], options: MedianTestOptions) -> Result<MedianTestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::TooSmall(format!("samples of size {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("non-finite observation".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let grand_median = median(&pooled).expect("nonempty");
    let mut table = [[0u64; 2]; 2];
    for (col, sample) in [a, b].into_iter().enumerate() {
        for &v in sample {
            let row = if v > grand_median {
                0
            } else if v < grand_median {
                1
            } else {
                match options.ties {
                    TieRule::Below => 1,
                    TieRule::Above => 0,
                    TieRule::Exclude => continue,
                }
            };
            table[row][col] += 1;
        }
    }
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if rows.contains(&0) || cols.contains(&0) {
        return Err(StatsError::NoVariation(format!("contingency table {table:?} has an empty margin")));
    }
    let n = (rows[0] + rows[1]) as f64;
    let [[x11, x12], [x21, x22]] = table.map(|r| r.map(|v| v as f64));
    let mut diff = (x11 * x22 - x12 * x21).abs();
    if options.continuity_correction {
        diff = (diff - n / 2.0).max(0.0);
    }
    let chi2 = n * diff * diff / (rows[0] as f64 * rows[1] as f64 * cols[0] as f64 * cols[1] as f64);
    Ok(MedianTestResult { grand_median, table, chi2, p_value: chi2_sf(chi2, 1.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonferroniResult {
    pub m: usize,
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Bonferroni adjustment; `m` defaults to the number of p-values.
/// P-values are expected in [0, 1].
pub fn bonferroni(p_values: &[f64], alpha: f64, m: Option<usize>) -> BonferroniResult {
    let m = m.unwrap_or(p_values.len()).max(1);
    let adjusted: Vec<f64> = p_values.iter().map(|p| (p * m as f64).min(1.0)).collect();
    let reject = adjusted.iter().map(|p| *p < alpha).collect();
    BonferroniResult { m, adjusted, reject }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub coefficients: Vec<Coefficient>,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// Degrees of freedom of the reference t distribution (clusters - 1).
    pub df: usize,
}

impl RegressionResult {
    pub fn coefficient(&self, term: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.term == term)
    }
}

/// OLS of `outcome` on an intercept plus indicators for every level except
/// `reference`, with CR1 cluster-robust standard errors.
pub fn cluster_robust_ols<L, C>(
    outcome: &[f64],
    categories: &[L],
    levels: &[L],
    reference: &L,
    clusters: &[C],
) -> Result<RegressionResult, StatsError>
where
    L: PartialEq + Display,
    C: Ord,
{
    let n = outcome.len();
    if categories.len() != n || clusters.len() != n {
        return Err(StatsError::Invalid(format!(
            "length mismatch: {n} outcomes, {} categories, {} clusters",
            categories.len(),
            clusters.len()
        )));
    }
    for level in levels {
        if !categories.iter().any(|c| c == level) {
            return Err(StatsError::RankDeficient(format!("no observations for {level}")));
        }
    }
    if let Some(c) = categories.iter().find(|c| !levels.contains(c)) {
        return Err(StatsError::Invalid(format!("unknown category {c}")));
    }
    let dummies: Vec<&L> = levels.iter().filter(|l| *l != reference).collect();
    let k = dummies.len() + 1;
    if n <= k {
        return Err(StatsError::TooSmall(format!("{n} observations for {k} coefficients")));
    }
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 || categories[i] == *dummies[j - 1] { 1.0 } else { 0.0 });
    let y = DVector::from_column_slice(outcome);
    let xtx_inv = (x.transpose() * &x)
        .try_inverse()
        .ok_or_else(|| StatsError::RankDeficient("X'X is singular".into()))?;
    let beta = &xtx_inv * x.transpose() * &y;
    let resid = &y - &x * &beta;

    let mut cluster_index: BTreeMap<&C, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        cluster_index.entry(c).or_default().push(i);
    }
    let g = cluster_index.len();
    if g < 2 {
        return Err(StatsError::TooSmall(format!("{g} cluster; at least 2 required")));
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for rows in cluster_index.values() {
        let mut score = DVector::<f64>::zeros(k);
        for &i in rows {
            score += x.row(i).transpose() * resid[i];
        }
        meat += &score * score.transpose();
    }
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
    let vcov = &xtx_inv * meat * &xtx_inv * factor;
    let df = g - 1;
    let t_dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| StatsError::Invalid(e.to_string()))?;

    let terms = std::iter::once("intercept".to_string()).chain(dummies.iter().map(|d| d.to_string()));
    let coefficients = terms
        .enumerate()
        .map(|(j, term)| {
            let estimate = beta[j];
            let std_error = vcov[(j, j)].max(0.0).sqrt();
            let t_stat = estimate / std_error;
            let p_value = if t_stat.is_nan() { f64::NAN } else { (2.0 * t_dist.sf(t_stat.abs())).min(1.0) };
            Coefficient { term, estimate, std_error, t_stat, p_value }
        })
        .collect();
    Ok(RegressionResult { coefficients, n_obs: n, n_clusters: g, df })
}

/// Linear probability model of correctness on perceived race, Caucasian as the
/// reference, clustered by perturbation set.
pub fn lpm_cluster_regression(predictions: &[PredictionRecord]) -> Result<RegressionResult, StatsError> {
    let y: Vec<f64> = predictions.iter().map(|p| if p.correct { 1.0 } else { 0.0 }).collect();
    let groups: Vec<DemographicGroup> = predictions.iter().map(|p| p.group).collect();
    let clusters: Vec<&str> = predictions.iter().map(|p| p.set_id.as_str()).collect();
    cluster_robust_ols(&y, &groups, &DemographicGroup::ALL, &DemographicGroup::Caucasian, &clusters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassTable {
    pub occupation: String,
    pub target_label: String,
    pub reference: DemographicGroup,
    /// Misclassifications into `target_label`, per group.
    pub counts: BTreeMap<DemographicGroup, usize>,
    /// Percent change relative to the reference count; `None` when the
    /// reference count is zero.
    pub rates: BTreeMap<DemographicGroup, Option<f64>>,
}

/// How much more often each group is misclassified as `target_label` than the
/// reference group, within one occupation.
pub fn misclass_ratios(
    predictions: &[PredictionRecord],
    occupation: &str,
    target_label: &str,
    reference: DemographicGroup,
) -> MisclassTable {
    let mut counts: BTreeMap<DemographicGroup, usize> = DemographicGroup::ALL.iter().map(|g| (*g, 0)).collect();
    for p in predictions {
        if p.occupation == occupation && !p.correct && p.predicted_label == target_label {
            *counts.entry(p.group).or_default() += 1;
        }
    }
    let base = counts[&reference];
    let rates = counts
        .iter()
        .filter(|(g, _)| **g != reference)
        .map(|(g, c)| (*g, (base > 0).then(|| (*c as f64 / base as f64 - 1.0) * 100.0)))
        .collect();
    MisclassTable { occupation: occupation.to_string(), target_label: target_label.to_string(), reference, counts, rates }
}

/// Most frequent wrong label within an occupation; ties go to the
/// alphabetically first label.
pub fn top_misclassified_label(predictions: &[PredictionRecord], occupation: &str) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in predictions.iter().filter(|p| p.occupation == occupation && !p.correct) {
        *counts.entry(p.predicted_label.as_str()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (label, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((label, c));
        }
    }
    best.map(|(l, _)| l.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysisSample {
    /// Set ids per non-reference group, sorted.
    pub per_group: BTreeMap<DemographicGroup, Vec<String>>,
    pub warnings: Vec<String>,
}

/// Sets where the Caucasian variant is classified correctly but the variant of
/// another group is not, sampled up to `n_per_group` per group.
pub fn error_analysis_sample(predictions: &[PredictionRecord], n_per_group: usize, seed: u64) -> ErrorAnalysisSample {
    let mut by_set: BTreeMap<&str, BTreeMap<DemographicGroup, bool>> = BTreeMap::new();
    for p in predictions {
        by_set.entry(p.set_id.as_str()).or_default().insert(p.group, p.correct);
    }
    let mut per_group = BTreeMap::new();
    let mut warnings = Vec::new();
    for group in DemographicGroup::ALL.into_iter().filter(|g| *g != DemographicGroup::Caucasian) {
        let eligible: Vec<&str> = by_set
            .iter()
            .filter(|(_, m)| m.get(&DemographicGroup::Caucasian) == Some(&true) && m.get(&group) == Some(&false))
            .map(|(id, _)| *id)
            .collect();
        if eligible.len() < n_per_group {
            warnings.push(format!("{group}: only {} eligible sets, wanted {n_per_group}", eligible.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["error_analysis", group.canonical_name()]));
        let take = n_per_group.min(eligible.len());
        let mut chosen: Vec<String> =
            sample(&mut rng, eligible.len(), take).into_iter().map(|i| eligible[i].to_string()).collect();
        chosen.sort();
        per_group.insert(group, chosen);
    }
    ErrorAnalysisSample { per_group, warnings }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub model_a: String,
    pub model_b: String,
    pub median_a: f64,
    pub median_b: f64,
    pub chi2: f64,
    pub p_value: f64,
    pub adjusted_p: f64,
    pub reject: bool,
    /// Model with the smaller median per-set std, when the difference is significant.
    pub fairer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub alpha: f64,
    pub m: usize,
    pub comparisons: Vec<PairwiseComparison>,
    /// Significant "fairer than" relations as (fairer, other).
    pub ordering: Vec<(String, String)>,
}

/// All pairwise Mood's median tests over per-set standard deviations, with
/// Bonferroni correction across the n(n-1)/2 pairs.
pub fn compare_models(
    per_model_stds: &BTreeMap<String, Vec<f64>>,
    alpha: f64,
    options: MedianTestOptions,
) -> Result<ModelComparison, StatsError> {
    let names: Vec<&String> = per_model_stds.keys().collect();
    if names.len() < 2 {
        return Err(StatsError::TooSmall(format!("{} model(s); at least 2 required", names.len())));
    }
    let mut raw = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (a, b) = (&per_model_stds[names[i]], &per_model_stds[names[j]]);
            let res = match moods_median_test(a, b, options) {
                Ok(r) => r,
                // Identical pooled values carry no evidence of a difference.
                Err(StatsError::NoVariation(_)) => MedianTestResult {
                    grand_median: median(&[a.as_slice(), b.as_slice()].concat()).unwrap_or(f64::NAN),
                    table: [[0; 2]; 2],
                    chi2: 0.0,
                    p_value: 1.0,
                },
                Err(e) => return Err(e),
            };
            raw.push((names[i], names[j], median(a).unwrap(), median(b).unwrap(), res));
        }
    }
    let p: Vec<f64> = raw.iter().map(|r| r.4.p_value).collect();
    let adj = bonferroni(&p, alpha, None);
    let mut ordering = BTreeSet::new();
    let comparisons = raw
        .into_iter()
        .zip(adj.adjusted.iter().zip(&adj.reject))
        .map(|((a, b, ma, mb, res), (adjusted_p, reject))| {
            let fairer = match (*reject, ma.total_cmp(&mb)) {
                (true, std::cmp::Ordering::Less) => Some(a.clone()),
                (true, std::cmp::Ordering::Greater) => Some(b.clone()),
                _ => None,
            };
            if let Some(f) = &fairer {
                let other = if f == a { b } else { a };
                ordering.insert((f.clone(), other.clone()));
            }
            PairwiseComparison {
                model_a: a.clone(),
                model_b: b.clone(),
                median_a: ma,
                median_b: mb,
                chi2: res.chi2,
                p_value: res.p_value,
                adjusted_p: *adjusted_p,
                reject: *reject,
                fairer,
            }
        })
        .collect();
    Ok(ModelComparison { alpha, m: adj.m, comparisons, ordering: ordering.into_iter().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::ChiSquared;

    fn pred(set: &str, group: DemographicGroup, occ: &str, predicted: &str, correct: bool) -> PredictionRecord {
        PredictionRecord {
            set_id: set.into(),
            group,
            occupation: occ.into(),
            image_ref: String::new(),
            label_list: vec![],
            probabilities: vec![],
            true_label_prob: 0.5,
            predicted_label: predicted.into(),
            correct,
        }
    }

    #[test]
    fn chi2_matches_table_values() {
        assert!((chi2_sf(3.841458820694124, 1.0) - 0.05).abs() < 1e-10);
        assert!((chi2_sf(6.634896601021214, 1.0) - 0.01).abs() < 1e-10);
        assert_eq!(chi2_sf(0.0, 1.0), 1.0);
        assert!((chi2_sf(10.0, 1.0) - 0.001565402258).abs() < 1e-10);
    }

    #[test]
    fn chi2_matches_statrs() {
        for df in [1.0, 2.0, 3.0, 5.0, 10.0] {
            let d = ChiSquared::new(df).unwrap();
            for x in [0.01, 0.5, 1.0, 2.5, 4.0, 10.0, 30.0, 80.0] {
                let ours = chi2_sf(x, df);
                let theirs = 1.0 - d.cdf(x);
                assert!((ours - theirs).abs() < 1e-9, "df={df} x={x}: {ours} vs {theirs}");
            }
        }
    }

    #[test]
    fn mood_separated_samples() {
        let a: Vec<f64> = (1..=5).map(f64::from).collect();
        let b: Vec<f64> = (6..=10).map(f64::from).collect();
        let r = moods_median_test(&a, &b, MedianTestOptions::default()).unwrap();
        assert_eq!(r.grand_median, 5.5);
        assert_eq!(r.table, [[0, 5], [5, 0]]);
        assert!((r.chi2 - 10.0).abs() < 1e-12);
        assert!((r.p_value - 0.001565).abs() < 1e-6);
    }

    #[test]
    fn mood_identical_samples_error() {
        let err = moods_median_test(&[0.1; 5], &[0.1; 5], MedianTestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("no variation"));
    }

    #[test]
    fn mood_tie_rules() {
        let a = [1.0, 2.0, 3.0];
        let b = [3.0, 4.0, 5.0];
        let below = moods_median_test(&a, &b, MedianTestOptions::default()).unwrap();
        assert_eq!(below.table, [[0, 2], [3, 1]]);
        let above = moods_median_test(&a, &b, MedianTestOptions { ties: TieRule::Above, ..Default::default() }).unwrap();
        assert_eq!(above.table, [[1, 3], [2, 0]]);
        let excl = moods_median_test(&a, &b, MedianTestOptions { ties: TieRule::Exclude, ..Default::default() }).unwrap();
        assert_eq!(excl.table, [[0, 2], [2, 0]]);
        let yates = moods_median_test(&a, &b, MedianTestOptions { continuity_correction: true, ..Default::default() }).unwrap();
        assert!(yates.chi2 < below.chi2);
    }

    #[test]
    fn bonferroni_examples() {
        let r = bonferroni(&[0.01, 0.02, 0.04], 0.05, None);
        assert_eq!(r.m, 3);
        assert!((r.adjusted[0] - 0.03).abs() < 1e-12);
        assert!((r.adjusted[1] - 0.06).abs() < 1e-12);
        assert_eq!(r.adjusted[2], 0.12);
        assert_eq!(r.reject, vec![true, false, false]);
        assert_eq!(bonferroni(&[0.4], 0.05, Some(10)).adjusted, vec![1.0]);
    }

    #[test]
    fn two_cluster_regression() {
        let y = [1.0, 0.0, 1.0, 1.0];
        let groups = [DemographicGroup::Caucasian, DemographicGroup::Caucasian, DemographicGroup::Black, DemographicGroup::Black];
        let clusters = ["c1", "c1", "c2", "c2"];
        let levels = [DemographicGroup::Black, DemographicGroup::Caucasian];
        let r = cluster_robust_ols(&y, &groups, &levels, &DemographicGroup::Caucasian, &clusters).unwrap();
        let b0 = r.coefficient("intercept").unwrap();
        let b1 = r.coefficient("Black").unwrap();
        assert!((b0.estimate - 0.5).abs() < 1e-12);
        assert!((b1.estimate - 0.5).abs() < 1e-12);
        assert_eq!(r.n_clusters, 2);
        assert_eq!(r.df, 1);
        // Residuals sum to zero inside each cluster, so every score vanishes.
        assert!(b0.std_error < 1e-12 && b1.std_error < 1e-12);
    }

    #[test]
    fn cross_cluster_regression_has_positive_se() {
        let y = [1.0, 1.0, 0.0, 1.0];
        let groups = [DemographicGroup::Caucasian, DemographicGroup::Black, DemographicGroup::Caucasian, DemographicGroup::Black];
        let clusters = ["s1", "s1", "s2", "s2"];
        let levels = [DemographicGroup::Black, DemographicGroup::Caucasian];
        let r = cluster_robust_ols(&y, &groups, &levels, &DemographicGroup::Caucasian, &clusters).unwrap();
        // Hand sandwich: bread [[.5,-.5],[-.5,1]], meat [[.5,0],[0,0]], factor 2 * 3/2.
        let b1 = r.coefficient("Black").unwrap();
        assert!((b1.std_error - (0.125f64 * 3.0).sqrt()).abs() < 1e-12);
        assert!(b1.p_value > 0.0 && b1.p_value < 1.0);
    }

    #[test]
    fn missing_group_is_rank_deficient() {
        let preds = vec![
            pred("s1", DemographicGroup::Caucasian, "chef", "chef", true),
            pred("s1", DemographicGroup::Black, "chef", "chef", true),
            pred("s2", DemographicGroup::Caucasian, "chef", "chef", true),
            pred("s2", DemographicGroup::Indian, "chef", "cook", false),
        ];
        let err = lpm_cluster_regression(&preds).unwrap_err();
        assert!(matches!(&err, StatsError::RankDeficient(m) if m.contains("East Asian") || m.contains("EastAsian")), "{err}");
    }

    #[test]
    fn misclass_ratio_examples() {
        let mut preds = Vec::new();
        for i in 0..51 {
            preds.push(pred(&format!("b{i}"), DemographicGroup::Black, "chef", "butcher", false));
        }
        for i in 0..25 {
            preds.push(pred(&format!("c{i}"), DemographicGroup::Caucasian, "chef", "butcher", false));
        }
        let t = misclass_ratios(&preds, "chef", "butcher", DemographicGroup::Caucasian);
        assert!((t.rates[&DemographicGroup::Black].unwrap() - 104.0).abs() < 1e-9);
        assert_eq!(t.rates[&DemographicGroup::Indian], Some(-100.0));
        let none = misclass_ratios(&preds, "chef", "waiter", DemographicGroup::Caucasian);
        assert_eq!(none.rates[&DemographicGroup::Black], None);
    }

    #[test]
    fn top_label_ties_alphabetical() {
        let preds = vec![
            pred("a", DemographicGroup::Black, "chef", "waiter", false),
            pred("b", DemographicGroup::Black, "chef", "butcher", false),
            pred("c", DemographicGroup::Black, "chef", "chef", true),
        ];
        assert_eq!(top_misclassified_label(&preds, "chef").as_deref(), Some("butcher"));
        assert_eq!(top_misclassified_label(&preds, "pilot"), None);
    }

    #[test]
    fn error_analysis_is_seeded_and_filtered() {
        let mut preds = Vec::new();
        for i in 0..20 {
            let s = format!("s{i:02}");
            preds.push(pred(&s, DemographicGroup::Caucasian, "chef", "chef", i % 2 == 0));
            preds.push(pred(&s, DemographicGroup::Black, "chef", "cook", false));
        }
        let a = error_analysis_sample(&preds, 5, 7);
        let b = error_analysis_sample(&preds, 5, 7);
        assert_eq!(a, b);
        let black = &a.per_group[&DemographicGroup::Black];
        assert_eq!(black.len(), 5);
        assert!(black.iter().all(|s| s[1..].parse::<u32>().unwrap() % 2 == 0));
        assert!(a.per_group[&DemographicGroup::Indian].is_empty());
        assert!(a.warnings.iter().any(|w| w.contains("Indian")));
    }

    #[test]
    fn identical_models_get_no_ordering() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![0.1, 0.2, 0.3, 0.4]);
        m.insert("b".to_string(), vec![0.1, 0.2, 0.3, 0.4]);
        let c = compare_models(&m, 0.05, MedianTestOptions::default()).unwrap();
        assert_eq!(c.m, 1);
        assert!(c.ordering.is_empty());
    }

    #[test]
    fn separated_models_are_ordered() {
        let mut m = BTreeMap::new();
        m.insert("fair".to_string(), (0..50).map(|i| 0.01 + i as f64 * 1e-4).collect());
        m.insert("unfair".to_string(), (0..50).map(|i| 0.2 + i as f64 * 1e-4).collect());
        m.insert("mid".to_string(), (0..50).map(|i| 0.1 + i as f64 * 1e-4).collect());
        let c = compare_models(&m, 0.05, MedianTestOptions::default()).unwrap();
        assert_eq!(c.m, 3);
        assert!(c.ordering.contains(&("fair".into(), "unfair".into())));
        assert!(c.ordering.contains(&("mid".into(), "unfair".into())));
        assert!(c.ordering.contains(&("fair".into(), "mid".into())));
    }

    proptest! {
        #[test]
        fn bonferroni_only_shrinks_rejections(p in prop::collection::vec(0.0f64..=1.0, 1..30), alpha in 0.001f64..0.2) {
            let r = bonferroni(&p, alpha, None);
            for (i, rej) in r.reject.iter().enumerate() {
                prop_assert!(r.adjusted[i] >= p[i] && r.adjusted[i] <= 1.0);
                if *rej {
                    prop_assert!(p[i] < alpha);
                }
            }
        }

        #[test]
        fn mood_p_value_in_unit_interval(
            a in prop::collection::vec(0.0f64..1.0, 2..40),
            b in prop::collection::vec(0.0f64..1.0, 2..40),
        ) {
            if let Ok(r) = moods_median_test(&a, &b, MedianTestOptions::default()) {
                prop_assert!((0.0..=1.0).contains(&r.p_value));
                let swapped = moods_median_test(&b, &a, MedianTestOptions::default()).unwrap();
                prop_assert!((r.chi2 - swapped.chi2).abs() < 1e-9);
            }
        }
    }
}

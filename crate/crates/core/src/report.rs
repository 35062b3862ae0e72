//! Markdown rendering of evaluation, statistics and review results.
//!
//! Fairness metrics print with three decimals, accuracies and review scores
//! as percentages with one decimal, accuracy deltas as signed percentages
//! with two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::DemographicGroup;
use crate::evaluation::{FairnessReport, IatResult};
use crate::review::ReviewSummary;
use crate::stats::{MisclassTable, ModelComparison, RegressionResult};

pub fn format_metric(v: f64) -> String {
    format!("{v:.3}")
}

pub fn format_percent(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

pub fn format_delta(v: f64) -> String {
    format!("{:+.2}%", v * 100.0)
}

fn format_p(p: f64) -> String {
    if p.is_nan() {
        "n/a".into()
    } else if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

/// Column header for an occupation.
pub fn occupation_abbrev(name: &str) -> String {
    match name {
        "doctor" => "Doc".into(),
        "firefighter" => "FF".into(),
        "mechanic" => "Mec".into(),
        other => {
            let mut c = other.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let sep: Vec<&str> = header.iter().enumerate().map(|(i, _)| if i == 0 { "---" } else { "---:" }).collect();
    let _ = writeln!(s, "| {} |", sep.join(" | "));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub fairness_metric: f64,
    pub accuracy: f64,
}

impl From<&FairnessReport> for ModelRow {
    fn from(r: &FairnessReport) -> Self {
        Self { model: r.model.clone(), fairness_metric: r.fairness_metric, accuracy: r.accuracy }
    }
}

pub fn fairness_table(rows: &[ModelRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.model.clone(), format_metric(r.fairness_metric), format_percent(r.accuracy)])
        .collect();
    table(&strings(&["Model", "Fairness Metric", "Classification Accuracy"]), &body)
}

/// Fairness metric per model and occupation; missing cells print as `-`.
pub fn occupation_table(models: &[(String, BTreeMap<String, f64>)], occupations: &[String]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(occupations.iter().map(|o| occupation_abbrev(o)));
    let body: Vec<Vec<String>> = models
        .iter()
        .map(|(m, scores)| {
            let mut row = vec![m.clone()];
            row.extend(occupations.iter().map(|o| scores.get(o).map(|v| format_metric(*v)).unwrap_or_else(|| "-".into())));
            row
        })
        .collect();
    table(&header, &body)
}

/// Accuracy of each non-reference group minus the Caucasian accuracy.
pub fn delta_table(models: &[(String, BTreeMap<DemographicGroup, f64>)]) -> String {
    let groups: Vec<DemographicGroup> =
        DemographicGroup::ALL.into_iter().filter(|g| *g != DemographicGroup::Caucasian).collect();
    let mut header = vec!["Model".to_string()];
    header.extend(groups.iter().map(|g| g.prompt_identifier_long().to_string()));
    let body: Vec<Vec<String>> = models
        .iter()
        .map(|(m, d)| {
            let mut row = vec![m.clone()];
            row.extend(groups.iter().map(|g| d.get(g).map(|v| format_delta(*v)).unwrap_or_else(|| "-".into())));
            row
        })
        .collect();
    table(&header, &body)
}

trait LongName {
    fn prompt_identifier_long(self) -> &'static str;
}

impl LongName for DemographicGroup {
    fn prompt_identifier_long(self) -> &'static str {
        match self {
            DemographicGroup::EastAsian => "East Asian",
            g => g.canonical_name(),
        }
    }
}

pub fn review_table(summary: &ReviewSummary) -> String {
    let mut body = vec![vec![
        "Overall".to_string(),
        format_percent(summary.overall.realism_score),
        format_percent(summary.overall.race_fidelity_score),
    ]];
    for (occ, s) in &summary.per_occupation {
        let mut c = occ.chars();
        let name: String = c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default();
        body.push(vec![name, format_percent(s.realism_score), format_percent(s.race_fidelity_score)]);
    }
    table(&strings(&["Data", "Realism Score", "Race Fidelity Score"]), &body)
}

pub fn comparison_table(cmp: &ModelComparison) -> String {
    let body: Vec<Vec<String>> = cmp
        .comparisons
        .iter()
        .map(|c| {
            vec![
                format!("{} vs {}", c.model_a, c.model_b),
                format!("{:.4}", c.median_a),
                format!("{:.4}", c.median_b),
                format!("{:.3}", c.chi2),
                format_p(c.p_value),
                format_p(c.adjusted_p),
                c.fairer.clone().unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    table(
        &strings(&["Comparison", "Median std A", "Median std B", "Chi2", "p", "Bonferroni p", "Fairer"]),
        &body,
    )
}

pub fn regression_table(reg: &RegressionResult) -> String {
    let body: Vec<Vec<String>> = reg
        .coefficients
        .iter()
        .map(|c| {
            vec![
                c.term.clone(),
                format!("{:.4}", c.estimate),
                format!("{:.4}", c.std_error),
                format!("{:.3}", c.t_stat),
                format_p(c.p_value),
            ]
        })
        .collect();
    table(&strings(&["Term", "Estimate", "Cluster SE", "t", "p"]), &body)
}

pub fn misclass_table(t: &MisclassTable) -> String {
    let body: Vec<Vec<String>> = t
        .counts
        .iter()
        .map(|(g, c)| {
            let rate = if *g == t.reference {
                "reference".to_string()
            } else {
                t.rates.get(g).copied().flatten().map(|r| format!("{r:+.0}%")).unwrap_or_else(|| "undefined".into())
            };
            vec![g.prompt_identifier_long().to_string(), c.to_string(), rate]
        })
        .collect();
    table(&strings(&["Group", &format!("Predicted as {}", t.target_label), "vs reference"]), &body)
}

pub fn iat_table(models: &[(String, IatResult)]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(DemographicGroup::ALL.iter().map(|g| g.prompt_identifier_long().to_string()));
    header.push("Spread".into());
    let body: Vec<Vec<String>> = models
        .iter()
        .map(|(m, r)| {
            let mut row = vec![m.clone()];
            row.extend(DemographicGroup::ALL.iter().map(|g| {
                r.per_group_mean.get(g).map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
            }));
            row.push(format!("{:.3}", r.spread));
            row
        })
        .collect();
    table(&header, &body)
}

/// Everything `report.json` holds; every section except `models` is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub models: Vec<FairnessReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ModelComparison>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub regressions: BTreeMap<String, RegressionResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub misclassifications: Vec<MisclassTable>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub top_misclassified: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iat: Vec<(String, IatResult)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewSummary>,
}

impl BenchmarkReport {
    /// Occupations covered by any model, in name order.
    pub fn occupations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.models.iter().flat_map(|m| m.per_occupation.keys().cloned()).collect();
        v.sort();
        v.dedup();
        v
    }
}

pub fn render_markdown(report: &BenchmarkReport) -> String {
    let mut s = String::from("# Fairness benchmark\n\n");
    if let Some(ls) = &report.label_set {
        let _ = writeln!(s, "Label set: {ls}");
    }
    if let Some(t) = report.temperature {
        let _ = writeln!(s, "Softmax temperature: {t}");
    }
    if report.label_set.is_some() || report.temperature.is_some() {
        s.push('\n');
    }
    if !report.models.is_empty() {
        let rows: Vec<ModelRow> = report.models.iter().map(ModelRow::from).collect();
        let _ = writeln!(s, "## Fairness metric and accuracy\n\n{}", fairness_table(&rows));
        let occ: Vec<(String, BTreeMap<String, f64>)> = report
            .models
            .iter()
            .map(|m| (m.model.clone(), m.per_occupation.iter().map(|(o, v)| (o.clone(), v.fairness_metric)).collect()))
            .collect();
        let _ = writeln!(s, "## Fairness metric by occupation\n\n{}", occupation_table(&occ, &report.occupations()));
        let deltas: Vec<(String, BTreeMap<DemographicGroup, f64>)> =
            report.models.iter().map(|m| (m.model.clone(), m.accuracy_delta_vs_caucasian.clone())).collect();
        let _ = writeln!(s, "## Accuracy difference vs Caucasian\n\n{}", delta_table(&deltas));
    }
    if let Some(c) = &report.comparison {
        let _ = writeln!(
            s,
            "## Pairwise median tests (alpha {}, {} comparisons)\n\n{}",
            c.alpha,
            c.m,
            comparison_table(c)
        );
        if !c.ordering.is_empty() {
            for (a, b) in &c.ordering {
                let _ = writeln!(s, "- {a} > {b}");
            }
            s.push('\n');
        }
    }
    for (model, reg) in &report.regressions {
        let _ = writeln!(
            s,
            "## Correctness on perceived race: {model} ({} obs, {} clusters)\n\n{}",
            reg.n_obs,
            reg.n_clusters,
            regression_table(reg)
        );
    }
    for (model, per_occ) in &report.top_misclassified {
        let _ = writeln!(s, "## Top misclassified label: {model}\n");
        for (occ, label) in per_occ {
            let _ = writeln!(s, "- {occ}: {label}");
        }
        s.push('\n');
    }
    for t in &report.misclassifications {
        let _ = writeln!(s, "## {} predicted as {}\n\n{}", t.occupation, t.target_label, misclass_table(t));
    }
    if !report.iat.is_empty() {
        let _ = writeln!(s, "## Trustworthiness probe\n\n{}", iat_table(&report.iat));
    }
    if let Some(r) = &report.review {
        let _ = writeln!(s, "## Human review\n\n{}", review_table(r));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::review::ReviewScore;

    #[test]
    fn fairness_row_formatting() {
        let t = fairness_table(&[ModelRow { model: "FLAVA".into(), fairness_metric: 0.983, accuracy: 0.901 }]);
        assert!(t.contains("| FLAVA | 0.983 | 90.1% |"), "{t}");
        assert!(t.starts_with("| Model | Fairness Metric | Classification Accuracy |"));
    }

    #[test]
    fn occupation_columns_abbreviated() {
        let occs: Vec<String> = ["chef", "doctor", "firefighter", "mechanic", "pilot"].iter().map(|s| s.to_string()).collect();
        let scores = occs.iter().cloned().zip([0.999, 0.728, 0.988, 0.986, 0.973]).collect();
        let t = occupation_table(&[("FLAVA".into(), scores)], &occs);
        assert!(t.starts_with("| Model | Chef | Doc | FF | Mec | Pilot |"));
        assert!(t.contains("| FLAVA | 0.999 | 0.728 | 0.988 | 0.986 | 0.973 |"));
    }

    #[test]
    fn delta_formatting() {
        let d = [(DemographicGroup::Black, -0.0609), (DemographicGroup::EastAsian, -0.0321), (DemographicGroup::Indian, -0.0320)]
            .into_iter()
            .collect();
        let t = delta_table(&[("all".into(), d)]);
        assert!(t.contains("| Model | Black | East Asian | Indian |"));
        assert!(t.contains("| all | -6.09% | -3.21% | -3.20% |"), "{t}");
        assert_eq!(format_delta(0.12), "+12.00%");
    }

    #[test]
    fn review_rows() {
        let score = |n: usize, q: usize, f: usize| ReviewScore {
            rows: n,
            no_issue: q,
            identity_match: f,
            realism_score: q as f64 / n as f64,
            race_fidelity_score: f as f64 / n as f64,
        };
        let summary = ReviewSummary {
            overall: score(2000, 1715, 1806),
            per_occupation: [("chef".to_string(), score(1000, 849, 906))].into_iter().collect(),
            unassigned: 0,
        };
        let t = review_table(&summary);
        assert!(t.contains("| Chef | 84.9% | 90.6% |"), "{t}");
        assert!(t.contains("| Overall |"));
    }

    #[test]
    fn empty_report_renders_title_only() {
        assert_eq!(render_markdown(&BenchmarkReport::default()), "# Fairness benchmark\n\n");
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use fairperturb::dataset::{DemographicGroup, Manifest};
use fairperturb::evaluation::{
    fairness_report, manifest_items, predictions_from_scores, read_jsonl, score_items, write_jsonl, FairnessReport,
    PredictionRecord, Scorer, SimilarityRecord,
};
use fairperturb::pipeline::{run_base_phase, run_perturb_phase, run_pipeline, YieldReport, MANIFEST_FILE};
use fairperturb::report::{
    comparison_table, fairness_table, misclass_table, occupation_abbrev, occupation_table, regression_table,
    render_markdown, review_table, BenchmarkReport, ModelRow,
};
use fairperturb::review::{aggregate_review, occupation_lookup, read_annotations, sample_for_review, write_review_sheet, ReviewSummary};
use fairperturb::stats::{
    compare_models, error_analysis_sample, lpm_cluster_regression, misclass_ratios, top_misclassified_label,
    ErrorAnalysisSample, MedianTestOptions, MisclassTable, ModelComparison, RegressionResult, TieRule,
};
use serde::{Deserialize, Serialize};

use crate::config::{EvalRoute, RunConfig};
use crate::error::CliError;
use crate::figures::{bar_chart, Axis, Series};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn model_name(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Config(format!("cannot derive a model name from {}", path.display())))
}

/// Model name from each file stem; stems must be distinct.
fn named_files(paths: &[PathBuf]) -> Result<Vec<(String, &PathBuf)>, CliError> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let name = model_name(p)?;
            if !seen.insert(name.clone()) {
                return Err(CliError::Config(format!("two input files share the model name {name:?}")));
            }
            Ok((name, p))
        })
        .collect()
}

fn manifest_path(config: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.join(MANIFEST_FILE))
}

fn write_manifest_outputs(config: &RunConfig, manifest: &Manifest) -> Result<(), CliError> {
    let out = &config.output_dir;
    manifest.write(&out.join(MANIFEST_FILE))?;
    let yields = YieldReport::from_manifest(manifest);
    write_json(&out.join("yield.json"), &yields)?;
    let text = yields.to_text();
    write_text(&out.join("yield.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_generate(config: &RunConfig) -> Result<(), CliError> {
    let adapters = config.pipeline_adapters()?;
    create_dir(&config.output_dir)?;
    let manifest = run_base_phase(&config.pipeline, &adapters, &config.output_dir)?;
    write_manifest_outputs(config, &manifest)
}

pub fn cmd_perturb(config: &RunConfig, manifest: Option<&Path>) -> Result<(), CliError> {
    let adapters = config.pipeline_adapters()?;
    let base = Manifest::read(&manifest_path(config, manifest))?;
    create_dir(&config.output_dir)?;
    let manifest = run_perturb_phase(&config.pipeline, &adapters, &config.output_dir, &base)?;
    write_manifest_outputs(config, &manifest)
}

pub fn cmd_run(config: &RunConfig) -> Result<(), CliError> {
    let adapters = config.pipeline_adapters()?;
    create_dir(&config.output_dir)?;
    let manifest = run_pipeline(&config.pipeline, &adapters, &config.output_dir)?;
    write_manifest_outputs(config, &manifest)
}

fn evaluation_markdown(reports: &[FairnessReport]) -> String {
    let rows: Vec<ModelRow> = reports.iter().map(ModelRow::from).collect();
    let occupations: Vec<String> = reports
        .iter()
        .flat_map(|r| r.per_occupation.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let occ: Vec<(String, BTreeMap<String, f64>)> = reports
        .iter()
        .map(|r| (r.model.clone(), r.per_occupation.iter().map(|(o, s)| (o.clone(), s.fairness_metric)).collect()))
        .collect();
    format!("{}\n{}", fairness_table(&rows), occupation_table(&occ, &occupations))
}

pub struct EvaluateArgs {
    pub manifest: Option<PathBuf>,
    pub scores: Vec<PathBuf>,
    pub model: Option<String>,
    pub occupation: Option<String>,
}

/// Scores the manifest's sampled sets with the bound backend, or rescores
/// stored similarity logs, then writes predictions and the fairness summary.
pub fn cmd_evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let out = &config.output_dir;
    let eval = &config.evaluation;
    let occupations = &config.pipeline.occupations;
    create_dir(out)?;
    let mut per_model: Vec<(String, Vec<SimilarityRecord>)> = Vec::new();
    if args.scores.is_empty() {
        let path = manifest_path(config, args.manifest.as_deref());
        let manifest = Manifest::read(&path)?;
        let items = manifest_items(&manifest, args.occupation.as_deref());
        if items.is_empty() {
            return Err(CliError::Data(format!("evaluate: {} has no sampled sets to score", path.display())));
        }
        let root = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let scored = match eval.route {
            EvalRoute::ZeroShot => {
                let c = config.zero_shot()?;
                score_items(&items, root, occupations, eval.label_set, Scorer::ZeroShot(c.as_ref()))?
            }
            EvalRoute::Generative => {
                let s = config.scorer()?;
                score_items(&items, root, occupations, eval.label_set, Scorer::Generative(s.as_ref()))?
            }
        };
        let model = args.model.clone().unwrap_or_else(|| eval.model.clone());
        if scored.scores.is_empty() {
            let first = scored.skipped.first().map(|s| s.error.clone()).unwrap_or_default();
            return Err(CliError::Adapter(format!("evaluate: every image failed to score, first error: {first}")));
        }
        if !scored.skipped.is_empty() {
            eprintln!("evaluate: skipped {} image(s)", scored.skipped.len());
            write_jsonl(&scored.skipped, &out.join("skipped").join(format!("{model}.jsonl")))?;
        }
        write_jsonl(&scored.scores, &out.join("scores").join(format!("{model}.jsonl")))?;
        per_model.push((model, scored.scores));
    } else {
        for (name, path) in named_files(&args.scores)? {
            let mut records: Vec<SimilarityRecord> = read_jsonl(path)?;
            if let Some(o) = &args.occupation {
                records.retain(|r| &r.item.occupation == o);
            }
            per_model.push((name, records));
        }
    }
    let mut reports = Vec::new();
    for (model, scores) in &per_model {
        let preds = predictions_from_scores(scores, occupations, eval.temperature)?;
        write_jsonl(&preds, &out.join("predictions").join(format!("{model}.jsonl")))?;
        reports.push(fairness_report(model, &preds)?);
    }
    write_json(&out.join("fairness.json"), &reports)?;
    let md = evaluation_markdown(&reports);
    write_text(&out.join("fairness.md"), &md)?;
    print!("{md}");
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ModelComparison>,
    #[serde(default)]
    pub regressions: BTreeMap<String, RegressionResult>,
    #[serde(default)]
    pub misclassifications: Vec<MisclassTable>,
    #[serde(default)]
    pub top_misclassified: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub error_analysis: BTreeMap<String, ErrorAnalysisSample>,
}

pub struct StatsArgs {
    pub predictions: Vec<PathBuf>,
    pub alpha: f64,
    pub ties: TieRule,
    pub continuity_correction: bool,
    /// `occupation=label` pairs.
    pub misclass: Vec<String>,
    pub error_sample: Option<usize>,
    pub seed: u64,
}

pub fn cmd_stats(config: &RunConfig, args: &StatsArgs) -> Result<(), CliError> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Config(format!("alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let mut targets = Vec::new();
    for m in &args.misclass {
        let (occ, label) = m
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--misclass expects occupation=label, got {m:?}")))?;
        targets.push((occ.to_string(), label.to_string()));
    }
    let mut stds = BTreeMap::new();
    let mut output = StatsOutput::default();
    for (model, path) in named_files(&args.predictions)? {
        let preds: Vec<PredictionRecord> = read_jsonl(path)?;
        let report = fairness_report(&model, &preds)?;
        stds.insert(model.clone(), report.set_stds.values().copied().collect::<Vec<f64>>());
        output.regressions.insert(model.clone(), lpm_cluster_regression(&preds)?);
        let occupations: BTreeSet<&str> = preds.iter().map(|p| p.occupation.as_str()).collect();
        let top = occupations
            .into_iter()
            .filter_map(|o| top_misclassified_label(&preds, o).map(|l| (o.to_string(), l)))
            .collect();
        output.top_misclassified.insert(model.clone(), top);
        for (occ, label) in &targets {
            let mut t = misclass_ratios(&preds, occ, label, DemographicGroup::Caucasian);
            t.occupation = format!("{model}: {occ}");
            output.misclassifications.push(t);
        }
        if let Some(n) = args.error_sample {
            output.error_analysis.insert(model.clone(), error_analysis_sample(&preds, n, args.seed));
        }
    }
    if stds.len() >= 2 {
        let opts = MedianTestOptions { ties: args.ties, continuity_correction: args.continuity_correction };
        output.comparison = Some(compare_models(&stds, args.alpha, opts)?);
    }
    let out = &config.output_dir;
    create_dir(out)?;
    write_json(&out.join("stats.json"), &output)?;
    let mut md = String::new();
    if let Some(c) = &output.comparison {
        md.push_str(&comparison_table(c));
        md.push('\n');
    }
    for (model, reg) in &output.regressions {
        md.push_str(&format!("{model}\n\n{}\n", regression_table(reg)));
    }
    for t in &output.misclassifications {
        md.push_str(&format!("{} as {}\n\n{}\n", t.occupation, t.target_label, misclass_table(t)));
    }
    write_text(&out.join("stats.md"), &md)?;
    print!("{md}");
    Ok(())
}

pub struct ReportArgs {
    pub predictions: Vec<PathBuf>,
    pub fairness: Vec<PathBuf>,
    pub stats: Option<PathBuf>,
    pub review: Option<PathBuf>,
    pub label_set: Option<String>,
    pub temperature: Option<f64>,
}

/// A fairness file holds one report or a list of them.
fn read_fairness(path: &Path) -> Result<Vec<FairnessReport>, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn build_report(args: &ReportArgs) -> Result<BenchmarkReport, CliError> {
    let mut report = BenchmarkReport {
        label_set: args.label_set.clone(),
        temperature: args.temperature,
        ..BenchmarkReport::default()
    };
    for path in &args.fairness {
        report.models.extend(read_fairness(path)?);
    }
    for (model, path) in named_files(&args.predictions)? {
        let preds: Vec<PredictionRecord> = read_jsonl(path)?;
        report.models.push(fairness_report(&model, &preds)?);
    }
    let mut names = BTreeSet::new();
    for m in &report.models {
        if !names.insert(m.model.as_str()) {
            return Err(CliError::Config(format!("model {:?} appears in more than one input", m.model)));
        }
    }
    if let Some(p) = &args.stats {
        let s: StatsOutput = read_json(p)?;
        report.comparison = s.comparison;
        report.regressions = s.regressions;
        report.misclassifications = s.misclassifications;
        report.top_misclassified = s.top_misclassified;
    }
    if let Some(p) = &args.review {
        report.review = Some(read_json::<ReviewSummary>(p)?);
    }
    if report.models.is_empty() && report.comparison.is_none() && report.review.is_none() {
        return Err(CliError::Config("report needs at least one of --predictions, --fairness, --stats, --review".into()));
    }
    Ok(report)
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::io(path, e))
}

fn write_figures(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut save = |name: &str, img: image::RgbImage| -> Result<(), CliError> {
        let p = dir.join(name);
        save_png(&img, &p)?;
        written.push(p);
        Ok(())
    };
    if !report.models.is_empty() {
        let names: Vec<String> = report.models.iter().map(|m| m.model.clone()).collect();
        let metric = Series { name: "fairness metric".into(), values: report.models.iter().map(|m| m.fairness_metric).collect() };
        save("fairness_metric.png", bar_chart("Fairness metric", &names, &[metric], Axis::Plain))?;
        let acc = Series { name: "accuracy".into(), values: report.models.iter().map(|m| m.accuracy).collect() };
        save("accuracy.png", bar_chart("Classification accuracy", &names, &[acc], Axis::Percent))?;
        let occupations = report.occupations();
        if !occupations.is_empty() {
            let cats: Vec<String> = occupations.iter().map(|o| occupation_abbrev(o)).collect();
            let series: Vec<Series> = report
                .models
                .iter()
                .map(|m| Series {
                    name: m.model.clone(),
                    values: occupations
                        .iter()
                        .map(|o| m.per_occupation.get(o).map_or(f64::NAN, |s| s.fairness_metric))
                        .collect(),
                })
                .collect();
            save("occupation_fairness.png", bar_chart("Fairness metric by occupation", &cats, &series, Axis::Plain))?;
        }
        if report.models.iter().any(|m| !m.accuracy_delta_vs_caucasian.is_empty()) {
            let groups: Vec<DemographicGroup> =
                DemographicGroup::ALL.into_iter().filter(|g| *g != DemographicGroup::Caucasian).collect();
            let cats: Vec<String> = groups.iter().map(|g| g.canonical_name().to_string()).collect();
            let series: Vec<Series> = report
                .models
                .iter()
                .map(|m| Series {
                    name: m.model.clone(),
                    values: groups.iter().map(|g| m.accuracy_delta_vs_caucasian.get(g).copied().unwrap_or(f64::NAN)).collect(),
                })
                .collect();
            save("accuracy_delta.png", bar_chart("Accuracy minus Caucasian accuracy", &cats, &series, Axis::Percent))?;
        }
    }
    if let Some(r) = &report.review {
        let mut cats = vec!["Overall".to_string()];
        cats.extend(r.per_occupation.keys().map(|o| occupation_abbrev(o)));
        let scores: Vec<_> = std::iter::once(&r.overall).chain(r.per_occupation.values()).collect();
        let series = [
            Series { name: "realism".into(), values: scores.iter().map(|s| s.realism_score).collect() },
            Series { name: "race fidelity".into(), values: scores.iter().map(|s| s.race_fidelity_score).collect() },
        ];
        save("review.png", bar_chart("Human review", &cats, &series, Axis::Percent))?;
    }
    Ok(written)
}

pub fn cmd_report(config: &RunConfig, args: &ReportArgs) -> Result<(), CliError> {
    let report = build_report(args)?;
    let out = &config.output_dir;
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    let md = render_markdown(&report);
    write_text(&out.join("report.md"), &md)?;
    write_figures(&report, &out.join("figures"))?;
    print!("{md}");
    Ok(())
}

pub fn cmd_review_sample(config: &RunConfig, manifest: Option<&Path>, fraction: f64) -> Result<(), CliError> {
    let manifest = Manifest::read(&manifest_path(config, manifest))?;
    let items = sample_for_review(&manifest, fraction, config.pipeline.seed)?;
    create_dir(&config.output_dir)?;
    let path = config.output_dir.join("review_sheet.csv");
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_review_sheet(&items, file)?;
    println!("wrote {} review items to {}", items.len(), path.display());
    Ok(())
}

pub fn cmd_review_aggregate(config: &RunConfig, manifest: Option<&Path>, annotations: &Path) -> Result<(), CliError> {
    let lookup = match manifest {
        Some(p) => occupation_lookup(&Manifest::read(p)?),
        None => {
            let default = manifest_path(config, None);
            if default.exists() {
                occupation_lookup(&Manifest::read(&default)?)
            } else {
                BTreeMap::new()
            }
        }
    };
    let rows = read_annotations(annotations)?;
    let summary = aggregate_review(&rows, |r| lookup.get(&r.set_id).cloned())?;
    if summary.unassigned > 0 {
        eprintln!("review: {} row(s) have no occupation in the manifest", summary.unassigned);
    }
    create_dir(&config.output_dir)?;
    write_json(&config.output_dir.join("review.json"), &summary)?;
    let md = review_table(&summary);
    write_text(&config.output_dir.join("review.md"), &md)?;
    print!("{md}");
    Ok(())
}

//! `fairperturb`: build perturbation datasets, evaluate classifiers on them
//! and render fairness reports.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 config error, 3 adapter error,
//! 4 data validation error.

mod commands;
mod config;
mod error;
mod figures;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fairperturb::dataset::LabelSet;
use fairperturb::stats::TieRule;

use crate::commands::{EvaluateArgs, ReportArgs, StatsArgs};
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fairperturb", version, about = "Perturbation-set fairness benchmark")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one occupation.
    #[arg(long, global = true)]
    occupation: Option<String>,
    #[arg(long, global = true, value_parser = parse_label_set)]
    label_set: Option<LabelSet>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Output directory; every file is written below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn parse_label_set(s: &str) -> Result<LabelSet, String> {
    s.parse()
}

#[derive(Clone, Copy, ValueEnum)]
enum Ties {
    Below,
    Above,
    Exclude,
}

impl From<Ties> for TieRule {
    fn from(t: Ties) -> Self {
        match t {
            Ties::Below => TieRule::Below,
            Ties::Above => TieRule::Above,
            Ties::Exclude => TieRule::Exclude,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate, filter and mask base images.
    Generate,
    /// Inpaint variants for a generated manifest, filter and sample sets.
    Perturb {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Every pipeline stage in one go.
    Run,
    /// Score sampled sets (or stored score logs) and compute fairness.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stored similarity logs to rescore; the file stem names the model.
        #[arg(long, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Model comparisons and regressions over prediction logs.
    Stats {
        /// Prediction logs; the file stem names the model.
        #[arg(long, num_args = 1.., required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = Ties::Below)]
        ties: Ties,
        /// Apply the continuity correction to the median test.
        #[arg(long)]
        yates: bool,
        /// Misclassification comparison as occupation=label; repeatable.
        #[arg(long)]
        misclass: Vec<String>,
        /// Sample this many error-analysis sets per group.
        #[arg(long)]
        error_sample: Option<usize>,
    },
    /// Markdown report, JSON report and figures.
    Report {
        #[arg(long, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Fairness summaries written by `evaluate`.
        #[arg(long, num_args = 1..)]
        fairness: Vec<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        review: Option<PathBuf>,
    },
    /// Human review sheets.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Stratified sample of dataset images for annotation.
    Sample {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0 / 6.0)]
        fraction: f64,
    },
    /// Realism and race fidelity scores from a completed sheet.
    Aggregate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        annotations: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut config = RunConfig::load(g.config.as_deref())?;
    let overrides = Overrides {
        seed: g.seed,
        occupation: g.occupation.clone(),
        label_set: g.label_set,
        temperature: g.temperature,
        out: g.out.clone(),
    };
    config.apply(&overrides)?;
    match cli.command {
        Command::Generate => commands::cmd_generate(&config),
        Command::Perturb { manifest } => commands::cmd_perturb(&config, manifest.as_deref()),
        Command::Run => commands::cmd_run(&config),
        Command::Evaluate { manifest, scores, model } => commands::cmd_evaluate(
            &config,
            &EvaluateArgs { manifest, scores, model, occupation: g.occupation.clone() },
        ),
        Command::Stats { predictions, alpha, ties, yates, misclass, error_sample } => commands::cmd_stats(
            &config,
            &StatsArgs {
                predictions,
                alpha,
                ties: ties.into(),
                continuity_correction: yates,
                misclass,
                error_sample,
                seed: config.pipeline.seed,
            },
        ),
        Command::Report { predictions, fairness, stats, review } => commands::cmd_report(
            &config,
            &ReportArgs {
                predictions,
                fairness,
                stats,
                review,
                label_set: g.label_set.map(|l| format!("{l:?}").to_lowercase()),
                temperature: g.temperature,
            },
        ),
        Command::Review { command } => match command {
            ReviewCommand::Sample { manifest, fraction } => {
                commands::cmd_review_sample(&config, manifest.as_deref(), fraction)
            }
            ReviewCommand::Aggregate { manifest, annotations } => {
                commands::cmd_review_aggregate(&config, manifest.as_deref(), &annotations)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fairperturb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

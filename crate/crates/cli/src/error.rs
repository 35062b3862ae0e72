use fairperturb::dataset::ManifestError;
use fairperturb::evaluation::EvalError;
use fairperturb::pipeline::PipelineError;
use fairperturb::review::ReviewError;
use fairperturb::stats::StatsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Adapter(_) => 3,
            CliError::Data(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::ConfigMismatch { .. } => CliError::Config(msg),
            PipelineError::Adapter { .. } => CliError::Adapter(msg),
            PipelineError::Io { .. } => CliError::Io(msg),
            PipelineError::Manifest(ManifestError::Io { .. }) => CliError::Io(msg),
            PipelineError::NoSurvivors { .. }
            | PipelineError::InsufficientYield { .. }
            | PipelineError::Manifest(_)
            | PipelineError::MissingRecord(_) => CliError::Data(msg),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = format!("evaluate: {e}");
        match e {
            EvalError::Temperature(_) => CliError::Config(msg),
            EvalError::Adapter(_) => CliError::Adapter(msg),
            EvalError::Io { .. } => CliError::Io(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Data(format!("stats: {e}"))
    }
}

impl From<ReviewError> for CliError {
    fn from(e: ReviewError) -> Self {
        let msg = format!("review: {e}");
        match e {
            ReviewError::Fraction(_) => CliError::Config(msg),
            ReviewError::Io { .. } => CliError::Io(msg),
            _ => CliError::Data(msg),
        }
    }
}

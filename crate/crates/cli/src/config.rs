use std::path::{Path, PathBuf};
use std::sync::Arc;

use fairperturb::adapters::{
    GenerativeScorer, HttpBackend, HttpConfig, MockBackend, MockConfig, PipelineAdapters, ZeroShotClassifier,
};
use fairperturb::dataset::LabelSet;
use fairperturb::evaluation::DEFAULT_TEMPERATURE;
use fairperturb::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Backend for one adapter interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterBinding {
    /// Deterministic mocks; `table` is a JSON mock configuration, permissive
    /// defaults when absent.
    Mock {
        #[serde(default)]
        table: Option<PathBuf>,
    },
    Http(HttpConfig),
}

/// Per-interface bindings; unset interfaces fall back to `default`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterBindings {
    pub default: Option<AdapterBinding>,
    pub generator: Option<AdapterBinding>,
    pub inpainter: Option<AdapterBinding>,
    pub vqa: Option<AdapterBinding>,
    pub detector: Option<AdapterBinding>,
    pub segmenter: Option<AdapterBinding>,
    pub race_classifier: Option<AdapterBinding>,
    pub zero_shot: Option<AdapterBinding>,
    pub scorer: Option<AdapterBinding>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRoute {
    #[default]
    ZeroShot,
    Generative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub label_set: LabelSet,
    pub temperature: f64,
    pub model: String,
    pub route: EvalRoute,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { label_set: LabelSet::default(), temperature: DEFAULT_TEMPERATURE, model: "model".into(), route: EvalRoute::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub adapters: AdapterBindings,
    pub evaluation: EvaluationConfig,
    /// Directory relative paths in the file resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            pipeline: PipelineConfig::default(),
            adapters: AdapterBindings::default(),
            evaluation: EvaluationConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub occupation: Option<String>,
    pub label_set: Option<LabelSet>,
    pub temperature: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                Self::parse(&text, dir).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.seed {
            self.pipeline.seed = s;
        }
        if let Some(name) = &o.occupation {
            let spec = self
                .pipeline
                .occupation(name)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("unknown occupation {name:?}")))?;
            self.pipeline.occupations = vec![spec];
        }
        if let Some(l) = o.label_set {
            self.evaluation.label_set = l;
        }
        if let Some(t) = o.temperature {
            self.evaluation.temperature = t;
        }
        if !(self.evaluation.temperature > 0.0 && self.evaluation.temperature.is_finite()) {
            return Err(CliError::Config(format!("temperature must be positive, got {}", self.evaluation.temperature)));
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        Ok(())
    }

    fn binding(&self, interface: &str) -> Result<&AdapterBinding, CliError> {
        let b = &self.adapters;
        let specific = match interface {
            "generator" => &b.generator,
            "inpainter" => &b.inpainter,
            "vqa" => &b.vqa,
            "detector" => &b.detector,
            "segmenter" => &b.segmenter,
            "race_classifier" => &b.race_classifier,
            "zero_shot" => &b.zero_shot,
            "scorer" => &b.scorer,
            other => unreachable!("no adapter interface {other}"),
        };
        specific
            .as_ref()
            .or(b.default.as_ref())
            .ok_or_else(|| CliError::Config(format!("missing key adapters.{interface} (and no adapters.default)")))
    }

    fn mock_config(&self, table: &Option<PathBuf>) -> Result<MockConfig, CliError> {
        match table {
            None => Ok(MockConfig::permissive()),
            Some(p) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("cannot read mock table {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("mock table {}: {e}", path.display())))
            }
        }
    }

    fn http(&self, h: &HttpConfig) -> HttpConfig {
        let mut h = h.clone();
        if h.params.is_null() {
            h.params = self.pipeline.backend_params.clone();
        }
        h
    }

    pub fn pipeline_adapters(&self) -> Result<PipelineAdapters, CliError> {
        macro_rules! bind {
            ($name:ident) => {
                match self.binding(stringify!($name))? {
                    AdapterBinding::Mock { table } => {
                        let arc: Arc<_> = Arc::new(MockBackend::new(self.mock_config(table)?).$name);
                        arc as Arc<_>
                    }
                    AdapterBinding::Http(h) => Arc::new(HttpBackend::new(self.http(h))) as Arc<_>,
                }
            };
        }
        Ok(PipelineAdapters {
            generator: bind!(generator),
            inpainter: bind!(inpainter),
            vqa: bind!(vqa),
            detector: bind!(detector),
            segmenter: bind!(segmenter),
            race_classifier: bind!(race_classifier),
        })
    }

    pub fn zero_shot(&self) -> Result<Box<dyn ZeroShotClassifier>, CliError> {
        Ok(match self.binding("zero_shot")? {
            AdapterBinding::Mock { table } => Box::new(MockBackend::new(self.mock_config(table)?).zero_shot),
            AdapterBinding::Http(h) => Box::new(HttpBackend::new(self.http(h))),
        })
    }

    pub fn scorer(&self) -> Result<Box<dyn GenerativeScorer>, CliError> {
        Ok(match self.binding("scorer")? {
            AdapterBinding::Mock { table } => Box::new(MockBackend::new(self.mock_config(table)?).scorer),
            AdapterBinding::Http(h) => Box::new(HttpBackend::new(self.http(h))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = r#"
output_dir = "results"

[pipeline]
seed = 9
images_per_occupation = 40
top_k = 20
sets_per_occupation = 5

[adapters.default]
kind = "mock"

[adapters.zero_shot]
kind = "http"
endpoint = "http://localhost:9000"
timeout_secs = 5

[evaluation]
label_set = "base"
temperature = 0.5
model = "clip"
"#;
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.pipeline.seed, 9);
        assert_eq!(c.pipeline.top_k, 20);
        assert_eq!(c.evaluation.label_set, LabelSet::Base);
        assert_eq!(c.output_dir, PathBuf::from("results"));
        assert!(matches!(c.binding("vqa").unwrap(), AdapterBinding::Mock { table: None }));
        assert!(matches!(c.binding("zero_shot").unwrap(), AdapterBinding::Http(h) if h.timeout_secs == 5));
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let c = RunConfig::parse(block, Path::new(".")).unwrap();
        assert_eq!(c.pipeline.occupations.len(), 5);
        assert!(matches!(c.binding("inpainter").unwrap(), AdapterBinding::Http(_)));
        assert!(matches!(c.binding("vqa").unwrap(), AdapterBinding::Mock { table: None }));
        assert_eq!(c.evaluation.route, EvalRoute::ZeroShot);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = RunConfig::parse("[pipeline]\ntopk = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Config(m) if m.contains("topk")));
    }

    #[test]
    fn missing_binding_is_named() {
        let c = RunConfig::default();
        let err = c.pipeline_adapters().err().unwrap();
        assert!(matches!(err, CliError::Config(m) if m.contains("adapters.generator")));
    }

    #[test]
    fn cli_overrides_file() {
        let mut c = RunConfig::parse("[pipeline]\nseed = 1\n[evaluation]\ntemperature = 2.0\n", Path::new(".")).unwrap();
        c.apply(&Overrides {
            seed: Some(5),
            occupation: Some("pilot".into()),
            label_set: Some(LabelSet::Base),
            temperature: Some(0.25),
            out: Some("o".into()),
        })
        .unwrap();
        assert_eq!(c.pipeline.seed, 5);
        assert_eq!(c.pipeline.occupations.len(), 1);
        assert_eq!(c.pipeline.occupations[0].name, "pilot");
        assert_eq!(c.evaluation.temperature, 0.25);
        assert_eq!(c.evaluation.label_set, LabelSet::Base);
        assert_eq!(c.output_dir, PathBuf::from("o"));
    }

    #[test]
    fn unknown_occupation_and_bad_temperature_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply(&Overrides { occupation: Some("astronaut".into()), ..Overrides::default() }).is_err());
        let mut c = RunConfig::default();
        assert!(c.apply(&Overrides { temperature: Some(0.0), ..Overrides::default() }).is_err());
    }
}

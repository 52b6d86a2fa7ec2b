//! TOML experiment configuration. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::dataio::SplitSpec;
use crate::encoder::SampleMode;
use crate::error::{GcaError, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::synthgen::DomainGenConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthgenSection {
    pub dims: usize,
    pub max_lag: usize,
    pub edge_density: f64,
    #[serde(default)]
    pub structure_jitter: f64,
    #[serde(default)]
    pub seed: u64,
    pub domains: Vec<DomainGenConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset directory; when absent the `[synthgen]` section is
    /// simulated in memory.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    /// Source domain id; defaults to the first domain.
    #[serde(default)]
    pub source: Option<String>,
    /// Target domain id; defaults to the second domain.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default = "one")]
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub split_seed: u64,
}

fn one() -> usize {
    1
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset_dir: None,
            source: None,
            target: None,
            horizon: 1,
            stride: 1,
            split: SplitSpec::default(),
            split_seed: 0,
        }
    }
}

/// Model settings; `dims` and `max_lag` may be left to the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub dims: Option<usize>,
    #[serde(default)]
    pub max_lag: Option<usize>,
    #[serde(default)]
    pub t_in: Option<usize>,
    #[serde(default)]
    pub d_alpha: Option<usize>,
    #[serde(default)]
    pub d_beta: Option<usize>,
    #[serde(default)]
    pub d_embed: Option<usize>,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub full_window: bool,
    #[serde(default)]
    pub sample_mode: SampleMode,
}

impl ModelSection {
    pub fn resolve(&self, dims: usize, max_lag: usize) -> Result<ModelConfig> {
        let dims = self.dims.unwrap_or(dims);
        let max_lag = self.max_lag.unwrap_or(max_lag);
        let mut cfg = ModelConfig::new(dims, max_lag);
        cfg.t_in = self.t_in;
        cfg.d_alpha = self.d_alpha.unwrap_or(cfg.d_alpha);
        cfg.d_beta = self.d_beta.unwrap_or(cfg.d_beta);
        cfg.d_embed = self.d_embed.unwrap_or(cfg.d_embed);
        cfg.hidden = self.hidden;
        cfg.full_window = self.full_window;
        cfg.sample_mode = self.sample_mode;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn baseline(&self, dims: usize) -> BaselineConfig {
        BaselineConfig {
            dims: self.dims.unwrap_or(dims),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub synthgen: Option<SynthgenSection>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| GcaError::config(error_location(&e, text), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GcaError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GcaError::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synthgen {
            if s.domains.is_empty() {
                return Err(GcaError::config(
                    "synthgen.domains",
                    "at least one domain is required",
                ));
            }
            if !(0.0..=0.2).contains(&s.structure_jitter) {
                return Err(GcaError::config(
                    "synthgen.structure_jitter",
                    "must lie in [0, 0.2]",
                ));
            }
            if !(s.edge_density > 0.0 && s.edge_density <= 1.0) {
                return Err(GcaError::config(
                    "synthgen.edge_density",
                    "must lie in (0, 1]",
                ));
            }
            if s.dims < 2 {
                return Err(GcaError::config("synthgen.dims", "must be >= 2"));
            }
            if s.max_lag < 1 {
                return Err(GcaError::config("synthgen.max_lag", "must be >= 1"));
            }
            for (i, d) in s.domains.iter().enumerate() {
                d.validate()
                    .map_err(|e| prefix(e, &format!("synthgen.domains[{i}]")))?;
            }
        }
        self.data
            .split
            .validate()
            .map_err(|e| prefix(e, "data.split"))?;
        if self.data.horizon == 0 {
            return Err(GcaError::config("data.horizon", "must be >= 1"));
        }
        if self.data.stride == 0 {
            return Err(GcaError::config("data.stride", "must be >= 1"));
        }
        self.trainer.validate()?;
        Ok(())
    }
}

fn prefix(e: GcaError, path: &str) -> GcaError {
    match e {
        GcaError::Config { field, message } => GcaError::Config {
            field: format!("{path}.{field}"),
            message,
        },
        other => other,
    }
}

/// Location of a TOML error as `line L, column C`.
fn error_location(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {column}")
        }
        None => "<root>".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[synthgen]
dims = 3
max_lag = 2
edge_density = 0.3
structure_jitter = 0.05
seed = 4

[[synthgen.domains]]
id = "a"
noise_variance = 1.0
sample_interval = 1
nonlin_c = 0.02
length = 400
seed = 1

[data]
horizon = 2

[objective]
gamma = 0.2

[trainer]
epochs = 3
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.synthgen.as_ref().unwrap().domains.len(), 1);
        assert_eq!(cfg.data.horizon, 2);
        assert_eq!(cfg.objective.gamma, 0.2);
        assert_eq!(cfg.objective.lambda, 0.4);
        assert_eq!(cfg.trainer.epochs, 3);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = SAMPLE.replace("epochs = 3", "epochs = 3\nepochz = 4");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn invalid_value_names_the_field() {
        let bad = SAMPLE.replace("structure_jitter = 0.05", "structure_jitter = 0.5");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(
            err.to_string().contains("synthgen.structure_jitter"),
            "{err}"
        );
        let bad = SAMPLE.replace("noise_variance = 1.0", "noise_variance = -1.0");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(
            err.to_string()
                .contains("synthgen.domains[0].noise_variance"),
            "{err}"
        );
    }
}

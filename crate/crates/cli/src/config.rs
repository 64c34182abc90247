//! Experiment configuration: a TOML file layered over a named preset.
//!
//! The file may set `preset = "full"` (the default) or `preset = "desk"`;
//! every other key overrides the preset value at the same path. Tables merge
//! key by key, arrays replace wholesale.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;
use unvp::data::{DomainKind, DomainSpec};
use unvp::generalize::{AugmentationConfig, ModelConfig};

use crate::CliError;

const FULL: &str = r#"
output_dir = "runs/full"

[dataset]
source = "glyphs"
class_count = 10
image_size = 32
train_size = 10000
test_size = 1000
seed = 0

[[dataset.eval_domains]]
kind = "clean"

[[dataset.eval_domains]]
kind = "background_blend"
weight = 0.6

[[dataset.eval_domains]]
kind = "invert"

[model.flow]
layers = 4
hidden = 64
scale_clamp = 2.0
prior_radius = 3.0

[model.classifier]
conv1_channels = 16
conv2_channels = 32
kernel = 5
hidden = 128
feature_layer = "penultimate"

[training]
eta = 1.0
t_min = 100
t_max = 15
k_rounds = 6
alpha = 1.0
feature_weight = 1.0
learning_rate = 0.0001
batch_size = 256
reg_rate = 0.00005
samples_per_round = 256
seed = 0
flow_learning_rate = 0.0001
flow_pretrain_epochs = 2
"#;

const DESK: &str = r#"
output_dir = "runs/desk"

[dataset]
image_size = 16
train_size = 2000
test_size = 500

[training]
eta = 0.05
batch_size = 64
samples_per_round = 64
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    fn table(self) -> Value {
        let base: Value = toml::from_str(FULL).expect("full preset parses");
        match self {
            Self::Full => base,
            Self::Desk => merge(base, toml::from_str(DESK).expect("desk preset parses")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Glyphs,
    Idx,
}

/// An evaluation domain: a transform of the test split plus an optional display tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(flatten)]
    pub spec: DomainSpec,
}

impl DomainEntry {
    pub fn clean() -> Self {
        Self {
            tag: None,
            spec: DomainSpec::new(DomainKind::Clean, 0),
        }
    }

    pub fn tag(&self) -> &str {
        self.tag.as_deref().unwrap_or(self.spec.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceKind,
    pub class_count: usize,
    pub image_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    pub eval_domains: Vec<DomainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: AugmentationConfig,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: Value, top: Value) -> Value {
    match (base, top) {
        (Value::Table(mut b), Value::Table(t)) => {
            for (k, v) in t {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Table(b)
        }
        (_, t) => t,
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::config(msg.into())
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut table = preset.table();
        if let Value::Table(t) = &mut table {
            t.insert("preset".into(), Value::String(preset_name(preset).into()));
        }
        table.try_into().expect("presets are valid")
    }

    /// Parses TOML text layered over its preset and validates the result.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: Value = toml::from_str(text).map_err(|e| config_error(format!("invalid TOML: {e}")))?;
        let preset = match user.get("preset") {
            None => Preset::Full,
            Some(Value::String(s)) if s == "full" => Preset::Full,
            Some(Value::String(s)) if s == "desk" => Preset::Desk,
            Some(other) => {
                return Err(config_error(format!("preset must be \"full\" or \"desk\", got {other}")));
            }
        };
        let mut merged = merge(preset.table(), user);
        if let Value::Table(t) = &mut merged {
            t.insert("preset".into(), Value::String(preset_name(preset).into()));
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.class_count < 2 {
            return Err(config_error(format!("dataset.class_count must be at least 2, got {}", d.class_count)));
        }
        if d.source == SourceKind::Glyphs {
            if d.class_count > 10 {
                return Err(config_error(format!("dataset.class_count must be at most 10 for glyphs, got {}", d.class_count)));
            }
            if d.image_size < 8 {
                return Err(config_error(format!("dataset.image_size must be at least 8, got {}", d.image_size)));
            }
            if d.train_size < d.class_count || d.test_size < d.class_count {
                return Err(config_error("dataset.train_size and dataset.test_size need one sample per class"));
            }
        } else {
            for (name, p) in [
                ("train_images", &d.train_images),
                ("train_labels", &d.train_labels),
                ("test_images", &d.test_images),
                ("test_labels", &d.test_labels),
            ] {
                if p.is_none() {
                    return Err(config_error(format!("dataset.{name} is required when dataset.source = \"idx\"")));
                }
            }
        }
        if d.eval_domains.is_empty() {
            return Err(config_error("dataset.eval_domains must list at least one domain"));
        }
        let mut seen = HashSet::new();
        for entry in &d.eval_domains {
            entry
                .spec
                .kind
                .validate()
                .map_err(|e| config_error(format!("dataset.eval_domains[{}]: {e}", entry.tag())))?;
            if !seen.insert(entry.tag()) {
                return Err(config_error(format!("dataset.eval_domains: duplicate tag `{}`", entry.tag())));
            }
        }
        self.model.flow.validate().map_err(|e| config_error(format!("model.flow: {e}")))?;
        self.model.classifier.validate().map_err(|e| config_error(format!("model.classifier: {e}")))?;
        self.training.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(())
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Full => "full",
        Preset::Desk => "desk",
    }
}

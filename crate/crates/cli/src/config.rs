//! Run configuration: one JSON document describing model, data, training,
//! named attacks, activation export and output location.

use std::fs;
use std::path::{Path, PathBuf};

use ewas_core::analysis::ThresholdScope;
use ewas_core::data::{load_cifar_binary, load_idx, synth_dataset, Dataset, Split};
use ewas_core::model::{Model, ModelConfig, Precision};
use ewas_core::training::{NamedAttack, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn default_sigma() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded class-template images with Gaussian pixel noise.
    Synth {
        num_classes: usize,
        samples_per_class: usize,
        shape: [usize; 3],
        #[serde(default = "default_sigma")]
        sigma: f64,
        seed: u64,
    },
    /// IDX (MNIST-style) image and label files.
    Idx { images: PathBuf, labels: PathBuf },
    /// CIFAR-10 binary batch files, concatenated in order.
    Cifar { paths: Vec<PathBuf> },
}

impl DataSource {
    fn check_paths(&self, field: &str) -> CliResult<()> {
        let missing = |p: &Path, name: &str| {
            Err(CliError::Config(format!(
                "{field}.{name}: file not found: {}",
                p.display()
            )))
        };
        match self {
            DataSource::Synth { .. } => Ok(()),
            DataSource::Idx { images, labels } => {
                if !images.is_file() {
                    return missing(images, "images");
                }
                if !labels.is_file() {
                    return missing(labels, "labels");
                }
                Ok(())
            }
            DataSource::Cifar { paths } => {
                if paths.is_empty() {
                    return Err(CliError::Config(format!(
                        "{field}.paths: at least one file is required"
                    )));
                }
                match paths.iter().find(|p| !p.is_file()) {
                    Some(p) => missing(p, "paths"),
                    None => Ok(()),
                }
            }
        }
    }

    pub fn load(&self, split: Split) -> CliResult<Dataset> {
        Ok(match self {
            DataSource::Synth {
                num_classes,
                samples_per_class,
                shape,
                sigma,
                seed,
            } => synth_dataset(
                *num_classes,
                *samples_per_class,
                *shape,
                *sigma,
                *seed,
                split,
            )?,
            DataSource::Idx { images, labels } => load_idx(images, labels, split)?,
            DataSource::Cifar { paths } => load_cifar_binary(paths, split)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub test: DataSource,
}

fn default_hook() -> String {
    "penultimate".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Hook whose activations are summarized.
    #[serde(default = "default_hook")]
    pub hook: String,
    /// Class whose test samples are used; every class when absent.
    #[serde(default)]
    pub class: Option<usize>,
    /// Name of an attack preset producing the adversarial counterparts.
    #[serde(default)]
    pub attack: Option<String>,
    #[serde(default)]
    pub threshold_scope: ThresholdScope,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            hook: default_hook(),
            class: None,
            attack: None,
            threshold_scope: ThresholdScope::PerSample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
}

fn default_eval_batch() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and training; overrides `train.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub attack_presets: Vec<NamedAttack>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.output.dir = out.clone();
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        Model::build(&self.model, self.seed)
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.data.train.check_paths("data.train")?;
        self.data.test.check_paths("data.test")?;
        if self.eval_batch_size == 0 {
            return Err(CliError::Config(
                "eval_batch_size: must be at least 1".into(),
            ));
        }
        let mut names = std::collections::HashSet::new();
        for (i, a) in self.attack_presets.iter().enumerate() {
            a.attack
                .validate()
                .map_err(|e| CliError::Config(format!("attack_presets[{i}] `{}`: {e}", a.name)))?;
            if !names.insert(a.name.as_str()) {
                return Err(CliError::Config(format!(
                    "attack_presets[{i}]: duplicate name `{}`",
                    a.name
                )));
            }
            if a.attack.lambda_attack > 0.0 && self.model.insertion_points.is_empty() {
                return Err(CliError::Config(format!(
                    "attack_presets[{i}] `{}`: lambda_attack > 0 requires model.insertion_points",
                    a.name
                )));
            }
        }
        if let Some(name) = &self.analysis.attack {
            self.preset(name)?;
        }
        if self.train.lambda > 0.0 && self.model.insertion_points.is_empty() {
            return Err(CliError::Config(
                "train.lambda > 0 requires model.insertion_points".into(),
            ));
        }
        Ok(())
    }

    pub fn preset(&self, name: &str) -> CliResult<&NamedAttack> {
        self.attack_presets
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "analysis.attack: no attack preset named `{name}`; have [{}]",
                    self.attack_presets
                        .iter()
                        .map(|a| a.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// JSON of everything that determines the trained weights.
    pub fn digest_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        v.to_string()
    }
}

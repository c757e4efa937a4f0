//! Run-wide configuration: every tunable of the pipeline in one JSON file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierConfig, ClassifierTrainConfig};
use crate::data::SynthConfig;
use crate::generator::{GeneratorConfig, GeneratorTrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub griffin_lim_iterations: usize,
    /// Seeds the choice of reference clips.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            griffin_lim_iterations: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub trials: usize,
    pub samples_per_trial: usize,
    pub classifier_epochs: usize,
    pub generator_epochs: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            trials: 50,
            samples_per_trial: 50,
            classifier_epochs: 3,
            generator_epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub generator: GeneratorConfig,
    pub generator_train: GeneratorTrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            classifier: ClassifierConfig::default(),
            classifier_train: ClassifierTrainConfig::default(),
            generator: GeneratorConfig::toy(),
            generator_train: GeneratorTrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_file)
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.classifier.seed = seed;
        self.classifier_train.seed = seed;
        self.generator.seed = seed;
        self.generator_train.seed = seed;
        self.eval.seed = seed;
        self.ablation.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.classifier
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.generator
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.classifier.spectrogram != self.generator.spectrogram {
            return Err(invalid(
                "classifier and generator spectrogram settings differ".into(),
            ));
        }
        if self.synth.n_per_emotion == 0 || self.synth.speakers == 0 {
            return Err(invalid(
                "synth: n_per_emotion and speakers must be at least 1".into(),
            ));
        }
        if !(1..=2).contains(&self.synth.languages) {
            return Err(invalid("synth: languages must be 1 or 2".into()));
        }
        for (name, v) in [
            ("classifier_train.epochs", self.classifier_train.epochs),
            (
                "classifier_train.batch_size",
                self.classifier_train.batch_size,
            ),
            ("generator_train.epochs", self.generator_train.epochs),
            (
                "generator_train.batch_size",
                self.generator_train.batch_size,
            ),
            (
                "eval.griffin_lim_iterations",
                self.eval.griffin_lim_iterations,
            ),
            ("ablation.trials", self.ablation.trials),
            (
                "ablation.samples_per_trial",
                self.ablation.samples_per_trial,
            ),
            (
                "ablation.classifier_epochs",
                self.ablation.classifier_epochs,
            ),
            ("ablation.generator_epochs", self.ablation.generator_epochs),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

//! JSON run configuration, one section per pipeline stage.
//!
//! Precedence is flags > config file > built-in defaults.

use std::path::Path;

use dda_core::corpus::{sha256_hex, SynthesisSpec};
use dda_core::influence::engine::{Method, MethodConfig};
use dda_core::pipeline::ExperimentConfig;
use dda_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub influence: MethodConfig,
    pub eval: EvalSection,
    pub loo: LooSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub synthesis: SynthesisSpec,
    pub test_docs: usize,
    pub clean_docs: usize,
    pub clean_source_share: f64,
    pub partition_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub pretrain: TrainingConfig,
    pub finetune: TrainingConfig,
    pub contrast_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beta_from: f64,
    pub beta_to: f64,
    pub beta_step: f64,
    /// Depth of the case listing.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooSection {
    /// Training documents in the convex probe.
    pub n: usize,
    /// Test documents scored against them.
    pub tests: usize,
    /// Most frequent non-entity tokens kept as extra features.
    pub extra_features: usize,
    pub l2: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            beta_from: 0.0,
            beta_to: 1.5,
            beta_step: 0.1,
            k: 10,
        }
    }
}

impl Default for LooSection {
    fn default() -> Self {
        Self {
            n: 64,
            tests: 4,
            extra_features: 6,
            l2: 1e-2,
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Config::from_experiment(&ExperimentConfig::default()).corpus
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Config::from_experiment(&ExperimentConfig::default()).model
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        Config::from_experiment(&ExperimentConfig::default()).training
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::from_experiment(&ExperimentConfig::default())
    }
}

/// Flag values that override config fields when given.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub beta: Option<f64>,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
    pub workers: Option<usize>,
}

impl Config {
    pub fn from_experiment(e: &ExperimentConfig) -> Self {
        Self {
            seed: e.seed,
            corpus: CorpusSection {
                synthesis: e.synthesis.clone(),
                test_docs: e.test_docs,
                clean_docs: e.clean_docs,
                clean_source_share: e.clean_source_share,
                partition_size: e.partition_size,
            },
            model: ModelSection {
                embed_dim: e.embed_dim,
                hidden_dim: e.hidden_dim,
                init_scale: e.init_scale,
            },
            training: TrainingSection {
                pretrain: e.pretrain.clone(),
                finetune: e.finetune.clone(),
                contrast_epochs: e.contrast_epochs,
            },
            influence: e.attribution.clone(),
            eval: EvalSection::default(),
            loo: LooSection::default(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            synthesis: self.corpus.synthesis.clone(),
            test_docs: self.corpus.test_docs,
            clean_docs: self.corpus.clean_docs,
            clean_source_share: self.corpus.clean_source_share,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            init_scale: self.model.init_scale,
            pretrain: self.training.pretrain.clone(),
            finetune: self.training.finetune.clone(),
            contrast_epochs: self.training.contrast_epochs,
            partition_size: self.corpus.partition_size,
            attribution: self.influence.clone(),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.method {
            self.influence.method = v;
        }
        if let Some(v) = o.beta {
            self.influence.debias.beta = v;
        }
        if let Some(v) = o.epochs {
            self.training.finetune.epochs = v;
        }
        if let Some(v) = o.k {
            self.eval.k = v;
        }
        if let Some(v) = o.workers {
            self.influence.workers = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment().validate()?;
        if self.influence.workers == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        if self.eval.k == 0 {
            return Err(CliError::Usage("--k must be at least 1".into()));
        }
        if !self.influence.debias.beta.is_finite() {
            return Err(CliError::Usage("--beta must be finite".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hash of the settings that shape artifacts; the worker count is left
    /// out because it never changes an output byte.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.influence.workers = 1;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

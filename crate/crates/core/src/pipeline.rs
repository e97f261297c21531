//! The seeded reference experiment, stage by stage.
//!
//! clean corpus → base model θ0; corrupted corpus → fine-tuning epochs
//! θ1..θN; test outputs → partition → contrastive branches → attribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    corrupt_corpus, partition_test_outputs, synth_corpus, CorruptedCorpus, EntitySwapSpec, Split,
    SynthesisSpec, TestPartition,
};
use crate::error::{Error, Result};
use crate::influence::engine::{AttributionInputs, MethodConfig};
use crate::model::{self, Featurizer, InitMode, ModelArch};
use crate::training::{
    finetune_epochs, finetune_on_subset, pretrain_base, Checkpoint, CheckpointSet,
    ContrastiveTrajectories, TrainingConfig,
};

/// Offsets keep the three generated corpora's ids disjoint.
pub const TEST_ID_OFFSET: u64 = 1_000_000;
pub const CLEAN_ID_OFFSET: u64 = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synthesis: SynthesisSpec,
    pub test_docs: usize,
    pub clean_docs: usize,
    /// Share of source-entity documents in the base model's pretraining corpus.
    pub clean_source_share: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    pub pretrain: TrainingConfig,
    pub finetune: TrainingConfig,
    pub contrast_epochs: usize,
    /// Test examples kept per partition side.
    pub partition_size: usize,
    pub attribution: MethodConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synthesis: SynthesisSpec {
                distractor_prob: 0.3,
                reference_noise: 0.1,
                ..SynthesisSpec::default()
            },
            test_docs: 200,
            clean_docs: 2000,
            clean_source_share: 0.04,
            embed_dim: 16,
            hidden_dim: 32,
            init_scale: 0.1,
            pretrain: TrainingConfig {
                epochs: 5,
                ..TrainingConfig::default()
            },
            finetune: TrainingConfig::default(),
            contrast_epochs: 3,
            partition_size: 50,
            attribution: MethodConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A few-second configuration for smoke tests.
    pub fn small() -> Self {
        let base = Self::default();
        Self {
            synthesis: SynthesisSpec {
                n_docs: 300,
                vocab_size: 300,
                entity_swap: EntitySwapSpec {
                    entity_doc_share: 0.2,
                    ..EntitySwapSpec::default()
                },
                ..base.synthesis.clone()
            },
            test_docs: 80,
            clean_docs: 300,
            clean_source_share: 0.2,
            embed_dim: 8,
            hidden_dim: 8,
            pretrain: TrainingConfig {
                epochs: 2,
                ..base.pretrain.clone()
            },
            finetune: TrainingConfig {
                epochs: 5,
                ..base.finetune.clone()
            },
            partition_size: 5,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthesis.entity_swap.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.partition_size == 0 || self.contrast_epochs == 0 {
            return Err(Error::Config(
                "partition_size and contrast_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch::mlp(
            self.synthesis.vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.synthesis.entities().len(),
        )
    }

    /// Describes the model for report rows.
    pub fn model_config(&self) -> String {
        let a = self.arch();
        format!("mlp-v{}-e{}-h{}-k{}", a.feature_dim, a.embed_dim, a.hidden_dim, a.class_count)
    }

    fn spec_for(&self, n_docs: usize, seed: u64, offset: u64, swap: EntitySwapSpec) -> SynthesisSpec {
        SynthesisSpec {
            n_docs,
            seed,
            topic_seed: self.seed,
            id_offset: offset,
            entity_swap: swap,
            ..self.synthesis.clone()
        }
    }

    fn with_shuffle(&self, cfg: &TrainingConfig, stream: u64) -> TrainingConfig {
        TrainingConfig {
            shuffle_seed: self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stream),
            ..cfg.clone()
        }
    }

    pub fn pretrain_config(&self) -> TrainingConfig {
        self.with_shuffle(&self.pretrain, 1)
    }

    pub fn finetune_config(&self) -> TrainingConfig {
        self.with_shuffle(&self.finetune, 2)
    }

    pub fn contrast_config(&self) -> TrainingConfig {
        self.with_shuffle(&self.finetune, 3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub clean: CorruptedCorpus,
    pub train: CorruptedCorpus,
    pub test: CorruptedCorpus,
}

/// Corrupted training corpus, clean pretraining corpus and a test corpus
/// made only of source-entity documents.
pub fn build_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    cfg.validate()?;
    let swap = cfg.synthesis.entity_swap.clone();
    let clean_train = synth_corpus(&cfg.spec_for(cfg.synthesis.n_docs, cfg.seed, 0, swap.clone()))?;
    let train = corrupt_corpus(&clean_train, &swap, cfg.seed)?;
    let clean = synth_corpus(&cfg.spec_for(
        cfg.clean_docs,
        cfg.seed.wrapping_add(2),
        CLEAN_ID_OFFSET,
        EntitySwapSpec {
            entity_doc_share: cfg.clean_source_share,
            ..swap.clone()
        },
    ))?;
    let test_swap = EntitySwapSpec {
        entity_doc_share: 1.0,
        ..swap
    };
    let test = synth_corpus(&cfg.spec_for(
        cfg.test_docs,
        cfg.seed.wrapping_add(1),
        TEST_ID_OFFSET,
        test_swap,
    ))?;
    let test = crate::corpus::assign_split(&test, Split::Test);
    Ok(Corpora { clean, train, test })
}

pub fn featurizer(cfg: &ExperimentConfig, train: &CorruptedCorpus) -> Featurizer {
    Featurizer::new(train.vocabulary.clone(), cfg.synthesis.entities())
}

pub fn pretrain(cfg: &ExperimentConfig, clean: &CorruptedCorpus, feat: &Featurizer) -> Result<Checkpoint> {
    pretrain_base(
        clean,
        feat,
        &cfg.arch(),
        &cfg.pretrain_config(),
        InitMode::SeededUniform(cfg.init_scale),
        cfg.seed.wrapping_add(4),
    )
}

pub fn finetune(
    cfg: &ExperimentConfig,
    train: &CorruptedCorpus,
    feat: &Featurizer,
    base: &Checkpoint,
) -> Result<CheckpointSet> {
    let data = feat.corpus_instances(train);
    finetune_epochs(&data, base, &cfg.finetune_config())
}

/// Model output entity for every test document.
pub fn predict(ckpt: &Checkpoint, test: &CorruptedCorpus, feat: &Featurizer) -> BTreeMap<u64, String> {
    test.examples
        .iter()
        .map(|e| {
            let (c, _) = model::predict_entity(&ckpt.arch, &ckpt.params, &feat.features(&e.document));
            (e.id, feat.classes[c].clone())
        })
        .collect()
}

pub fn partition(
    cfg: &ExperimentConfig,
    predictions: &BTreeMap<u64, String>,
    test: &CorruptedCorpus,
) -> Result<TestPartition> {
    let preds: Vec<(u64, String)> = predictions.iter().map(|(k, v)| (*k, v.clone())).collect();
    partition_test_outputs(&preds, test, &cfg.synthesis.entity_swap, cfg.partition_size)
}

/// Branches fine-tuned from θN on each partition side, labelled with the
/// model's own outputs.
pub fn contrast(
    cfg: &ExperimentConfig,
    test: &CorruptedCorpus,
    feat: &Featurizer,
    predictions: &BTreeMap<u64, String>,
    part: &TestPartition,
    root: &Checkpoint,
) -> Result<ContrastiveTrajectories> {
    let inst = |id: u64| -> Result<model::Instance> {
        let ex = test.get(id).ok_or(Error::NotFound(id))?;
        Ok(feat.instance(id, &ex.document, predictions.get(&id).map(String::as_str)))
    };
    let pos = part.positives.iter().map(|&id| inst(id)).collect::<Result<Vec<_>>>()?;
    let neg = part.negatives.iter().map(|(id, _)| inst(*id)).collect::<Result<Vec<_>>>()?;
    let cc = cfg.contrast_config();
    Ok(ContrastiveTrajectories {
        positive: finetune_on_subset(root, &pos, &cc, cfg.contrast_epochs)?,
        negative: finetune_on_subset(root, &neg, &cc, cfg.contrast_epochs)?,
    })
}

/// All artifacts of one reference run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub corpora: Corpora,
    pub featurizer: Featurizer,
    pub trajectory: CheckpointSet,
    pub predictions: BTreeMap<u64, String>,
    pub partition: TestPartition,
    pub contrastive: ContrastiveTrajectories,
}

impl Experiment {
    pub fn run(config: &ExperimentConfig) -> Result<Self> {
        let corpora = build_corpora(config)?;
        let feat = featurizer(config, &corpora.train);
        let base = pretrain(config, &corpora.clean, &feat)?;
        let trajectory = finetune(config, &corpora.train, &feat, &base)?;
        let predictions = predict(trajectory.last(), &corpora.test, &feat);
        let part = partition(config, &predictions, &corpora.test)?;
        let contrastive = contrast(
            config,
            &corpora.test,
            &feat,
            &predictions,
            &part,
            trajectory.last(),
        )?;
        Ok(Self {
            config: config.clone(),
            corpora,
            featurizer: feat,
            trajectory,
            predictions,
            partition: part,
            contrastive,
        })
    }

    pub fn inputs(&self) -> AttributionInputs<'_> {
        AttributionInputs {
            train: &self.corpora.train,
            test: &self.corpora.test,
            featurizer: &self.featurizer,
            predictions: &self.predictions,
            partition: &self.partition,
            trajectory: &self.trajectory,
            contrastive: Some(&self.contrastive),
            lineage: (&self.corpora.train.content_hash, &self.corpora.test.content_hash),
        }
    }
}

//! Deterministic mini-batch training and bit-exact checkpoint files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sha256_hex, CorruptedCorpus};
use crate::error::{Error, Result};
use crate::model::{
    self, Featurizer, GradientVector, InitMode, Instance, ModelArch, ParameterVector,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Coefficient of `(l2/2)·‖θ‖²` added to the mean loss.
    #[serde(default)]
    pub l2: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(1e-2),
            epochs: 10,
            batch_size: 32,
            shuffle_seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hash(&self, arch: &ModelArch) -> String {
        let json = serde_json::to_vec(&(self, arch)).expect("config serializes");
        sha256_hex(&json)
    }
}

/// Adam moments; empty for SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Applies one update in place.
pub fn optimizer_step(
    params: &mut ParameterVector,
    grad: &GradientVector,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Shape {
            expected: params.len(),
            got: grad.len(),
        });
    }
    if let Some(i) = grad.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    match *config {
        OptimizerConfig::Sgd { lr } => {
            for (p, g) in params.0.iter_mut().zip(&grad.0) {
                *p -= lr * g;
            }
        }
        OptimizerConfig::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
                state.step = 0;
            }
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for (i, (p, &g)) in params.0.iter_mut().zip(&grad.0).enumerate() {
                let m = beta1 * state.m[i] + (1.0 - beta1) * g;
                let v = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                state.m[i] = m;
                state.v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterVector,
    /// 0 is the base model.
    pub epoch: usize,
    pub train_loss: f64,
    pub arch: ModelArch,
    pub config_hash: String,
    /// Carried so an interrupted run can resume bit-exactly.
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// SHA-256 of the serialized checkpoint bytes.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSet {
    pub base: Checkpoint,
    pub epochs: Vec<Checkpoint>,
}

impl CheckpointSet {
    pub fn last(&self) -> &Checkpoint {
        self.epochs.last().unwrap_or(&self.base)
    }

    pub fn epoch(&self, index: usize) -> Option<&Checkpoint> {
        self.epochs.iter().find(|c| c.epoch == index)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.epochs.iter().enumerate() {
            if c.epoch != i + 1 {
                return Err(Error::InvalidState(format!(
                    "epoch checkpoints must be numbered 1..N, found {} at position {i}",
                    c.epoch
                )));
            }
            if c.arch != self.base.arch {
                return Err(Error::InvalidState("checkpoints disagree on arch".into()));
            }
        }
        Ok(())
    }
}

/// Branches fine-tuned from the final model on the two test subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveTrajectories {
    pub positive: CheckpointSet,
    pub negative: CheckpointSet,
}

fn regularized_loss_grad(
    arch: &ModelArch,
    params: &ParameterVector,
    batch: &[&Instance],
    l2: f64,
) -> Result<(f64, GradientVector)> {
    let mut acc = GradientVector::zeros(params.len());
    let mut loss = 0.0;
    for inst in batch {
        let (l, g) = model::loss_and_grad(arch, params, inst)?;
        loss += l;
        acc.axpy(1.0, &g);
    }
    let inv = 1.0 / batch.len() as f64;
    acc.scale(inv);
    loss *= inv;
    if l2 > 0.0 {
        acc.axpy(l2, &GradientVector(params.0.clone()));
        loss += 0.5 * l2 * params.0.iter().map(|v| v * v).sum::<f64>();
    }
    Ok((loss, acc))
}

/// Mean loss over `data` plus the L2 term.
pub fn objective(
    arch: &ModelArch,
    params: &ParameterVector,
    data: &[Instance],
    l2: f64,
) -> Result<f64> {
    let r = model::risk(arch, params, data)?;
    Ok(r + 0.5 * l2 * params.0.iter().map(|v| v * v).sum::<f64>())
}

/// Stateful single-threaded trainer.
pub struct Trainer {
    pub arch: ModelArch,
    pub config: TrainingConfig,
    pub params: ParameterVector,
    pub state: OptimizerState,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(arch: ModelArch, config: TrainingConfig, params: ParameterVector) -> Result<Self> {
        arch.validate()?;
        config.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(Self {
            arch,
            config,
            params,
            state: OptimizerState::default(),
            epoch: 0,
        })
    }

    /// Continues from a checkpoint, restoring its optimizer state if any.
    pub fn resume(ckpt: &Checkpoint, config: TrainingConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.arch, config, ckpt.params.clone())?;
        t.epoch = ckpt.epoch;
        t.state = ckpt.optimizer.clone().unwrap_or_default();
        Ok(t)
    }

    /// One pass over `data` in a seeded order that depends only on the epoch index.
    pub fn run_epoch(&mut self, data: &[Instance]) -> Result<()> {
        self.epoch += 1;
        if data.is_empty() {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.shuffle_seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data[i]).collect();
            let (_, grad) = regularized_loss_grad(&self.arch, &self.params, &batch, self.config.l2)?;
            optimizer_step(&mut self.params, &grad, &mut self.state, &self.config.optimizer)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, data: &[Instance]) -> Result<Checkpoint> {
        let train_loss = objective(&self.arch, &self.params, data, self.config.l2)?;
        Ok(Checkpoint {
            params: self.params.clone(),
            epoch: self.epoch,
            train_loss,
            arch: self.arch,
            config_hash: self.config.hash(&self.arch),
            optimizer: match self.config.optimizer {
                OptimizerConfig::Adam { .. } => Some(self.state.clone()),
                OptimizerConfig::Sgd { .. } => None,
            },
        })
    }
}

/// Trains the base model θ0 from a seeded initialization on clean data.
pub fn pretrain_base(
    clean: &CorruptedCorpus,
    featurizer: &Featurizer,
    arch: &ModelArch,
    config: &TrainingConfig,
    init: InitMode,
    seed: u64,
) -> Result<Checkpoint> {
    if clean.corrupted_count() > 0 {
        return Err(Error::InvalidInput(
            "the base model must be trained on an uncorrupted corpus".into(),
        ));
    }
    let clean = featurizer.corpus_instances(clean);
    let clean = clean.as_slice();
    let params = model::init_params(arch, init, seed)?;
    let mut trainer = Trainer::new(*arch, config.clone(), params)?;
    for _ in 0..config.epochs {
        trainer.run_epoch(clean)?;
    }
    let mut ckpt = trainer.checkpoint(clean)?;
    ckpt.epoch = 0;
    ckpt.optimizer = None;
    Ok(ckpt)
}

/// Fine-tunes from `root` and keeps a checkpoint after every epoch.
pub fn finetune_epochs(
    data: &[Instance],
    root: &Checkpoint,
    config: &TrainingConfig,
) -> Result<CheckpointSet> {
    let mut base = root.clone();
    base.optimizer = None;
    let mut trainer = Trainer::resume(&base, config.clone())?;
    trainer.epoch = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        trainer.run_epoch(data)?;
        epochs.push(trainer.checkpoint(data)?);
    }
    Ok(CheckpointSet { base, epochs })
}

/// Continues an interrupted [`finetune_epochs`] run from its checkpoint at
/// epoch `k` through epoch `config.epochs`.
pub fn resume_finetune(
    data: &[Instance],
    from: &Checkpoint,
    config: &TrainingConfig,
) -> Result<Vec<Checkpoint>> {
    let mut trainer = Trainer::resume(from, config.clone())?;
    let mut out = Vec::new();
    while trainer.epoch < config.epochs {
        trainer.run_epoch(data)?;
        out.push(trainer.checkpoint(data)?);
    }
    Ok(out)
}

/// Fine-tunes `root` for `epochs` on a test subset labelled with the
/// model's observed outputs.
pub fn finetune_on_subset(
    root: &Checkpoint,
    subset: &[Instance],
    config: &TrainingConfig,
    epochs: usize,
) -> Result<CheckpointSet> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("contrastive subset is empty".into()));
    }
    let cfg = TrainingConfig {
        epochs,
        ..config.clone()
    };
    finetune_epochs(subset, root, &cfg)
}

pub const MAGIC: &[u8; 8] = b"DDACKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ModelArch,
    epoch: usize,
    train_loss: f64,
    config_hash: String,
    param_count: usize,
    /// Present when Adam moments follow the parameter payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
}

impl Checkpoint {
    /// `MAGIC`, u32-LE header length, JSON header, then little-endian f64
    /// parameters (and Adam `m`, `v` when an optimizer step is recorded).
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            arch: self.arch,
            epoch: self.epoch,
            train_loss: self.train_loss,
            config_hash: self.config_hash.clone(),
            param_count: self.params.len(),
            optimizer_step: self
                .optimizer
                .as_ref()
                .filter(|s| s.m.len() == self.params.len())
                .map(|s| s.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.params.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if header.optimizer_step.is_some() {
            let st = self.optimizer.as_ref().unwrap();
            for v in st.m.iter().chain(&st.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(Error::Truncated {
                expected: 12 + hlen,
                found: bytes.len(),
            });
        }
        let value: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let header: Header = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let n = header.param_count;
        let vectors = if header.optimizer_step.is_some() { 3 } else { 1 };
        let need = 12 + hlen + 8 * n * vectors;
        if bytes.len() < need {
            return Err(Error::Truncated {
                expected: need,
                found: bytes.len(),
            });
        }
        let payload = &bytes[12 + hlen..need];
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params: Vec<f64> = vals.by_ref().take(n).collect();
        let optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            m: vals.by_ref().take(n).collect(),
            v: vals.by_ref().take(n).collect(),
        });
        if params.len() != header.arch.param_count() {
            return Err(Error::Format(format!(
                "param_count {} does not match the architecture ({})",
                params.len(),
                header.arch.param_count()
            )));
        }
        Ok(Checkpoint {
            params: ParameterVector(params),
            epoch: header.epoch,
            train_loss: header.train_loss,
            arch: header.arch,
            config_hash: header.config_hash,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

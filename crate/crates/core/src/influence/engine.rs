//! Batched attribution over a whole training set.
//!
//! Every training gradient is computed once per checkpoint and dotted
//! against a small set of probe vectors (test gradients or subset means).
//! The parallel map runs over training samples and each dot product is a
//! sequential sum, so the output does not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bm25::{bm25_score, Bm25Params, CorpusStats};
use super::trak::{trak_lite, TrakConfig};
use super::{denoise_mean, DebiasConfig};
use crate::corpus::{tokenize, CorruptedCorpus, TestPartition};
use crate::error::{Error, Result};
use crate::eval::rank_order;
use crate::model::{self, Featurizer, GradientVector, Instance};
use crate::training::{Checkpoint, CheckpointSet, ContrastiveTrajectories};

/// Dot products of every training gradient at one checkpoint with each probe.
#[derive(Clone, Debug)]
pub struct ProbeDots {
    /// `dots[probe][train]`.
    pub dots: Vec<Vec<f64>>,
    pub train_norms: Vec<f64>,
    pub probe_norms: Vec<f64>,
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn probe_dots(
    ckpt: &Checkpoint,
    train: &[Instance],
    probes: &[GradientVector],
    workers: usize,
) -> Result<ProbeDots> {
    let p = ckpt.arch.param_count();
    if let Some(bad) = probes.iter().find(|g| g.len() != p) {
        return Err(Error::Shape {
            expected: p,
            got: bad.len(),
        });
    }
    let rows: Vec<(Vec<f64>, f64)> = with_pool(workers, || {
        train
            .par_iter()
            .map(|z| {
                let g = model::per_example_grad(&ckpt.arch, &ckpt.params, z)?;
                let nz: Vec<usize> = (0..g.len()).filter(|&i| g.0[i] != 0.0).collect();
                let dots = probes
                    .iter()
                    .map(|q| {
                        let mut s = 0.0;
                        for &i in &nz {
                            s += g.0[i] * q.0[i];
                        }
                        s
                    })
                    .collect();
                Ok((dots, g.norm()))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut dots = vec![Vec::with_capacity(train.len()); probes.len()];
    let mut train_norms = Vec::with_capacity(train.len());
    for (row, n) in rows {
        for (q, v) in row.into_iter().enumerate() {
            dots[q].push(v);
        }
        train_norms.push(n);
    }
    Ok(ProbeDots {
        dots,
        train_norms,
        probe_norms: probes.iter().map(|q| q.norm()).collect(),
    })
}

fn grads_at(ckpt: &Checkpoint, xs: &[Instance]) -> Result<Vec<GradientVector>> {
    xs.iter()
        .map(|z| model::per_example_grad(&ckpt.arch, &ckpt.params, z))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Raw,
    Dda,
    Tracin,
    Trak,
    Bm25,
    /// DDA scored from a single checkpoint of the main trajectory.
    DdaNoDenoise,
    /// DDA without the base-model subtraction (β = 0).
    DdaNoDebias,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Dda => "dda",
            Method::Tracin => "tracin",
            Method::Trak => "trak",
            Method::Bm25 => "bm25",
            Method::DdaNoDenoise => "dda-no-denoise",
            Method::DdaNoDebias => "dda-no-debias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "raw" => Method::Raw,
            "dda" => Method::Dda,
            "tracin" => Method::Tracin,
            "trak" => Method::Trak,
            "bm25" => Method::Bm25,
            "dda-no-denoise" => Method::DdaNoDenoise,
            "dda-no-debias" => Method::DdaNoDebias,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

/// Where the base term of the debiased score is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DebiasForm {
    /// Both gradients at the anchor checkpoint.
    Full,
    /// Test-side gradient at the scoring checkpoint, training-side at the anchor.
    Mixed,
}

/// Which checkpoints feed the denoised mean and where the base term sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DdaScheme {
    /// Fine-tuning epochs θ1..θN, base θ0; the contrast lives in the probes.
    Trajectory,
    /// Each branch's own epochs, base at the branch root θN. The
    /// single-checkpoint ablation still reads the fine-tuning trajectory.
    BranchRoot,
    /// Each branch's own epochs, base θ0.
    BranchBase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub method: Method,
    pub scheme: DdaScheme,
    pub debias: DebiasConfig,
    pub debias_form: DebiasForm,
    /// Epoch used by the single-checkpoint ablation.
    pub single_epoch: usize,
    pub trak: TrakConfig,
    pub bm25: Bm25Params,
    pub workers: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Dda,
            scheme: DdaScheme::Trajectory,
            debias: DebiasConfig::default(),
            debias_form: DebiasForm::Full,
            single_epoch: 5,
            trak: TrakConfig::default(),
            bm25: Bm25Params::default(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub train_corpus_hash: String,
    pub test_corpus_hash: String,
    pub checkpoint_hashes: Vec<String>,
    pub method_config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub target: String,
    pub train_id: u64,
    pub method: String,
    pub score: f64,
    pub rank: usize,
}

/// Scores oriented so that a higher value means "more likely behind the
/// hallucination". DDA reports `−IS_DDA`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionResult {
    pub method: Method,
    pub train_ids: Vec<u64>,
    /// Keyed by hallucinating test id.
    pub per_test: BTreeMap<u64, Vec<f64>>,
    /// Keyed by hallucination type: the mean of that type's per-test scores.
    pub pooled: BTreeMap<String, Vec<f64>>,
    pub provenance: Provenance,
}

impl AttributionResult {
    fn group(&self, target: &str, scores: &[f64], out: &mut Vec<ScoreRecord>) {
        for (rank, i) in rank_order(&self.train_ids, scores).into_iter().enumerate() {
            out.push(ScoreRecord {
                target: target.to_string(),
                train_id: self.train_ids[i],
                method: self.method.tag().to_string(),
                score: scores[i],
                rank: rank + 1,
            });
        }
    }

    /// Ranked views: pooled groups first, then one group per test example.
    pub fn records(&self) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        for (t, s) in &self.pooled {
            self.group(t, s, &mut out);
        }
        for (id, s) in &self.per_test {
            self.group(&id.to_string(), s, &mut out);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("target,train_id,method,score,rank\n");
        for r in self.records() {
            let _ = writeln!(s, "{},{},{},{:.16e},{}", r.target, r.train_id, r.method, r.score, r.rank);
        }
        s
    }
}

/// Everything needed to attribute one set of hallucinating outputs.
pub struct AttributionInputs<'a> {
    pub train: &'a CorruptedCorpus,
    pub test: &'a CorruptedCorpus,
    pub featurizer: &'a Featurizer,
    /// Model output token per test id.
    pub predictions: &'a BTreeMap<u64, String>,
    pub partition: &'a TestPartition,
    /// θ0 and the fine-tuning epochs θ1..θN.
    pub trajectory: &'a CheckpointSet,
    pub contrastive: Option<&'a ContrastiveTrajectories>,
    /// Corpus hashes the checkpoints were trained and partitioned against.
    pub lineage: (&'a str, &'a str),
}

impl AttributionInputs<'_> {
    fn check_lineage(&self) -> Result<()> {
        if self.train.content_hash != self.lineage.0 {
            return Err(Error::Provenance(format!(
                "training corpus hash {} does not match checkpoint lineage {}",
                self.train.content_hash, self.lineage.0
            )));
        }
        if self.test.content_hash != self.lineage.1 {
            return Err(Error::Provenance(format!(
                "test corpus hash {} does not match partition lineage {}",
                self.test.content_hash, self.lineage.1
            )));
        }
        self.trajectory.validate()?;
        Ok(())
    }

    fn test_instance(&self, id: u64) -> Result<Instance> {
        let ex = self.test.get(id).ok_or(Error::NotFound(id))?;
        let pred = self.predictions.get(&id).ok_or(Error::NotFound(id))?;
        let inst = self.featurizer.instance(id, &ex.document, Some(pred));
        if inst.label.is_none() {
            return Err(Error::NotScorable(id));
        }
        Ok(inst)
    }

    fn checkpoint_hashes(&self) -> Vec<String> {
        let mut v: Vec<String> = std::iter::once(&self.trajectory.base)
            .chain(&self.trajectory.epochs)
            .map(|c| c.content_hash())
            .collect();
        if let Some(c) = self.contrastive {
            for set in [&c.positive, &c.negative] {
                v.extend(set.epochs.iter().map(|c| c.content_hash()));
            }
        }
        v
    }
}

/// Cached probe tables for the DDA family; the β-dependent combination is
/// cheap, so sweeps and ablations reuse one instance.
pub struct DdaTables {
    pub negatives: Vec<(u64, String)>,
    /// Per main-trajectory epoch: row 0 is the positive-subset mean, rows
    /// 1.. are the individual negatives.
    main: Vec<ProbeDots>,
    /// Same layout at θ0.
    base: ProbeDots,
    /// Test-side gradients at each epoch dotted with training gradients at θ0.
    mixed: Vec<ProbeDots>,
    /// Branch epochs: positive-subset mean on the positive branch, each
    /// negative on the negative branch.
    pos_branch: Vec<ProbeDots>,
    neg_branch: Vec<ProbeDots>,
}

impl DdaTables {
    pub fn build(inputs: &AttributionInputs, workers: usize) -> Result<Self> {
        inputs.check_lineage()?;
        let train = inputs.featurizer.corpus_instances(inputs.train);
        let pos = inputs
            .partition
            .positives
            .iter()
            .map(|&id| inputs.test_instance(id))
            .collect::<Result<Vec<_>>>()?;
        let neg = inputs
            .partition
            .negatives
            .iter()
            .map(|(id, _)| inputs.test_instance(*id))
            .collect::<Result<Vec<_>>>()?;
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::InvalidInput("both partition sides must be non-empty".into()));
        }
        let probes_at = |c: &Checkpoint| -> Result<Vec<GradientVector>> {
            let mut v = vec![GradientVector::mean(&grads_at(c, &pos)?)?];
            v.extend(grads_at(c, &neg)?);
            Ok(v)
        };
        let base_ck = &inputs.trajectory.base;
        let base = probe_dots(base_ck, &train, &probes_at(base_ck)?, workers)?;
        let mut main = Vec::new();
        let mut mixed = Vec::new();
        for c in &inputs.trajectory.epochs {
            let q = probes_at(c)?;
            main.push(probe_dots(c, &train, &q, workers)?);
            mixed.push(probe_dots(base_ck, &train, &q, workers)?);
        }
        if main.is_empty() {
            return Err(Error::InvalidInput("trajectory has no epoch checkpoints".into()));
        }
        let mut pos_branch = Vec::new();
        let mut neg_branch = Vec::new();
        if let Some(c) = inputs.contrastive {
            for ck in &c.positive.epochs {
                let q = vec![GradientVector::mean(&grads_at(ck, &pos)?)?];
                pos_branch.push(probe_dots(ck, &train, &q, workers)?);
            }
            for ck in &c.negative.epochs {
                neg_branch.push(probe_dots(ck, &train, &grads_at(ck, &neg)?, workers)?);
            }
        }
        Ok(Self {
            negatives: inputs.partition.negatives.clone(),
            main,
            base,
            mixed,
            pos_branch,
            neg_branch,
        })
    }

    pub fn epochs(&self) -> usize {
        self.main.len()
    }

    pub fn train_len(&self) -> usize {
        self.base.train_norms.len()
    }

    /// Branch form: `DD_neg − DD_pos`, each over its own branch epochs.
    fn branch_score(&self, j: usize, beta: f64, anchor: &ProbeDots) -> Result<Vec<f64>> {
        if self.pos_branch.is_empty() || self.neg_branch.is_empty() {
            return Err(Error::InvalidInput("branch scoring needs contrastive trajectories".into()));
        }
        let n = self.train_len();
        let mut out = Vec::with_capacity(n);
        let mut pos = vec![0.0; self.pos_branch.len()];
        let mut neg = vec![0.0; self.neg_branch.len()];
        for t in 0..n {
            for (slot, d) in self.pos_branch.iter().enumerate() {
                pos[slot] = d.dots[0][t];
            }
            for (slot, d) in self.neg_branch.iter().enumerate() {
                neg[slot] = d.dots[j][t];
            }
            let dd_pos = denoise_mean(&pos)? - beta * anchor.dots[0][t];
            let dd_neg = denoise_mean(&neg)? - beta * anchor.dots[j + 1][t];
            out.push(dd_neg - dd_pos);
        }
        Ok(out)
    }

    /// Hallucination-side score `−IS_DDA` for negative `j`, over the epoch
    /// checkpoints selected by `epochs` (1-based).
    fn score(
        &self,
        j: usize,
        epochs: &[usize],
        beta: f64,
        form: DebiasForm,
    ) -> Result<Vec<f64>> {
        let n = self.train_len();
        let mut out = Vec::with_capacity(n);
        let mut per = vec![0.0; epochs.len()];
        let mut per_mixed = vec![0.0; epochs.len()];
        for t in 0..n {
            // contrast = negative-branch probe minus positive-subset probe
            for (slot, &ep) in epochs.iter().enumerate() {
                let d = &self.main[ep - 1].dots;
                per[slot] = d[j + 1][t] - d[0][t];
                let m = &self.mixed[ep - 1].dots;
                per_mixed[slot] = m[j + 1][t] - m[0][t];
            }
            let dn = denoise_mean(&per)?;
            let s0 = match form {
                DebiasForm::Full => self.base.dots[j + 1][t] - self.base.dots[0][t],
                DebiasForm::Mixed => denoise_mean(&per_mixed)?,
            };
            out.push(dn - beta * s0);
        }
        Ok(out)
    }

    /// Per-test scores for one DDA-family method.
    pub fn per_test(
        &self,
        method: Method,
        cfg: &MethodConfig,
    ) -> Result<BTreeMap<u64, Vec<f64>>> {
        let all: Vec<usize> = (1..=self.epochs()).collect();
        let (epochs, beta) = match method {
            Method::Dda => (all, cfg.debias.beta),
            Method::DdaNoDebias => (all, 0.0),
            Method::DdaNoDenoise => {
                if cfg.single_epoch == 0 || cfg.single_epoch > self.epochs() {
                    return Err(Error::InvalidInput(format!(
                        "single-checkpoint ablation needs epoch {} but the trajectory has {}",
                        cfg.single_epoch,
                        self.epochs()
                    )));
                }
                (vec![cfg.single_epoch], cfg.debias.beta)
            }
            _ => return Err(Error::InvalidInput(format!("{} is not a DDA method", method.tag()))),
        };
        if cfg.scheme != DdaScheme::Trajectory && cfg.debias_form == DebiasForm::Mixed {
            return Err(Error::Config("mixed-debias is defined for the trajectory scheme only".into()));
        }
        let mut out = BTreeMap::new();
        for (j, (id, _)) in self.negatives.iter().enumerate() {
            let row = match (cfg.scheme, method) {
                (DdaScheme::BranchRoot, Method::Dda | Method::DdaNoDebias) => {
                    self.branch_score(j, beta, self.main.last().expect("non-empty"))?
                }
                (DdaScheme::BranchBase, Method::Dda | Method::DdaNoDebias) => {
                    self.branch_score(j, beta, &self.base)?
                }
                _ => self.score(j, &epochs, beta, cfg.debias_form)?,
            };
            out.insert(*id, row);
        }
        Ok(out)
    }
}

/// Fixed-order mean of each type's per-test rows.
pub fn pool_by_type(
    per_test: &BTreeMap<u64, Vec<f64>>,
    negatives: &[(u64, String)],
) -> BTreeMap<String, Vec<f64>> {
    let mut groups: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    for (id, t) in negatives {
        if let Some(row) = per_test.get(id) {
            groups.entry(t.clone()).or_default().push(row);
        }
    }
    groups
        .into_iter()
        .map(|(t, rows)| {
            let n = rows[0].len();
            let mut acc = vec![0.0; n];
            for row in &rows {
                for (a, v) in acc.iter_mut().zip(row.iter()) {
                    *a += v;
                }
            }
            let inv = rows.len() as f64;
            (t, acc.into_iter().map(|a| a / inv).collect())
        })
        .collect()
}

fn scored_negatives(inputs: &AttributionInputs) -> Result<Vec<Instance>> {
    inputs
        .partition
        .negatives
        .iter()
        .map(|(id, _)| inputs.test_instance(*id))
        .collect()
}

/// Scores every training sample against every hallucinating test output.
pub fn attribute_testset(inputs: &AttributionInputs, cfg: &MethodConfig) -> Result<AttributionResult> {
    inputs.check_lineage()?;
    let train_ids: Vec<u64> = inputs.train.examples.iter().map(|e| e.id).collect();
    let per_test = match cfg.method {
        Method::Dda | Method::DdaNoDebias | Method::DdaNoDenoise => {
            DdaTables::build(inputs, cfg.workers)?.per_test(cfg.method, cfg)?
        }
        Method::Raw => {
            let train = inputs.featurizer.corpus_instances(inputs.train);
            let last = inputs.trajectory.last();
            let neg = scored_negatives(inputs)?;
            let pd = probe_dots(last, &train, &grads_at(last, &neg)?, cfg.workers)?;
            neg.iter().map(|z| z.id).zip(pd.dots).collect()
        }
        Method::Tracin => {
            let train = inputs.featurizer.corpus_instances(inputs.train);
            let neg = scored_negatives(inputs)?;
            let mut acc = vec![vec![0.0; train.len()]; neg.len()];
            for c in &inputs.trajectory.epochs {
                let pd = probe_dots(c, &train, &grads_at(c, &neg)?, cfg.workers)?;
                for (j, row) in acc.iter_mut().enumerate() {
                    for (t, a) in row.iter_mut().enumerate() {
                        let den = pd.probe_norms[j] * pd.train_norms[t];
                        if den > 0.0 {
                            *a += pd.dots[j][t] / den;
                        }
                    }
                }
            }
            neg.iter().map(|z| z.id).zip(acc).collect()
        }
        Method::Trak => {
            let train = inputs.featurizer.corpus_instances(inputs.train);
            let neg = scored_negatives(inputs)?;
            let rows = trak_lite(inputs.trajectory.last(), &train, &neg, &cfg.trak, cfg.workers)?;
            neg.iter().map(|z| z.id).zip(rows).collect()
        }
        Method::Bm25 => {
            let bags: Vec<Vec<String>> = inputs
                .train
                .examples
                .iter()
                .map(|e| e.document.iter().chain(&e.summary).cloned().collect())
                .collect();
            let stats = CorpusStats::from_docs(&bags);
            let mut out = BTreeMap::new();
            for (id, _) in &inputs.partition.negatives {
                let ex = inputs.test.get(*id).ok_or(Error::NotFound(*id))?;
                let pred = inputs.predictions.get(id).ok_or(Error::NotFound(*id))?;
                let mut query = ex.document.clone();
                query.extend(tokenize(pred));
                let row: Vec<f64> = with_pool(cfg.workers, || {
                    bags.par_iter()
                        .map(|d| bm25_score(&query, d, &stats, &cfg.bm25))
                        .collect()
                })?;
                out.insert(*id, row);
            }
            out
        }
    };
    let pooled = pool_by_type(&per_test, &inputs.partition.negatives);
    Ok(AttributionResult {
        method: cfg.method,
        train_ids,
        per_test,
        pooled,
        provenance: Provenance {
            train_corpus_hash: inputs.train.content_hash.clone(),
            test_corpus_hash: inputs.test.content_hash.clone(),
            checkpoint_hashes: inputs.checkpoint_hashes(),
            method_config: serde_json::to_string(cfg)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{dda_contrastive, subset_gradient, support_score};
    use crate::pipeline::{Experiment, ExperimentConfig};
    use std::sync::OnceLock;

    fn small() -> &'static Experiment {
        static EXP: OnceLock<Experiment> = OnceLock::new();
        EXP.get_or_init(|| Experiment::run(&ExperimentConfig::small()).expect("small run"))
    }

    fn cfg(method: Method) -> MethodConfig {
        MethodConfig {
            method,
            trak: TrakConfig {
                proj_dim: 32,
                ..TrakConfig::default()
            },
            ..MethodConfig::default()
        }
    }

    #[test]
    fn ranks_follow_tie_rule_and_pooled_is_mean() {
        let exp = small();
        for m in [Method::Raw, Method::Dda, Method::Tracin, Method::Trak, Method::Bm25] {
            let r = attribute_testset(&exp.inputs(), &cfg(m)).unwrap();
            let recs = r.records();
            let n = r.train_ids.len();
            assert_eq!(recs.len(), n * (r.pooled.len() + r.per_test.len()));
            for group in recs.chunks(n) {
                let ranks: Vec<usize> = group.iter().map(|x| x.rank).collect();
                assert_eq!(ranks, (1..=n).collect::<Vec<_>>());
                for w in group.windows(2) {
                    assert!(
                        w[0].score > w[1].score
                            || (w[0].score == w[1].score && w[0].train_id < w[1].train_id)
                    );
                }
            }
            for (t, pooled) in &r.pooled {
                let ids = exp.partition.negatives_of(t);
                for (i, &p) in pooled.iter().enumerate() {
                    let mut s = 0.0;
                    for id in &ids {
                        s += r.per_test[id][i];
                    }
                    assert_eq!(p, s / ids.len() as f64);
                }
            }
        }
    }

    #[test]
    fn csv_is_independent_of_worker_count() {
        let exp = small();
        for m in [Method::Dda, Method::Trak, Method::Bm25] {
            let one = attribute_testset(&exp.inputs(), &MethodConfig { workers: 1, ..cfg(m) }).unwrap();
            let many = attribute_testset(&exp.inputs(), &MethodConfig { workers: 8, ..cfg(m) }).unwrap();
            assert_eq!(one.to_csv(), many.to_csv());
        }
        let csv = attribute_testset(&exp.inputs(), &cfg(Method::Raw)).unwrap().to_csv();
        assert!(csv.starts_with("target,train_id,method,score,rank\n"));
        let score = csv.lines().nth(1).unwrap().split(',').nth(3).unwrap();
        // one leading digit plus sixteen after the point
        let mantissa = score.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17);
    }

    #[test]
    fn lineage_mismatch_is_a_provenance_error() {
        let exp = small();
        let mut inputs = exp.inputs();
        inputs.lineage.0 = "deadbeef";
        let err = attribute_testset(&inputs, &cfg(Method::Raw)).unwrap_err();
        assert!(matches!(err, Error::Provenance(_)));
    }

    #[test]
    fn trajectory_tables_match_scalar_route() {
        let exp = small();
        let inputs = exp.inputs();
        let tables = DdaTables::build(&inputs, 2).unwrap();
        let beta = 0.7;
        let mc = MethodConfig {
            debias: DebiasConfig { beta },
            ..cfg(Method::Dda)
        };
        let per_test = tables.per_test(Method::Dda, &mc).unwrap();
        let train = exp.featurizer.corpus_instances(&exp.corpora.train);
        let pos: Vec<Instance> = exp.partition.positives.iter().map(|&id| inputs.test_instance(id).unwrap()).collect();
        let (eid, _) = &exp.partition.negatives[0];
        let e = inputs.test_instance(*eid).unwrap();
        let contrast = |c: &Checkpoint, t: &Instance| -> f64 {
            let mut probe = model::per_example_grad(&c.arch, &c.params, &e).unwrap();
            probe.axpy(-1.0, &subset_gradient(c, &pos).unwrap());
            support_score(&probe, &model::per_example_grad(&c.arch, &c.params, t).unwrap()).unwrap()
        };
        for ti in [0, 7, train.len() - 1] {
            let per: Vec<f64> = exp.trajectory.epochs.iter().map(|c| contrast(c, &train[ti])).collect();
            let expect = denoise_mean(&per).unwrap() - beta * contrast(&exp.trajectory.base, &train[ti]);
            let got = per_test[eid][ti];
            assert!((got - expect).abs() <= 1e-9 * expect.abs().max(1e-12), "{got} vs {expect}");
        }

        // β = 0 is the undebiased ablation exactly
        let zero = MethodConfig {
            debias: DebiasConfig { beta: 0.0 },
            ..mc.clone()
        };
        assert_eq!(
            tables.per_test(Method::Dda, &zero).unwrap(),
            tables.per_test(Method::DdaNoDebias, &mc).unwrap()
        );
    }

    #[test]
    fn branch_tables_match_contrastive_scalar() {
        let exp = small();
        let inputs = exp.inputs();
        let tables = DdaTables::build(&inputs, 1).unwrap();
        let mc = MethodConfig {
            scheme: DdaScheme::BranchRoot,
            ..cfg(Method::Dda)
        };
        let per_test = tables.per_test(Method::Dda, &mc).unwrap();
        let train = exp.featurizer.corpus_instances(&exp.corpora.train);
        let pos: Vec<Instance> = exp.partition.positives.iter().map(|&id| inputs.test_instance(id).unwrap()).collect();
        let (eid, _) = &exp.partition.negatives[1];
        let e = inputs.test_instance(*eid).unwrap();
        for ti in [2, 50] {
            let is = dda_contrastive(&exp.contrastive, exp.trajectory.last(), &train[ti], &pos, &[e.clone()], &mc.debias)
                .unwrap();
            let got = per_test[eid][ti];
            assert!((got + is).abs() <= 1e-9 * is.abs().max(1e-12), "{got} vs {}", -is);
        }
        let mixed = MethodConfig {
            debias_form: DebiasForm::Mixed,
            ..mc
        };
        assert!(tables.per_test(Method::Dda, &mixed).is_err());
    }

    #[test]
    fn single_epoch_ablation_needs_that_epoch() {
        let exp = small();
        let tables = DdaTables::build(&exp.inputs(), 1).unwrap();
        let mc = MethodConfig {
            single_epoch: 9,
            ..cfg(Method::DdaNoDenoise)
        };
        assert!(tables.per_test(Method::DdaNoDenoise, &mc).is_err());
        let ok = MethodConfig {
            single_epoch: 3,
            ..mc
        };
        assert_eq!(tables.per_test(Method::DdaNoDenoise, &ok).unwrap().len(), exp.partition.negatives.len());
    }

    #[test]
    fn method_tags_round_trip() {
        for m in [
            Method::Raw,
            Method::Dda,
            Method::Tracin,
            Method::Trak,
            Method::Bm25,
            Method::DdaNoDenoise,
            Method::DdaNoDebias,
        ] {
            assert_eq!(Method::parse(m.tag()).unwrap(), m);
        }
        assert!(Method::parse("cea").is_err());
    }
}

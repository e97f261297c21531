//! One function per subcommand. Each reads its inputs from the run
//! directory through [`Run`], so every consumed file lands in the manifest.

use std::collections::{BTreeMap, BTreeSet};

use dda_core::corpus::{CorpusManifest, CorruptedCorpus, TestPartition};
use dda_core::eval::{
    beta_grid, case_listing, metrics_csv, rank_metrics, run_ablation, sweep_beta, sweep_csv, MetricRow,
    SweepCurve,
};
use dda_core::influence::engine::{attribute_testset, AttributionInputs, DdaTables, Method};
use dda_core::model::{Featurizer, Instance, ModelArch};
use dda_core::oracle::influence_vs_loo;
use dda_core::pipeline::{self, ExperimentConfig};
use dda_core::training::{Checkpoint, CheckpointSet, ContrastiveTrajectories};
use dda_core::Error;
use serde::{Deserialize, Serialize};

use crate::charts;
use crate::config::Config;
use crate::run::Run;
use crate::{CliError, Format};

type Res<T> = Result<T, CliError>;

/// Methods in the order reports list them.
pub const METHODS: [Method; 5] = [Method::Raw, Method::Dda, Method::Tracin, Method::Trak, Method::Bm25];

#[derive(Serialize, Deserialize)]
struct TrainLineage {
    train_corpus_hash: String,
    epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct TestLineage {
    train_corpus_hash: String,
    test_corpus_hash: String,
}

fn ckpt_bytes(run: &mut Run, rel: &str) -> Res<Checkpoint> {
    Ok(Checkpoint::from_bytes(&run.read(rel)?)?)
}

fn write_ckpt(run: &mut Run, rel: &str, c: &Checkpoint) -> Res<()> {
    run.write(rel, &c.to_bytes())
}

fn epoch_name(prefix: &str, epoch: usize) -> String {
    format!("{prefix}-{epoch:02}.ckpt")
}

fn load_corpus(run: &mut Run, name: &str) -> Res<CorruptedCorpus> {
    let manifest: CorpusManifest = run.read_json(&format!("corpora/{name}.manifest.json"))?;
    let bytes = run.read(&format!("corpora/{name}.jsonl"))?;
    Ok(CorruptedCorpus::from_jsonl(&bytes, &manifest)?)
}

fn write_corpus(run: &mut Run, name: &str, c: &CorruptedCorpus) -> Res<()> {
    run.write(&format!("corpora/{name}.jsonl"), &c.to_jsonl())?;
    run.write_json(&format!("corpora/{name}.manifest.json"), &c.manifest())
}

fn load_trajectory(run: &mut Run) -> Res<(CheckpointSet, String)> {
    let lineage: TrainLineage = run.read_json("checkpoints/lineage.json")?;
    let base = ckpt_bytes(run, "checkpoints/base.ckpt")?;
    let epochs = (1..=lineage.epochs)
        .map(|e| ckpt_bytes(run, &format!("checkpoints/{}", epoch_name("epoch", e))))
        .collect::<Res<Vec<_>>>()?;
    let set = CheckpointSet { base, epochs };
    set.validate()?;
    Ok((set, lineage.train_corpus_hash))
}

/// Everything an attribution needs, loaded from one run directory.
struct Loaded {
    train: CorruptedCorpus,
    test: CorruptedCorpus,
    featurizer: Featurizer,
    trajectory: CheckpointSet,
    predictions: BTreeMap<u64, String>,
    partition: TestPartition,
    contrastive: ContrastiveTrajectories,
    lineage: TestLineage,
}

impl Loaded {
    fn read(run: &mut Run, exp: &ExperimentConfig) -> Res<Self> {
        let train = load_corpus(run, "train")?;
        let test = load_corpus(run, "test")?;
        let featurizer = pipeline::featurizer(exp, &train);
        let (trajectory, _) = load_trajectory(run)?;
        let predictions = run.read_json("contrast/predictions.json")?;
        let partition = run.read_json("contrast/partition.json")?;
        let lineage: TestLineage = run.read_json("contrast/lineage.json")?;
        let branch = |run: &mut Run, side: &str| -> Res<CheckpointSet> {
            let epochs = (1..=exp.contrast_epochs)
                .map(|e| ckpt_bytes(run, &format!("contrast/{}", epoch_name(side, e))))
                .collect::<Res<Vec<_>>>()?;
            Ok(CheckpointSet {
                base: trajectory.last().clone(),
                epochs,
            })
        };
        let contrastive = ContrastiveTrajectories {
            positive: branch(run, "positive")?,
            negative: branch(run, "negative")?,
        };
        Ok(Self {
            train,
            test,
            featurizer,
            trajectory,
            predictions,
            partition,
            contrastive,
            lineage,
        })
    }

    fn inputs(&self) -> AttributionInputs<'_> {
        AttributionInputs {
            train: &self.train,
            test: &self.test,
            featurizer: &self.featurizer,
            predictions: &self.predictions,
            partition: &self.partition,
            trajectory: &self.trajectory,
            contrastive: Some(&self.contrastive),
            lineage: (&self.lineage.train_corpus_hash, &self.lineage.test_corpus_hash),
        }
    }
}

pub fn synth(run: &mut Run, cfg: &Config) -> Res<()> {
    let c = pipeline::build_corpora(&cfg.experiment())?;
    write_corpus(run, "train", &c.train)?;
    write_corpus(run, "clean", &c.clean)?;
    write_corpus(run, "test", &c.test)?;
    run.details.insert("corrupted".into(), c.train.corrupted_count().into());
    Ok(())
}

pub fn pretrain(run: &mut Run, cfg: &Config) -> Res<()> {
    let exp = cfg.experiment();
    let train = load_corpus(run, "train")?;
    let clean = load_corpus(run, "clean")?;
    let base = pipeline::pretrain(&exp, &clean, &pipeline::featurizer(&exp, &train))?;
    write_ckpt(run, "checkpoints/base.ckpt", &base)
}

pub fn finetune(run: &mut Run, cfg: &Config) -> Res<()> {
    let exp = cfg.experiment();
    let train = load_corpus(run, "train")?;
    let base = ckpt_bytes(run, "checkpoints/base.ckpt")?;
    let set = pipeline::finetune(&exp, &train, &pipeline::featurizer(&exp, &train), &base)?;
    for c in &set.epochs {
        write_ckpt(run, &format!("checkpoints/{}", epoch_name("epoch", c.epoch)), c)?;
    }
    let losses: Vec<f64> = set.epochs.iter().map(|c| c.train_loss).collect();
    run.details.insert("train_loss".into(), serde_json::json!(losses));
    run.write_json(
        "checkpoints/lineage.json",
        &TrainLineage {
            train_corpus_hash: train.content_hash.clone(),
            epochs: set.epochs.len(),
        },
    )
}

pub fn contrast(run: &mut Run, cfg: &Config) -> Res<()> {
    let exp = cfg.experiment();
    let train = load_corpus(run, "train")?;
    let test = load_corpus(run, "test")?;
    let (set, train_hash) = load_trajectory(run)?;
    if train_hash != train.content_hash {
        return Err(Error::Provenance("checkpoints were trained on a different corpus".into()).into());
    }
    let feat = pipeline::featurizer(&exp, &train);
    let predictions = pipeline::predict(set.last(), &test, &feat);
    let part = pipeline::partition(&exp, &predictions, &test)?;
    let branches = pipeline::contrast(&exp, &test, &feat, &predictions, &part, set.last())?;
    for (side, b) in [("positive", &branches.positive), ("negative", &branches.negative)] {
        for c in &b.epochs {
            write_ckpt(run, &format!("contrast/{}", epoch_name(side, c.epoch)), c)?;
        }
    }
    run.details.insert("positives".into(), part.positives.len().into());
    run.details.insert("negatives".into(), part.negatives.len().into());
    run.write_json("contrast/predictions.json", &predictions)?;
    run.write_json("contrast/partition.json", &part)?;
    run.write_json(
        "contrast/lineage.json",
        &TestLineage {
            train_corpus_hash: train_hash,
            test_corpus_hash: test.content_hash.clone(),
        },
    )
}

pub fn attribute(run: &mut Run, cfg: &Config) -> Res<()> {
    let exp = cfg.experiment();
    let loaded = Loaded::read(run, &exp)?;
    let result = attribute_testset(&loaded.inputs(), &cfg.influence)?;
    run.details.insert("provenance".into(), serde_json::to_value(&result.provenance).unwrap());
    run.write(&format!("scores/{}.csv", cfg.influence.method.tag()), result.to_csv().as_bytes())
}

/// Pooled rows of a score file, aligned with the training corpus order.
fn read_pooled(run: &mut Run, method: Method, train: &CorruptedCorpus) -> Res<BTreeMap<String, Vec<f64>>> {
    let rel = format!("scores/{}.csv", method.tag());
    let bytes = run.read(&rel)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Runtime(format!("{rel}: {e}")))?;
    let index: BTreeMap<u64, usize> = train.examples.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let types: BTreeSet<String> = train.spec.halluc_types().into_iter().collect();
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let bad = |line: usize| CliError::Runtime(format!("{rel}:{line}: malformed score row"));
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let [target, id, _, score, _] = cols[..] else {
            return Err(bad(n + 1));
        };
        if !types.contains(target) {
            continue;
        }
        let i = id.parse::<u64>().ok().and_then(|id| index.get(&id)).ok_or_else(|| bad(n + 1))?;
        let s: f64 = score.parse().map_err(|_| bad(n + 1))?;
        pooled.entry(target.to_string()).or_insert_with(|| vec![f64::NAN; index.len()])[*i] = s;
    }
    if pooled.values().flatten().any(|v| v.is_nan()) {
        return Err(CliError::Runtime(format!("{rel}: pooled rows do not cover the training corpus")));
    }
    Ok(pooled)
}

pub fn eval(run: &mut Run, cfg: &Config) -> Res<()> {
    let exp = cfg.experiment();
    let train = load_corpus(run, "train")?;
    let method = cfg.influence.method;
    let pooled = read_pooled(run, method, &train)?;
    if pooled.is_empty() {
        return Err(CliError::Runtime(format!("scores/{}.csv has no pooled rows", method.tag())));
    }
    let rows = pooled
        .iter()
        .map(|(t, scores)| {
            let (r_at_500, r_at_1000, auc) = rank_metrics(&train, scores, t)?;
            Ok(MetricRow {
                model_config: exp.model_config(),
                halluc_type: t.clone(),
                method: method.tag().to_string(),
                r_at_500,
                r_at_1000,
                auc,
            })
        })
        .collect::<dda_core::Result<Vec<_>>>()?;
    run.write(&format!("metrics/{}.csv", method.tag()), metrics_csv(&rows).as_bytes())
}

pub fn ablate(run: &mut Run, cfg: &Config, format: Format) -> Res<()> {
    let exp = cfg.experiment();
    let loaded = Loaded::read(run, &exp)?;
    let tables = DdaTables::build(&loaded.inputs(), cfg.influence.workers)?;
    let rows = run_ablation(&tables, &loaded.train, &cfg.influence, &exp.model_config())?;
    run.write("ablation/ablation.csv", metrics_csv(&rows).as_bytes())?;
    if format == Format::Svg {
        run.write("ablation/ablation.svg", charts::ablation_svg(&rows)?.as_bytes())?;
    }
    Ok(())
}

pub fn sweep(run: &mut Run, cfg: &Config, format: Format) -> Res<()> {
    let exp = cfg.experiment();
    let loaded = Loaded::read(run, &exp)?;
    let grid = beta_grid(cfg.eval.beta_from, cfg.eval.beta_to, cfg.eval.beta_step)?;
    let tables = DdaTables::build(&loaded.inputs(), cfg.influence.workers)?;
    let curve = sweep_beta(&grid, &tables, &loaded.train, &cfg.influence)?;
    run.write("sweep/sweep.csv", sweep_csv(&curve).as_bytes())?;
    if format == Format::Svg {
        run.write("sweep/sweep.svg", charts::sweep_svg(&curve)?.as_bytes())?;
    }
    Ok(())
}

/// Convex probe on a slice of the training corpus: entity-presence and
/// frequent-token features under a logistic model, where exact influence
/// and leave-one-out retraining are both computable.
pub fn loo(run: &mut Run, cfg: &Config) -> Res<()> {
    let exp = cfg.experiment();
    let train = load_corpus(run, "train")?;
    let test = load_corpus(run, "test")?;
    let classes = exp.synthesis.entities();
    let labelled = |c: &CorruptedCorpus, n: usize| -> Vec<(u64, Vec<String>, usize)> {
        c.examples
            .iter()
            .filter_map(|e| {
                let label = e.summary_entity(&classes)?;
                Some((e.id, e.document.clone(), classes.iter().position(|c| c == label)?))
            })
            .take(n)
            .collect()
    };
    let docs = labelled(&train, cfg.loo.n);
    let tests = labelled(&test, cfg.loo.tests);
    if docs.len() < cfg.loo.n || tests.is_empty() {
        return Err(Error::InsufficientData {
            side: "loo",
            needed: cfg.loo.n,
            found: docs.len(),
        }
        .into());
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, d, _) in &docs {
        for t in d.iter().collect::<BTreeSet<_>>() {
            if !classes.contains(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut frequent: Vec<(&str, usize)> = counts.into_iter().collect();
    frequent.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let features: Vec<String> = classes
        .iter()
        .cloned()
        .chain(frequent.iter().take(cfg.loo.extra_features).map(|(t, _)| t.to_string()))
        .collect();
    let inst = |(id, d, y): &(u64, Vec<String>, usize)| Instance {
        features: features
            .iter()
            .enumerate()
            .filter(|(_, f)| d.contains(f))
            .map(|(j, _)| (j, 1.0))
            .collect(),
        label: Some(*y),
        id: *id,
    };
    let train_inst: Vec<Instance> = docs.iter().map(inst).collect();
    let test_inst: Vec<Instance> = tests.iter().map(inst).collect();
    let arch = ModelArch::convex(features.len(), classes.len());
    let report = influence_vs_loo(&arch, &train_inst, &test_inst, cfg.loo.l2)?;
    if !report.refits_converged {
        run.warnings.push("a convex fit stopped short of the gradient tolerance".into());
    }
    run.details.insert("pearson".into(), report.pearson.into());
    run.details.insert("features".into(), serde_json::json!(features));
    let mut csv = String::from("train_id,test_id,influence,predicted_delta,loo_delta\n");
    for r in &report.rows {
        csv += &format!(
            "{},{},{:.16e},{:.16e},{:.16e}\n",
            r.train_id, r.test_id, r.influence, r.predicted_delta, r.loo_delta
        );
    }
    run.write("loo/loo.csv", csv.as_bytes())
}

pub fn parse_metrics(text: &str) -> Res<Vec<MetricRow>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| CliError::Runtime(format!("bad metric row: {line}")));
            match c[..] {
                [m, t, meth, a, b, auc] => Ok(MetricRow {
                    model_config: m.into(),
                    halluc_type: t.into(),
                    method: meth.into(),
                    r_at_500: num(a)?,
                    r_at_1000: num(b)?,
                    auc: num(auc)?,
                }),
                _ => Err(CliError::Runtime(format!("bad metric row: {line}"))),
            }
        })
        .collect()
}

pub fn parse_sweep(text: &str) -> Res<SweepCurve> {
    let mut curve = SweepCurve {
        beta_grid: vec![],
        auc: vec![],
        r_at_500: vec![],
        r_at_1000: vec![],
    };
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Runtime(format!("bad sweep row: {line}")))?;
        let [b, auc, r5, r10] = v[..] else {
            return Err(CliError::Runtime(format!("bad sweep row: {line}")));
        };
        curve.beta_grid.push(b);
        curve.auc.push(auc);
        curve.r_at_500.push(r5);
        curve.r_at_1000.push(r10);
    }
    Ok(curve)
}

/// Collects metrics, the ablation, the sweep and a case listing into `report/`.
pub fn report(run: &mut Run, cfg: &Config, format: Format) -> Res<()> {
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut push = |new: Vec<MetricRow>| {
        for r in new {
            if !rows.iter().any(|x| x.method == r.method && x.halluc_type == r.halluc_type) {
                rows.push(r);
            }
        }
    };
    for m in METHODS {
        let rel = format!("metrics/{}.csv", m.tag());
        if run.exists(&rel) {
            push(parse_metrics(&String::from_utf8_lossy(&run.read(&rel)?))?);
        }
    }
    let ablation = if run.exists("ablation/ablation.csv") {
        let a = parse_metrics(&String::from_utf8_lossy(&run.read("ablation/ablation.csv")?))?;
        push(a.clone());
        Some(a)
    } else {
        None
    };
    if rows.is_empty() {
        return Err(CliError::Runtime("nothing to report: run eval or ablate first".into()));
    }
    let curve = if run.exists("sweep/sweep.csv") {
        Some(parse_sweep(&String::from_utf8_lossy(&run.read("sweep/sweep.csv")?))?)
    } else {
        None
    };
    let method = cfg.influence.method;
    let cases = if run.exists(&format!("scores/{}.csv", method.tag())) {
        let train = load_corpus(run, "train")?;
        let pooled = read_pooled(run, method, &train)?;
        Some(case_listing(method, &pooled, &train, cfg.eval.k)?)
    } else {
        None
    };
    let out = dda_core::eval::build_report(&run.dir.join("report"), &rows, curve.as_ref(), cases.as_deref())?;
    for p in [Some(out.metrics), out.sweep, out.cases].into_iter().flatten() {
        let rel = p.strip_prefix(&run.dir).expect("inside the run").to_string_lossy().into_owned();
        let bytes = std::fs::read(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        run.write(&rel, &bytes)?;
    }
    if format == Format::Svg {
        if let Some(c) = &curve {
            run.write("report/sweep.svg", charts::sweep_svg(c)?.as_bytes())?;
        }
        if let Some(a) = &ablation {
            run.write("report/ablation.svg", charts::ablation_svg(a)?.as_bytes())?;
        }
    }
    Ok(())
}

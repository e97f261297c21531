//! Ranking metrics, ablations, β sweeps and report files.

mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorruptedCorpus;
use crate::error::{Error, Result};
use crate::influence::engine::{pool_by_type, DdaTables, Method, MethodConfig};
use crate::influence::{AttributionResult, DebiasConfig};

pub use metrics::*;

/// Both recall cut-offs reported per row.
pub const RECALL_KS: [usize; 2] = [500, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_config: String,
    pub halluc_type: String,
    pub method: String,
    pub r_at_500: f64,
    pub r_at_1000: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub beta_grid: Vec<f64>,
    pub auc: Vec<f64>,
    pub r_at_500: Vec<f64>,
    pub r_at_1000: Vec<f64>,
}

/// A training sample is positive for a type when it was corrupted into that type.
pub fn type_labels(train: &CorruptedCorpus, halluc_type: &str) -> Vec<bool> {
    train
        .examples
        .iter()
        .map(|e| e.corrupted && e.halluc_type.as_deref() == Some(halluc_type))
        .collect()
}

/// R@500, R@1000 and AUC of one pooled ranking.
pub fn rank_metrics(
    train: &CorruptedCorpus,
    scores: &[f64],
    halluc_type: &str,
) -> Result<(f64, f64, f64)> {
    let ids: Vec<u64> = train.examples.iter().map(|e| e.id).collect();
    let ranked: Vec<Option<String>> = rank_order(&ids, scores)
        .into_iter()
        .map(|i| {
            let e = &train.examples[i];
            e.halluc_type.clone().filter(|_| e.corrupted)
        })
        .collect();
    let observed: BTreeSet<String> = [halluc_type.to_string()].into();
    // corpora shorter than a cut-off are read in full
    let n = ranked.len();
    let r500 = recall_at_k(&ranked, &observed, RECALL_KS[0].min(n))?;
    let r1000 = recall_at_k(&ranked, &observed, RECALL_KS[1].min(n))?;
    let auc = roc_auc(scores, &type_labels(train, halluc_type))?;
    Ok((r500, r1000, auc))
}

/// One row per pooled hallucination type.
pub fn evaluate(
    result: &AttributionResult,
    train: &CorruptedCorpus,
    model_config: &str,
    method_label: &str,
) -> Result<Vec<MetricRow>> {
    result
        .pooled
        .iter()
        .map(|(t, scores)| {
            let (r_at_500, r_at_1000, auc) = rank_metrics(train, scores, t)?;
            Ok(MetricRow {
                model_config: model_config.to_string(),
                halluc_type: t.clone(),
                method: method_label.to_string(),
                r_at_500,
                r_at_1000,
                auc,
            })
        })
        .collect()
}

/// Mean of a metric column, in row order.
pub fn mean_of(rows: &[MetricRow], f: impl Fn(&MetricRow) -> f64) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::UndefinedMetric("no rows to average".into()));
    }
    let mut s = 0.0;
    for r in rows {
        s += f(r);
    }
    Ok(s / rows.len() as f64)
}

fn dda_rows(
    tables: &DdaTables,
    train: &CorruptedCorpus,
    method: Method,
    cfg: &MethodConfig,
    model_config: &str,
) -> Result<Vec<MetricRow>> {
    let per_test = tables.per_test(method, cfg)?;
    let pooled = pool_by_type(&per_test, &tables.negatives);
    pooled
        .iter()
        .map(|(t, scores)| {
            let (r_at_500, r_at_1000, auc) = rank_metrics(train, scores, t)?;
            Ok(MetricRow {
                model_config: model_config.to_string(),
                halluc_type: t.clone(),
                method: method.tag().to_string(),
                r_at_500,
                r_at_1000,
                auc,
            })
        })
        .collect()
}

/// Full DDA, single-checkpoint DDA and undebiased DDA on identical inputs.
/// Rows come back grouped by method in that order.
pub fn run_ablation(
    tables: &DdaTables,
    train: &CorruptedCorpus,
    cfg: &MethodConfig,
    model_config: &str,
) -> Result<Vec<MetricRow>> {
    if tables.epochs() < 5 {
        return Err(Error::InvalidInput(format!(
            "ablation needs at least 5 epoch checkpoints, found {}",
            tables.epochs()
        )));
    }
    let mut rows = Vec::new();
    for m in [Method::Dda, Method::DdaNoDenoise, Method::DdaNoDebias] {
        rows.extend(dda_rows(tables, train, m, cfg, model_config)?);
    }
    Ok(rows)
}

/// Inclusive grid `from, from+step, ...` up to `to` (with a small tolerance
/// so that `0..=1.5` by `0.1` yields 16 points).
pub fn beta_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !from.is_finite() || !to.is_finite() || to < from {
        return Err(Error::Config(format!("bad sweep range ({from}, {to}, {step})")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| from + i as f64 * step).collect())
}

/// One DDA attribution and evaluation per grid point; everything but β held fixed.
pub fn sweep_beta(
    grid: &[f64],
    tables: &DdaTables,
    train: &CorruptedCorpus,
    cfg: &MethodConfig,
) -> Result<SweepCurve> {
    let mut curve = SweepCurve {
        beta_grid: grid.to_vec(),
        auc: Vec::new(),
        r_at_500: Vec::new(),
        r_at_1000: Vec::new(),
    };
    for &beta in grid {
        let point = MethodConfig {
            debias: DebiasConfig { beta },
            ..cfg.clone()
        };
        let rows = dda_rows(tables, train, Method::Dda, &point, "")?;
        curve.auc.push(mean_of(&rows, |r| r.auc)?);
        curve.r_at_500.push(mean_of(&rows, |r| r.r_at_500)?);
        curve.r_at_1000.push(mean_of(&rows, |r| r.r_at_1000)?);
    }
    Ok(curve)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("model_config,halluc_type,method,r_at_500,r_at_1000,auc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.model_config, r.halluc_type, r.method, r.r_at_500, r.r_at_1000, r.auc
        );
    }
    s
}

pub fn sweep_csv(curve: &SweepCurve) -> String {
    let mut s = String::from("beta,auc,r_at_500,r_at_1000\n");
    for i in 0..curve.beta_grid.len() {
        let _ = writeln!(
            s,
            "{:.2},{:.6},{:.6},{:.6}",
            curve.beta_grid[i], curve.auc[i], curve.r_at_500[i], curve.r_at_1000[i]
        );
    }
    s
}

/// Top-`k` training examples per pooled type, with that type's entity
/// tokens wrapped in `[[...]]`.
pub fn case_listing(
    method: Method,
    pooled: &BTreeMap<String, Vec<f64>>,
    train: &CorruptedCorpus,
    k: usize,
) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# top {k} attributed training examples per hallucination type");
    let _ = writeln!(s, "# method {}; higher score = stronger support for the hallucination", method.tag());
    let ids: Vec<u64> = train.examples.iter().map(|e| e.id).collect();
    for (t, scores) in pooled {
        if scores.len() != ids.len() {
            return Err(Error::Shape {
                expected: ids.len(),
                got: scores.len(),
            });
        }
        let pair = train
            .spec
            .pairs
            .iter()
            .find(|p| p.halluc_type() == *t)
            .ok_or_else(|| Error::InvalidInput(format!("unknown hallucination type {t}")))?;
        let mark = |toks: &[String]| -> String {
            toks.iter()
                .map(|w| {
                    if *w == pair.source || *w == pair.target {
                        format!("[[{w}]]")
                    } else {
                        w.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let order = rank_order(&ids, scores);
        if order.len() < k {
            return Err(Error::InvalidK { k, len: order.len() });
        }
        let hits = order[..k]
            .iter()
            .filter(|&&i| train.examples[i].halluc_type.as_deref() == Some(t.as_str()))
            .count();
        let _ = writeln!(s, "\n## {t}  (top-{k} precision {hits}/{k})");
        for (rank, &i) in order[..k].iter().enumerate() {
            let e = &train.examples[i];
            let _ = writeln!(
                s,
                "{}. id={} score={:.6e} corrupted={}\n   summary: {}\n   document: {}",
                rank + 1,
                e.id,
                scores[i],
                e.corrupted,
                mark(&e.summary),
                mark(&e.document)
            );
        }
    }
    Ok(s)
}

/// Paths of the files written by [`build_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: PathBuf,
    pub sweep: Option<PathBuf>,
    pub cases: Option<PathBuf>,
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn build_report(
    dir: &Path,
    rows: &[MetricRow],
    curve: Option<&SweepCurve>,
    cases: Option<&str>,
) -> Result<EvalReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(EvalReport {
        metrics: write(dir.join("metrics.csv"), &metrics_csv(rows))?,
        sweep: curve.map(|c| write(dir.join("sweep.csv"), &sweep_csv(c))).transpose()?,
        cases: cases.map(|c| write(dir.join("cases.txt"), c)).transpose()?,
    })
}

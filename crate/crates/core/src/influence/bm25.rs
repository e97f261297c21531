//! Okapi BM25 lexical baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
    pub avgdl: f64,
}

impl CorpusStats {
    pub fn from_docs(docs: &[Vec<String>]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        for d in docs {
            total += d.len();
            for t in d.iter().collect::<BTreeSet<_>>() {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        Self {
            n_docs: docs.len(),
            df,
            avgdl: if docs.is_empty() {
                0.0
            } else {
                total as f64 / docs.len() as f64
            },
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((self.n_docs as f64 - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Sum over query tokens (repeats counted) of the BM25 term weight.
pub fn bm25_score(query: &[String], doc: &[String], stats: &CorpusStats, p: &Bm25Params) -> f64 {
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in doc {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let norm = if stats.avgdl > 0.0 {
        1.0 - p.b + p.b * doc.len() as f64 / stats.avgdl
    } else {
        1.0
    };
    let mut s = 0.0;
    for q in query {
        let Some(&f) = tf.get(q.as_str()) else { continue };
        let f = f as f64;
        s += stats.idf(q) * f * (p.k1 + 1.0) / (f + p.k1 * norm);
    }
    s
}

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::corpus::EntitySwapSpec;
use crate::error::{Error, Result};

/// Descending score, ties broken by ascending id. Returns indices into `scores`.
pub fn rank_order(ids: &[u64], scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    idx
}

/// Fraction of the top `k` entries whose type is in `observed`.
pub fn recall_at_k(
    ranked_types: &[Option<String>],
    observed: &BTreeSet<String>,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > ranked_types.len() {
        return Err(Error::InvalidK {
            k,
            len: ranked_types.len(),
        });
    }
    let hits = ranked_types[..k]
        .iter()
        .filter(|t| t.as_ref().is_some_and(|t| observed.contains(t)))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Midranks (1-based) with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // positions i..=j share (i+1 + j+1)/2
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum (Mann-Whitney) AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let pf = p as f64;
    Ok((rank_sum - pf * (pf + 1.0) / 2.0) / (pf * n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::UndefinedMetric("correlation needs at least 3 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

pub fn rank_correlations(estimates: &[f64], reference: &[f64]) -> Result<Correlations> {
    let pearson_v = pearson(estimates, reference)?;
    let spearman = pearson(&midranks(estimates), &midranks(reference))?;
    Ok(Correlations {
        pearson: pearson_v,
        spearman,
    })
}

/// Returns the hallucination type when `prediction` is the swapped
/// counterpart of the document's source entity.
pub fn detect_hallucination(
    prediction: &str,
    document_entity: Option<&str>,
    spec: &EntitySwapSpec,
) -> Option<String> {
    let pair = spec.pair_for_source(document_entity?)?;
    (prediction == pair.target).then(|| pair.halluc_type())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_cases() {
        let a = Some("A".to_string());
        let all = vec![a.clone(); 5];
        assert_eq!(recall_at_k(&all, &set(&["A"]), 3).unwrap(), 1.0);
        let mixed = vec![a.clone(), None, a.clone(), None];
        assert_eq!(recall_at_k(&mixed, &set(&["A"]), 4).unwrap(), 0.5);
        assert!(matches!(
            recall_at_k(&mixed, &set(&["A"]), 5),
            Err(Error::InvalidK { k: 5, len: 4 })
        ));
        assert!(recall_at_k(&mixed, &set(&["A"]), 0).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[true, true, false]).unwrap(), 0.0);
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap(),
            0.75
        );
        assert_eq!(roc_auc(&[1.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[1.0, 2.0], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn correlation_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = rank_correlations(&x, &x).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-15 && (c.spearman - 1.0).abs() < 1e-15);
        let r = [4.0, 3.0, 2.0, 1.0];
        let c = rank_correlations(&x, &r).unwrap();
        assert!((c.pearson + 1.0).abs() < 1e-15 && (c.spearman + 1.0).abs() < 1e-15);
        let c = rank_correlations(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        assert!((c.spearman - (1.0 - 6.0 * 6.0 / 24.0)).abs() < 1e-12);
        assert!(rank_correlations(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(rank_correlations(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hallucination_lookup() {
        let spec = EntitySwapSpec::default();
        assert_eq!(
            detect_hallucination("china", Some("england"), &spec).as_deref(),
            Some("England→China")
        );
        assert_eq!(detect_hallucination("england", Some("england"), &spec), None);
        assert_eq!(detect_hallucination("paris", Some("england"), &spec), None);
        assert_eq!(detect_hallucination("china", Some("paris"), &spec), None);
        assert_eq!(detect_hallucination("china", None, &spec), None);
    }

    #[test]
    fn rank_order_tie_rule() {
        let ids = [5, 3, 9, 1];
        let scores = [1.0, 2.0, 2.0, 1.0];
        assert_eq!(rank_order(&ids, &scores), vec![1, 2, 3, 0]);
    }
}

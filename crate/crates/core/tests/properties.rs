use std::collections::BTreeSet;

use dda_core::corpus::{corrupt_corpus, synth_corpus, EntitySwapSpec, SynthesisSpec};
use dda_core::eval::{detect_hallucination, rank_order, recall_at_k, roc_auc};
use dda_core::influence::{debias_combine, denoise_score, support_at, DebiasConfig};
use dda_core::model::{init_params, InitMode, Instance, ModelArch};
use dda_core::oracle::{brute_rank_metrics, fit_convex, loo_delta, uniform_weights};
use dda_core::training::{Checkpoint, CheckpointSet};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so ties are common.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=200).prop_flat_map(|n| {
        (
            prop::collection::vec((-8i32..8).prop_map(|v| v as f64 * 0.25), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn ranked_types(scores: &[f64], labels: &[bool]) -> Vec<Option<String>> {
    let ids: Vec<u64> = (0..scores.len() as u64).collect();
    rank_order(&ids, scores)
        .into_iter()
        .map(|i| labels[i].then(|| "t".to_string()))
        .collect()
}

fn recall(scores: &[f64], labels: &[bool], k: usize) -> f64 {
    let observed: BTreeSet<String> = ["t".to_string()].into();
    recall_at_k(&ranked_types(scores, labels), &observed, k).unwrap()
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

proptest! {
    #[test]
    fn metrics_match_brute_force((scores, labels) in scored_labels(), kf in 0.0f64..1.0) {
        prop_assume!(both_classes(&labels));
        let k = 1 + (kf * (scores.len() - 1) as f64) as usize;
        let brute = brute_rank_metrics(&scores, &labels, k).unwrap();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), brute.auc);
        prop_assert_eq!(recall(&scores, &labels, k), brute.r_at_k);
    }

    #[test]
    fn metrics_ignore_increasing_transforms((scores, labels) in scored_labels(), c in 0.01f64..100.0) {
        prop_assume!(both_classes(&labels));
        let auc = roc_auc(&scores, &labels).unwrap();
        let k = scores.len().div_ceil(3);
        let r = recall(&scores, &labels, k);
        let scaled: Vec<f64> = scores.iter().map(|s| c * s).collect();
        let warped: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
        for t in [&scaled, &warped] {
            prop_assert_eq!(roc_auc(t, &labels).unwrap(), auc);
            prop_assert_eq!(recall(t, &labels, k), r);
            prop_assert_eq!(ranked_types(t, &labels), ranked_types(&scores, &labels));
        }
    }

    #[test]
    fn ideal_ranking_scores_one(labels in prop::collection::vec(any::<bool>(), 2..300)) {
        prop_assume!(both_classes(&labels));
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn hallucination_lookup_is_total(pred in ".{0,12}", entity in proptest::option::of(".{0,12}")) {
        let spec = EntitySwapSpec::default();
        let got = detect_hallucination(&pred, entity.as_deref(), &spec);
        if let Some(t) = got {
            let pair = spec.pair_for_source(entity.as_deref().unwrap()).unwrap();
            prop_assert_eq!(pred, pair.target.clone());
            prop_assert_eq!(t, pair.halluc_type());
        }
    }
}

#[test]
fn random_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let auc = roc_auc(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() <= 0.02, "{auc}");
}

fn spec(seed: u64) -> SynthesisSpec {
    SynthesisSpec {
        n_docs: 400,
        vocab_size: 300,
        seed,
        entity_swap: EntitySwapSpec {
            entity_doc_share: 0.3,
            substitution_probability: 0.5,
            ..EntitySwapSpec::default()
        },
        ..SynthesisSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corruption_only_swaps_one_summary_token(seed in 0u64..10_000) {
        let s = spec(seed);
        let clean = synth_corpus(&s).unwrap();
        let bad = corrupt_corpus(&clean, &s.entity_swap, seed).unwrap();
        prop_assert_eq!(clean.len(), bad.len());
        for (a, b) in clean.examples.iter().zip(&bad.examples) {
            prop_assert_eq!(&a.document, &b.document);
            prop_assert_eq!(a.summary.len(), b.summary.len());
            let diffs: Vec<(&String, &String)> =
                a.summary.iter().zip(&b.summary).filter(|(x, y)| x != y).collect();
            if b.corrupted {
                let pair = s.entity_swap.pair_for_source(a.entity.as_deref().unwrap()).unwrap();
                prop_assert_eq!(diffs, vec![(&pair.source, &pair.target)]);
            } else {
                prop_assert!(diffs.is_empty());
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed(seed in 0u64..10_000) {
        let s = spec(seed);
        let a = corrupt_corpus(&synth_corpus(&s).unwrap(), &s.entity_swap, seed).unwrap();
        let b = corrupt_corpus(&synth_corpus(&s).unwrap(), &s.entity_swap, seed).unwrap();
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
        prop_assert_eq!(a.content_hash, b.content_hash);
    }
}

fn instance(rng: &mut ChaCha8Rng, id: u64, dim: usize, k: usize) -> Instance {
    let mut idx: Vec<usize> = (0..3).map(|_| rng.random_range(0..dim)).collect();
    idx.sort_unstable();
    idx.dedup();
    Instance {
        features: idx.into_iter().map(|j| (j, rng.random_range(0.2..1.5))).collect(),
        label: Some(rng.random_range(0..k)),
        id,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loo_ignores_training_order(seed in 0u64..1000) {
        let arch = ModelArch::convex(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train: Vec<Instance> = (0..16).map(|i| instance(&mut rng, i, 6, 3)).collect();
        let test = instance(&mut rng, 99, 6, 3);
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut rng);
        let zero = init_params(&arch, InitMode::Zeros, 0).unwrap();
        let delta = |data: &[Instance]| {
            let full = fit_convex(&arch, data, &uniform_weights(data.len()), 1e-2, &zero).unwrap();
            loo_delta(&arch, data, 5, &test, 1e-2, &full).unwrap().0.delta_loss
        };
        let (a, b) = (delta(&train), delta(&shuffled));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-9), "{} vs {}", a, b);
    }

    #[test]
    fn single_checkpoint_chain_is_support(seed in 0u64..1000) {
        let arch = ModelArch::mlp(10, 4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ckpt = |s: u64, epoch: usize| Checkpoint {
            params: init_params(&arch, InitMode::SeededUniform(0.5), s).unwrap(),
            epoch,
            train_loss: 0.0,
            arch,
            config_hash: String::new(),
            optimizer: None,
        };
        let set = CheckpointSet { base: ckpt(seed, 0), epochs: vec![ckpt(seed + 1, 1)] };
        let (zt, ze) = (instance(&mut rng, 1, 10, 3), instance(&mut rng, 2, 10, 3));
        let s0 = support_at(&set.base, &zt, &ze).unwrap();
        let dn = denoise_score(&set.epochs, &zt, &ze).unwrap();
        prop_assert_eq!(debias_combine(dn, s0, &DebiasConfig { beta: 0.0 }), support_at(&set.epochs[0], &zt, &ze).unwrap());
    }
}

//! Command contract: exit codes, run directories, manifests and charts,
//! driven in-process through [`main_with`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::run::RunManifest;
use crate::{main_with, Cli};
use clap::Parser;

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.json")
}

fn dda(args: &[&str]) -> i32 {
    main_with(std::iter::once("dda").chain(args.iter().copied()))
}

fn dda_in(dir: &Path, args: &[&str]) -> i32 {
    let mut full: Vec<&str> = args.to_vec();
    let cfg = small_config();
    full.extend(["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    dda(&full)
}

fn ok(code: i32) {
    assert_eq!(code, 0);
}

fn full_pipeline(dir: &Path) {
    for stage in ["synth", "pretrain", "finetune", "contrast"] {
        ok(dda_in(dir, &[stage]));
    }
    for m in ["raw", "dda", "bm25"] {
        ok(dda_in(dir, &["attribute", "--method", m]));
        ok(dda_in(dir, &["eval", "--method", m]));
    }
    ok(dda_in(dir, &["ablate", "--format", "svg"]));
    ok(dda_in(dir, &["sweep-beta", "--format", "svg"]));
    ok(dda_in(dir, &["loo"]));
    ok(dda_in(dir, &["report", "--format", "svg", "--k", "3"]));
}

fn manifests(dir: &Path) -> Vec<RunManifest> {
    let mut v: Vec<_> = std::fs::read_dir(dir.join("manifests"))
        .unwrap()
        .map(|e| serde_json::from_slice(&std::fs::read(e.unwrap().path()).unwrap()).unwrap())
        .collect();
    v.sort_by(|a: &RunManifest, b| a.command.cmp(&b.command));
    v
}

fn produced(dir: &Path) -> BTreeMap<String, String> {
    manifests(dir).into_iter().flat_map(|m| m.outputs).collect()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dda(&["frobnicate"]), 2);
    let err = Cli::try_parse_from(["dda", "frobnicate"]).unwrap_err();
    assert!(err.render().to_string().contains("Usage"));
    assert_eq!(dda(&["attribute", "--method", "cea"]), 2);
    assert_eq!(dda(&["synth", "--config", "/nonexistent/cfg.json"]), 2);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dda_in(dir.path(), &["synth", "--workers", "0"]), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"modle": {}}"#).unwrap();
    assert_eq!(dda(&["synth", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]), 2);
    assert_eq!(dda(&["--help"]), 0);
}

#[test]
fn missing_artifacts_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dda_in(dir.path(), &["pretrain"]), 1);
}

#[test]
fn run_root_naming() {
    let root = tempfile::tempdir().unwrap();
    // the only test that leaves --out unset, so nothing else reads the variable
    std::env::set_var("DDA_RUN_ROOT", root.path());
    let cfg = small_config();
    ok(dda(&["synth", "--config", cfg.to_str().unwrap()]));
    let runs: Vec<String> = std::fs::read_dir(root.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(runs.len(), 1);
    let (secs, hash) = runs[0].split_once('-').unwrap();
    assert!(secs.parse::<u64>().is_ok());
    assert_eq!(hash.len(), 8);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(root.path().join("runs").join(&runs[0]).join("corpora/train.jsonl").is_file());
}

#[test]
fn pipeline_artifacts_manifests_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    full_pipeline(d);
    for f in ["metrics.csv", "sweep.csv", "cases.txt", "sweep.svg", "ablation.svg"] {
        assert!(d.join("report").join(f).is_file(), "missing report/{f}");
    }

    // every file on disk outside manifests/ is recorded as some command's output
    let outputs = produced(d);
    let mut stack = vec![d.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(d).unwrap().to_string_lossy().into_owned();
            if rel.starts_with("manifests") {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                assert!(outputs.contains_key(&rel), "{rel} is not in any manifest");
            }
        }
    }
    for m in manifests(d) {
        assert_eq!(m.seed, 7);
        assert!(!m.created_at.is_empty());
        assert!(m.input_hashes.keys().any(|k| k.starts_with("external:")), "{} lacks the config", m.command);
    }

    let sweep = std::fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 17);
    let svg = std::fs::read_to_string(d.join("sweep/sweep.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root().children().filter(|n| n.is_element()).count(), 1);
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("point")).count(), 16);
    let ablation = std::fs::read_to_string(d.join("ablation/ablation.csv")).unwrap();
    let types = ablation.lines().skip(1).filter(|l| l.contains(",dda,")).count();
    assert_eq!(ablation.lines().count(), 3 * types + 1);
    roxmltree::Document::parse(&std::fs::read_to_string(d.join("ablation/ablation.svg")).unwrap()).unwrap();
    let cases = std::fs::read_to_string(d.join("report/cases.txt")).unwrap();
    assert!(cases.contains("[[") && cases.contains("top-3 precision"));
    let loo = std::fs::read_to_string(d.join("loo/loo.csv")).unwrap();
    assert!(loo.starts_with("train_id,test_id,influence,predicted_delta,loo_delta\n"));

    ok(dda_in(d, &["report", "--verify"]));
    let scores = d.join("scores/dda.csv");
    let mut bytes = std::fs::read(&scores).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    std::fs::write(&scores, bytes).unwrap();
    assert_eq!(dda_in(d, &["report", "--verify"]), 1);
    let err = crate::run::verify(d).unwrap_err().to_string();
    assert!(err.contains("scores/dda.csv"), "{err}");
}

#[test]
fn same_config_same_hashes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        for stage in ["synth", "pretrain", "finetune", "contrast"] {
            ok(dda_in(d, &[stage]));
        }
        ok(dda_in(d, &["attribute", "--method", "trak", "--workers", "3"]));
    }
    assert_eq!(produced(a.path()), produced(b.path()));
}

#[test]
fn flags_override_config_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dda_in(dir.path(), &["synth", "--seed", "11", "--epochs", "2", "--beta", "0.25"]));
    let m = &manifests(dir.path())[0];
    assert_eq!(m.seed, 11);
    assert_eq!(m.config_echo["training"]["finetune"]["epochs"], 2);
    assert_eq!(m.config_echo["influence"]["debias"]["beta"], 0.25);
}

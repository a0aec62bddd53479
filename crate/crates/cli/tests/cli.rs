use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use tempfile::TempDir;

fn causaltad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causaltad"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = causaltad(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A workspace with a tiny config file.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "paths": { "data_dir": "data", "out_dir": "runs" },
        "synth": { "num_videos": 12, "val_videos": 4, "length": 64, "dim": 8, "max_actions": 2, "max_len": 16 },
        "model": { "levels": 3, "dim": 16, "heads": 2, "ssm_state": 4 },
        "train": { "epochs": 2, "batch_size": 4 },
        "eval": { "thresholds": [0.3, 0.5, 0.7] },
        "ablation": { "seeds": [0] }
    });
    std::fs::write(dir.path().join("cfg.json"), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    dir
}

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "cfg.json"][..], extra].concat()
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn help_lists_config_keys_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["--help"], vec!["train", "--help"], vec!["infer", "--help"], vec!["ablate", "--help"], vec!["eval", "--help"]] {
        let out = ok(dir.path(), &args);
        for key in ["nms.sigma", "train.epochs", "model.context", "synth.seed"] {
            assert!(out.contains(key), "{args:?} help lacks {key}");
        }
    }
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = workspace();
    let d = dir.path();
    let code = |args: &[&str]| causaltad(d, args).status.code();
    assert_eq!(code(&["--set", "train.nope=1", "synth"]), Some(2));
    assert_eq!(code(&["--set", "train.epochs=0", "synth"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["--config", "cfg.json", "infer", "--checkpoint", "missing.ckpt"]), Some(4));
    // forty actions of at least eight snippets cannot fit in sixty-four
    assert_eq!(code(&["--config", "cfg.json", "--set", "synth.min_actions=40", "--set", "synth.max_actions=40", "synth"]), Some(1));
    ok(d, &["--config", "cfg.json", "synth"]);
    let diverge = ["--config", "cfg.json", "--set", "train.base_lr=1e30", "--set", "train.clip_grad_norm=0", "--set", "train.warmup_epochs=0", "train"];
    assert_eq!(code(&diverge), Some(3));
}

#[test]
fn pipeline_is_deterministic_and_ensemble_of_one_matches_inference() {
    let dir = workspace();
    let d = dir.path();

    ok(d, &with(&["synth"]));
    let table = ok(d, &with(&["train"]));
    assert!(table.contains("epoch") && table.contains("checkpoint"));
    ok(d, &with(&["infer", "--checkpoint", "runs/checkpoint.ckpt", "--emit-raw", "runs/a.raw"]));
    let report = ok(d, &with(&["eval", "--pred", "runs/predictions_val.json", "--out", "runs/report.json"]));
    assert!(report.contains("0.50"), "{report}");

    let first = [read(d, "runs/checkpoint.ckpt"), read(d, "runs/predictions_val.json"), read(d, "runs/report.json")];
    ok(d, &with(&["train", "--out", "runs/again.ckpt"]));
    ok(d, &with(&["infer", "--checkpoint", "runs/again.ckpt", "--out", "runs/again.json"]));
    ok(d, &with(&["eval", "--pred", "runs/again.json", "--out", "runs/again_report.json"]));
    assert_eq!(first[0], read(d, "runs/again.ckpt"));
    assert_eq!(first[1], read(d, "runs/again.json"));
    assert_eq!(first[2], read(d, "runs/again_report.json"));

    ok(d, &with(&["ensemble", "runs/a.raw", "--out", "runs/ens1.json"]));
    assert_eq!(first[1], read(d, "runs/ens1.json"));

    // a second model, then the pair in both orders
    ok(d, &with(&["--set", "train.seed=5", "train", "--out", "runs/b.ckpt"]));
    ok(d, &with(&["infer", "--checkpoint", "runs/b.ckpt", "--emit-raw", "runs/b.raw", "--out", "runs/b.json"]));
    ok(d, &with(&["ensemble", "runs/a.raw", "runs/b.raw", "--out", "runs/ab.json"]));
    ok(d, &with(&["ensemble", "runs/b.raw", "runs/a.raw", "--out", "runs/ba.json"]));
    assert_eq!(read(d, "runs/ab.json"), read(d, "runs/ba.json"));
    assert_ne!(read(d, "runs/ab.json"), first[1]);

    // nouns and verbs from the same model compose into actions
    ok(d, &with(&["ensemble", "runs/a.raw", "--verbs", "runs/b.raw", "--out", "runs/actions.json"]));
    let actions: serde_json::Value = serde_json::from_slice(&read(d, "runs/actions.json")).unwrap();
    let videos = actions["results"].as_object().unwrap();
    assert_eq!(videos.len(), 4);
    // labels index the noun × verb product
    assert!(videos.values().flat_map(|v| v.as_array().unwrap()).all(|p| p["label_id"].as_u64().unwrap() < 25));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    for c in ["identity", "primitives", "attention", "scan", "block", "model"] {
        assert!(out.contains(c), "{out}");
    }
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn ablation_report_covers_every_variant_once() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "--set", "train.epochs=1", "ablate", "--out", "ablation.json"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "ablation.json")).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    let mut labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), 9);
    assert!(rows.iter().all(|r| r["per_seed"].as_array().unwrap().len() == 1));
}

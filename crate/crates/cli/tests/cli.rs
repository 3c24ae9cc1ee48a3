use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ctxtag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxtag"))
        .current_dir(dir)
        .env_remove("CTXTAG_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ctxtag(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns the error kind from stderr.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = ctxtag(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: Value = serde_json::from_str(line).unwrap();
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    v["kind"].as_str().unwrap().to_owned()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen", "--size", "120", "--seed", "4", "--out", "c.jsonl", "--trees-out", "t.jsonl", "--gold-out", "g.jsonl"]);
    assert_eq!(lines(&d.join("c.jsonl")), 120);
    assert_eq!(lines(&d.join("g.jsonl")), 120);

    let stats: Value = serde_json::from_str(&ok(
        d,
        &["annotate", "--corpus", "c.jsonl", "--trees", "t.jsonl", "--out", "a.jsonl"],
    ))
    .unwrap();
    assert!(stats["coverage"].as_f64().unwrap() >= 0.95);

    ok(d, &["build-rules", "--annotations", "a.jsonl", "--vocab-out", "v.json", "--tags-out", "tags.jsonl"]);
    let vocab: Value = serde_json::from_str(&fs::read_to_string(d.join("v.json")).unwrap()).unwrap();
    assert_eq!(vocab["rules"][0]["elements"], serde_json::json!([]));

    let sweep = ok(d, &["sweep-threshold", "--annotations", "a.jsonl"]);
    let sizes: Vec<u64> = sweep
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["rules"].as_u64().unwrap())
        .collect();
    assert_eq!(sizes.len(), 4);
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));

    let summary = ok(
        d,
        &[
            "train", "--corpus", "c.jsonl", "--tags", "tags.jsonl", "--vocab", "v.json", "--checkpoint-out", "m.ckpt",
            "--metrics-out", "metrics.csv", "--max-epochs", "2", "--min-epochs", "1", "--d", "8", "--ffn", "8",
            "--depth", "1",
        ],
    );
    let summary: Value = serde_json::from_str(&summary).unwrap();
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);
    let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,train_loss,dev_bleu4,dev_em,lr,seconds");
    assert_eq!(metrics.lines().count(), 3);

    ok(d, &["predict", "--corpus", "c.jsonl", "--checkpoint", "m.ckpt", "--vocab", "v.json", "--out", "p.jsonl"]);
    assert_eq!(lines(&d.join("p.jsonl")), 120);
    let table = ok(
        d,
        &["evaluate", "--predictions", "p.jsonl", "--corpus", "c.jsonl", "--report-out", "r.json", "--per-example-out", "s.jsonl"],
    );
    let names: Vec<&str> = table.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["BLEU-1", "BLEU-2", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "EM"]);
    assert_eq!(lines(&d.join("s.jsonl")), 120);

    // Checkpoint needs its own vocabulary.
    assert_eq!(
        fails(d, &["predict", "--corpus", "c.jsonl", "--checkpoint", "m.ckpt", "--out", "x.jsonl"]),
        "config"
    );
    ok(d, &["build-rules", "--annotations", "a.jsonl", "--rule-threshold", "0.9", "--vocab-out", "v2.json", "--tags-out", "t2.jsonl"]);
    assert_eq!(
        fails(d, &["predict", "--corpus", "c.jsonl", "--checkpoint", "m.ckpt", "--vocab", "v2.json", "--out", "x.jsonl"]),
        "vocab_mismatch"
    );
    assert!(!d.join("x.jsonl").exists());

    // Evaluating against a corpus with ids the predictions lack.
    fs::write(d.join("few.jsonl"), fs::read_to_string(d.join("p.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(
        fails(d, &["evaluate", "--predictions", "few.jsonl", "--corpus", "c.jsonl"]),
        "missing_predictions"
    );
}

#[test]
fn errors_are_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(fails(d, &["annotate", "--corpus", "missing.jsonl", "--out", "a.jsonl"]), "io");
    assert_eq!(fails(d, &["train", "--corpus", "c.jsonl"]), "usage");
    assert_eq!(fails(d, &["nonsense"]), "usage");
    fs::write(d.join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    assert_eq!(fails(d, &["annotate", "--corpus", "bad.jsonl", "--out", "a.jsonl"]), "json");
    let out = ctxtag(d, &["annotate", "--corpus", "missing.jsonl", "--out", "a.jsonl"]);
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn config_file_env_and_flags_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.conf"), "# synthetic run\nsize = 6\nseed = 3\nlambda = 0.2\n").unwrap();
    ok(d, &["gen", "--config", "run.conf", "--out", "a.jsonl"]);
    assert_eq!(lines(&d.join("a.jsonl")), 6);
    ok(d, &["gen", "--config", "run.conf", "--size", "8", "--out", "b.jsonl"]);
    assert_eq!(lines(&d.join("b.jsonl")), 8);
    ok(d, &["gen", "--size", "6", "--seed", "3", "--out", "c.jsonl"]);
    assert_eq!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("c.jsonl")).unwrap());

    let with_env = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_ctxtag"))
            .current_dir(d)
            .env("CTXTAG_SEED", "3")
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success());
    };
    with_env(&["gen", "--size", "6", "--out", "e.jsonl"]);
    assert_eq!(fs::read(d.join("e.jsonl")).unwrap(), fs::read(d.join("c.jsonl")).unwrap());
    with_env(&["gen", "--size", "6", "--seed", "0", "--out", "f.jsonl"]);
    assert_ne!(fs::read(d.join("f.jsonl")).unwrap(), fs::read(d.join("c.jsonl")).unwrap());

    fs::write(d.join("broken.conf"), "size 6\n").unwrap();
    assert_eq!(fails(d, &["gen", "--config", "broken.conf", "--out", "g.jsonl"]), "config");
}

#[test]
fn generation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for name in ["x.jsonl", "y.jsonl"] {
        ok(d, &["gen", "--size", "50", "--seed", "11", "--out", name]);
    }
    assert_eq!(fs::read(d.join("x.jsonl")).unwrap(), fs::read(d.join("y.jsonl")).unwrap());
}

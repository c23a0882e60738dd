//! The `told` binary end to end: exit codes, file outputs and score reports.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::TINY_PIPELINE;
use told::metrics::rttm_parse_all;

fn told(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_told"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn told")
}

fn code(args: &[&str]) -> i32 {
    told(args).status.code().expect("exit code")
}

fn with_tiny<'a>(args: Vec<&'a str>) -> Vec<&'a str> {
    let mut args = args;
    for s in TINY_PIPELINE {
        args.extend(["--set", s]);
    }
    args
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["infer", "--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["simulate", "--out", "/tmp/x"]), 1, "missing --n");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&["simulate", "--out", path(&out), "--n", "1", "--set", "no_equals_sign"]), 1);
    assert_eq!(code(&["simulate", "--out", path(&out), "--n", "1", "--set", "sim.nonexistent=3"]), 1);
    assert_eq!(code(&["simulate", "--out", path(&out), "--n", "1", "--set", "sim.duration=-1"]), 1);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&["infer", "--stage1", path(&missing), "--features", "x.feat"]), 2);
    assert_eq!(code(&["avg-ckpt", "--out", path(&out), path(&missing)]), 2);
}

#[test]
fn simulate_writes_the_requested_number_of_mixtures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = told(&with_tiny(vec!["simulate", "--out", path(&out), "--n", "50", "--seed", "3"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 50);
    for row in &rows {
        for key in ["features", "rttm", "labels"] {
            assert!(out.join(row[key].as_str().unwrap()).is_file());
        }
        let n = row["n_speakers"].as_u64().unwrap();
        assert!((1..=3).contains(&n));
    }
}

#[test]
fn score_prints_one_json_line_per_recording_plus_total() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.rttm");
    let hyp = dir.path().join("hyp.rttm");
    std::fs::write(
        &reference,
        "SPEAKER a 1 0.000 10.000 <NA> <NA> A <NA> <NA>\nSPEAKER b 1 0.000 4.000 <NA> <NA> B <NA> <NA>\n",
    )
    .unwrap();
    // Recording a: 2 s of missed speech out of 10; b: a perfect relabeled match.
    std::fs::write(
        &hyp,
        "SPEAKER a 1 0.000 8.000 <NA> <NA> x <NA> <NA>\nSPEAKER b 1 0.000 4.000 <NA> <NA> y <NA> <NA>\n",
    )
    .unwrap();
    let o = told(&["score", "--ref", path(&reference), "--hyp", path(&hyp), "--collar", "0"]);
    assert!(o.status.success());
    let rows: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ids: Vec<&str> = rows.iter().map(|r| r["recording_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b", "ALL"]);
    let der = |i: usize| rows[i]["der"].as_f64().unwrap();
    assert!((der(0) - 0.2).abs() < 1e-9);
    assert_eq!(der(1), 0.0);
    assert!((der(2) - 2.0 / 14.0).abs() < 1e-9);
}

#[test]
fn infer_on_a_feature_file_writes_rttm_next_to_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sim");
    let ckpt = dir.path().join("stage1.ckpt");
    assert_eq!(code(&with_tiny(vec!["simulate", "--out", path(&data), "--n", "3"])), 0);
    assert_eq!(
        code(&with_tiny(vec!["train-stage1", "--data", path(&data), "--out", path(&ckpt)])),
        0
    );
    let feat = dir.path().join("meeting.feat");
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    std::fs::copy(data.join(first["features"].as_str().unwrap()), &feat).unwrap();
    let o = told(&["infer", "--stage1", path(&ckpt), "--features", path(&feat)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("meeting.rttm")).unwrap();
    for list in rttm_parse_all(&text).unwrap() {
        assert_eq!(list.recording_id, "meeting");
    }
}

//! The `facesolve` binary end to end on a tiny project.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 3,
  "data": {"facs_frames_per_channel": 3, "rom_frames": 200},
  "train": {"epochs": 2},
  "demo_shot": {"frames": 60, "neutral_frame": 30},
  "finetune": {"channels": ["lipPuckererL", "lipPuckererR"], "frames": [10, 40]},
  "ablate": {
    "salient": {"samples": 200, "heldout_frames": 30},
    "anchor": {"frames": 60, "anchor_frame": 30},
    "roundtrip": {"frames": 20, "finetune_iters": 10}
  }
}"#;

fn facesolve(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facesolve"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = facesolve(dir, args);
    assert!(
        out.status.success(),
        "facesolve {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("demo.json"), TINY).unwrap();
    dir
}

/// Every file under `root` except the log, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "facesolve.log" {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

const PIPELINE: &[&[&str]] = &[
    &["gen-rig"],
    &["gen-data"],
    &["select"],
    &["train"],
    &["solve", "--anchor", "30:anchor.json"],
    &["finetune"],
    &["eval"],
    &["ablate", "--experiment", "all", "--sigmas", "0.3,0.5"],
];

fn run_pipeline(dir: &Path, out: &str, threads: &str) {
    std::fs::write(dir.join("anchor.json"), r#"{"jawOpen": 0.0}"#).unwrap();
    for args in PIPELINE {
        let mut full = vec!["--config", "demo.json", "--out", out];
        full.extend_from_slice(args);
        let status = Command::new(env!("CARGO_BIN_EXE_facesolve"))
            .current_dir(dir)
            .env("FACESOLVE_THREADS", threads)
            .args(&full)
            .output()
            .unwrap();
        assert!(status.status.success(), "{full:?}: {}", String::from_utf8_lossy(&status.stderr));
    }
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let dir = project();
    run_pipeline(dir.path(), "a", "1");
    run_pipeline(dir.path(), "b", "4");
    let a = snapshot(&dir.path().join("a"));
    let b = snapshot(&dir.path().join("b"));
    assert!(a.len() > 40, "{} artifacts", a.len());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs", path.display());
    }
    let log = std::fs::read_to_string(dir.path().join("a/facesolve.log")).unwrap();
    assert_eq!(log.lines().count(), PIPELINE.len());
}

#[test]
fn inputs_are_not_modified() {
    let dir = project();
    ok(dir.path(), &["--config", "demo.json", "gen-data"]);
    ok(dir.path(), &["--config", "demo.json", "train", "--region", "jaw"]);
    let before = snapshot(&dir.path().join("out/data"));
    let config = std::fs::read(dir.path().join("demo.json")).unwrap();
    ok(dir.path(), &["--config", "demo.json", "select"]);
    ok(dir.path(), &["--config", "demo.json", "train", "--region", "jaw"]);
    assert_eq!(before, snapshot(&dir.path().join("out/data")));
    assert_eq!(config, std::fs::read(dir.path().join("demo.json")).unwrap());
}

#[test]
fn train_one_region_writes_its_model_and_history() {
    let dir = project();
    ok(dir.path(), &["--config", "demo.json", "gen-data"]);
    let stdout = ok(dir.path(), &["--config", "demo.json", "train", "--region", "jaw"]);
    assert!(stdout.starts_with("jaw:"));
    let models = dir.path().join("out/models");
    let names: Vec<String> = std::fs::read_dir(&models)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let mut names = names;
    names.sort();
    assert_eq!(names, ["jaw.json", "jaw_history.csv", "jaw_plan.json"]);
    let history = std::fs::read_to_string(models.join("jaw_history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_mse,val_mse\n"));
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn solve_applies_anchors_in_flag_order() {
    let dir = project();
    ok(dir.path(), &["--config", "demo.json", "gen-data"]);
    ok(dir.path(), &["--config", "demo.json", "train"]);
    let plain = ok(dir.path(), &["--config", "demo.json", "solve"]);
    assert!(plain.contains("0 anchor(s)"));
    assert!(!dir.path().join("out/solve/rmse_aligned.csv").exists());
    let anchored = ok(
        dir.path(),
        &["--config", "demo.json", "solve", "--anchor", "30:out/data/anchor30.json"],
    );
    assert!(anchored.contains("1 anchor(s)"));
    let report = std::fs::read_to_string(dir.path().join("out/solve/report.json")).unwrap();
    let report = facesolve_core::pipeline::SolveReport::from_json(&report).unwrap();
    assert!(report.aligned.is_some());
    let aligned = std::fs::read_to_string(dir.path().join("out/solve/rmse_aligned.csv")).unwrap();
    assert!(aligned.starts_with("frame,value\n"));
}

#[test]
fn salient_sweep_reports_each_sigma_and_the_full_set() {
    let dir = project();
    ok(dir.path(), &["--config", "demo.json", "ablate", "--experiment", "salient", "--sigmas", "0.1,0.3,0.5"]);
    let csv = std::fs::read_to_string(dir.path().join("out/ablate/salient.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["sigma=0.1", "sigma=0.3", "sigma=0.5", "full"]);
    assert!(csv.starts_with("label,sigma,samples,fraction,heldout_rmse\n"));
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let dir = project();
    let out = facesolve(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = project();
    let cases = [
        (r#"{"regions": {"jawz": {}}}"#, "regions.jawz"),
        (r#"{"train": {"epoch": 3}}"#, "train.epoch"),
        (r#"{"selection": {"sigma": 1.5}}"#, "selection.sigma"),
        (r#"{"rig": "missing.json"}"#, "`rig`"),
        (r#"{"demo_shot": {"frames": 10, "neutral_frame": 10}}"#, "demo_shot.neutral_frame"),
    ];
    for (config, key) in cases {
        std::fs::write(dir.path().join("bad.json"), config).unwrap();
        let out = facesolve(dir.path(), &["--config", "bad.json", "gen-rig"]);
        assert!(!out.status.success(), "{config}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{config}: {err}");
    }
    let out = facesolve(dir.path(), &["--config", "demo.json", "train", "--region", "nose"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`region`"));
    let out = facesolve(dir.path(), &["--config", "demo.json", "solve", "--anchor", "55"]);
    assert!(!out.status.success());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = project();
    ok(dir.path(), &["--config", "demo.json", "--out", "s3", "gen-data"]);
    ok(dir.path(), &["--config", "demo.json", "--out", "s4", "--seed", "4", "gen-data"]);
    let a = std::fs::read(dir.path().join("s3/data/rom.json")).unwrap();
    let b = std::fs::read(dir.path().join("s4/data/rom.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn paths_in_a_config_resolve_against_its_directory() {
    let dir = project();
    let nested = dir.path().join("proj");
    std::fs::create_dir(&nested).unwrap();
    std::fs::write(nested.join("demo.json"), TINY).unwrap();
    ok(dir.path(), &["--config", "proj/demo.json", "gen-rig"]);
    assert!(nested.join("out/rig.json").exists());
}

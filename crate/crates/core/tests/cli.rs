use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lanefuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanefuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small run: few scenes, few epochs.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{
  "seed": 3,
  "dataset": {"train_scenes": 4, "eval_scenes": 3},
  "train": {"epochs": 3, "escop": {"ramp_start": 1, "ramp_end": 2}}
}"#,
    )
    .unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_both_splits_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = lanefuse(&["generate", "--config", cfg, "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("4 train + 3 eval"), "{}", stdout(&o));
    }
    let a = dir.path().join("a");
    assert!(a.join("config.json").exists());
    assert!(a.join("train/scene_0003/frame_04.lanes.json").exists());
    assert!(a.join("eval/scene_0002/features.json").exists());
    assert!(!a.join("eval/scene_0003").exists());
    for f in ["train/scene_0001/frame_02.lanes.json", "eval/scene_0000/features.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let o = lanefuse(&["train", "--config", cfg, "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let hash = json(&run.join("train_report.json"))["config_hash"].as_str().unwrap().to_owned();
    assert_eq!(hash.len(), 16);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");

    let o = lanefuse(&["eval", "--config", cfg, "--out", "run", "--checkpoint", "run/checkpoint.bin"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("F1"));
    let report = json(&run.join("eval_report.json"));
    assert_eq!(report["config_hash"].as_str().unwrap(), hash);
    let table = fs::read_to_string(run.join("eval_metrics.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "scene_id,TP,FP,FN,precision,recall,F1,Acc,jitter");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("all,"));

    // Scenes read back from disk score exactly like regenerated ones.
    let o = lanefuse(&["generate", "--config", cfg, "--out", "data"], dir.path());
    assert!(o.status.success());
    let o = lanefuse(
        &["eval", "--config", cfg, "--out", "disk", "--checkpoint", "run/checkpoint.bin", "--scenes", "data/eval"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("disk/eval_metrics.csv")).unwrap(), table);
}

#[test]
fn ground_truth_as_predictions_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(lanefuse(&["generate", "--config", cfg, "--out", "data"], dir.path()).status.success());
    let o = lanefuse(
        &["eval", "--config", cfg, "--out", "gt", "--predictions", "data/eval", "--scenes", "data/eval"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let overall = &json(&dir.path().join("gt/eval_report.json"))["overall"];
    assert_eq!(overall["report"]["f1"].as_f64().unwrap(), 1.0);
    assert_eq!(overall["report"]["accuracy"].as_f64().unwrap(), 1.0);
    // Lanes are piecewise linear between stations, so carrying a curved lane
    // into the next frame leaves a small interpolation residue.
    assert!(overall["jitter"].as_f64().unwrap() < 1e-2);
}

#[test]
fn eval_needs_a_prediction_source() {
    let dir = tempfile::tempdir().unwrap();
    let o = lanefuse(&["eval", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = lanefuse(
        &["gradcheck", "--config", cfg.to_str().unwrap(), "--seed", "9", "--threshold", "2.5", "--out", "g"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let written = json(&dir.path().join("g/config.json"));
    assert_eq!(written["seed"], 9);
    assert_eq!(written["eval"]["threshold"], 2.5);
    assert_eq!(written["dataset"]["train_scenes"], 4);
    assert_eq!(written["eval"]["coverage"], 0.75);
}

#[test]
fn gradcheck_reports_and_fails_on_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let o = lanefuse(&["gradcheck", "--out", "ok"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("worst:"));
    assert_eq!(json(&dir.path().join("ok/gradcheck.json"))["passed"], true);

    let o = lanefuse(&["gradcheck", "--out", "bad", "--corrupt", "dice"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("worst: dice"), "{}", stdout(&o));
}

#[test]
fn invalid_configuration_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"anchors": {"stations": [10.0, 5.0]}, "loss": {"focal": {"gamma": 1.0}}}"#).unwrap();
    let o = lanefuse(&["generate", "--config", path.to_str().unwrap(), "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("anchors.stations"), "{}", stderr(&o));

    let o = lanefuse(&["train", "--coverage", "1.5", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("coverage"), "{}", stderr(&o));
}

#[test]
fn ablate_emits_the_five_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = lanefuse(&["ablate", "--config", cfg.to_str().unwrap(), "--out", "ab"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "+balanced_l1", "+chamfer", "+uncertainty", "+lstm_fusion"]);
    let doc = json(&dir.path().join("ab/ablation.json"));
    assert_eq!(doc["rows"].as_array().unwrap().len(), 5);
    assert!(doc["nesting"].as_str().unwrap().contains("nested"));
    assert!(stdout(&o).contains("+lstm_fusion"));
}

use std::path::Path;
use std::process::{Command, Output};

use mammo_core::modelkit::{Activation, LayerSpec, ModelSpec};
use mammo_core::report::RunReport;

fn mammo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mammo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("MAMMO_RUN_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mammo(args, cwd);
    assert!(
        out.status.success(),
        "mammo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    mammo(args, cwd).status.code().unwrap()
}

/// Pools the patch to 8×8 so training takes well under a second.
fn small_spec() -> ModelSpec {
    ModelSpec {
        name: "small".into(),
        input_shape: (256, 256, 1),
        layers: vec![
            LayerSpec::maxpool(32),
            LayerSpec::conv(4, 3, Activation::Relu),
            LayerSpec::Flatten,
            LayerSpec::dense(8, Activation::Relu),
            LayerSpec::dense(1, Activation::Sigmoid),
        ],
        backbone: None,
        pretrained: false,
    }
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["synthgen", "--out", "data", "--counts", "12,12,24", "--seed", "5"], d);
    assert!(out.contains("wrote 48 patches"));
    assert!(d.join("data/manifest.csv").exists());

    let json = ok(&["ingest", "--manifest", "data/manifest.csv", "--json"], d);
    assert!(json.contains("cells"));

    let out = ok(&["split", "--manifest", "data/manifest.csv", "--seed", "1", "--out", "split.csv"], d);
    assert!(out.contains("train: "), "{out}");
    let hash_line = out.lines().find(|l| l.starts_with("split hash")).unwrap().to_string();
    let again = ok(&["split", "--manifest", "data/manifest.csv", "--seed", "1", "--out", "split2.csv"], d);
    assert!(again.contains(&hash_line));

    std::fs::write(d.join("spec.json"), small_spec().to_json()).unwrap();
    let data = ["--manifest", "data/manifest.csv", "--split", "split.csv"];
    let mut args = vec!["train", "--spec", "spec.json", "--epochs", "2", "--batch-size", "8"];
    args.extend(["--learning-rate", "0.01", "--out", "m.ckpt", "--history", "h.csv"]);
    args.extend(data);
    let out = ok(&args, d);
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    assert_eq!(std::fs::read_to_string(d.join("h.csv")).unwrap().lines().count(), 3);

    let mut args = vec!["eval", "--model", "m.ckpt", "--scores", "scores.csv"];
    args.extend(data);
    let out = ok(&args, d);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["records"].as_u64().unwrap() > 0);

    // The validation and test sets may be too small for both classes; score train instead.
    let mut args = vec!["eval", "--model", "m.ckpt", "--subset", "train", "--scores", "train.csv"];
    args.extend(data);
    ok(&args, d);
    let out = ok(&["threshold", "--scores", "train.csv", "--roc", "roc.csv"], d);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["summary"]["auc"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["radiologists"].as_array().unwrap().len(), 3);
    assert!(d.join("roc.csv").exists());
    let literal = ok(&["threshold", "--scores", "train.csv", "--literal-paper-objective"], d);
    assert!(literal.contains("literal_paper"));
}

#[test]
fn run_writes_artifacts_and_report_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = serde_json::json!({
        "name": "cli",
        "dataset": {"source": "synthgen", "total": 40, "seed": 2},
        "split": {"train": 0.6, "validation": 0.2, "test": 0.2, "seed": 4},
        "models": [
            {"name": "small", "architecture": {"kind": "spec", "spec": small_spec()},
             "train": {"epochs": 1, "batch_size": 8, "learning_rate": 0.01}},
            {"name": "broken", "architecture": {"kind": "transfer", "backbone": "vgg16-desk", "pretrained": true}},
        ],
    });
    std::fs::write(d.join("exp.json"), config.to_string()).unwrap();
    let out = mammo(&["run", "--config", "exp.json", "--run-root", "runs", "--format", "json"], d);
    // The pretrained row has no weights registered, so the run reports a failure.
    assert_eq!(out.status.code(), Some(2));
    let report = RunReport::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].config_error);

    let run_dir = std::fs::read_dir(d.join("runs")).unwrap().next().unwrap().unwrap().path();
    let name = run_dir.file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.ends_with(&report.config_hash[..12]));
    assert!(run_dir.join(&report.rows[0].roc_artifact).exists());
    assert!(run_dir.join("models/small/history.csv").exists());

    let run = run_dir.to_str().unwrap();
    let text = ok(&["report", "--run", run], d);
    assert!(text.contains("Size of Batch"));
    assert!(text.contains(&report.split_hash));
    let csv = ok(&["report", "--run", run, "--format", "csv"], d);
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(code(&["report", "--run", run, "--format", "yaml"], d), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["--help"], d), 0);
    assert_eq!(code(&["no-such-command"], d), 1);
    assert_eq!(code(&["synthgen", "--out", "x"], d), 1);
    assert_eq!(code(&["ingest", "--manifest", "missing.csv"], d), 2);
    std::fs::write(d.join("empty.json"), r#"{"dataset": {"source": "synthgen", "total": 10, "seed": 0}, "models": []}"#)
        .unwrap();
    assert_eq!(code(&["run", "--config", "empty.json", "--run-root", "r"], d), 1);
    std::fs::write(d.join("bad.json"), "{").unwrap();
    assert_eq!(code(&["arch", "--spec", "bad.json"], d), 1);
    assert_eq!(code(&["arch", "--arch", "nope"], d), 1);
}

#[test]
fn arch_prints_baseline_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["arch"], dir.path());
    assert!(out.contains("Total params: 32532929"), "{out}");
    assert!(out.contains("(126, 126, 64)"));
}

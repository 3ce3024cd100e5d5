use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gramclust"))
}

const TINY: &str = r#"{
  "dataset": {"synth": {"n_train": 120, "n_val": 60, "n_test": 60, "image_size": 6, "majority_frac": 0.8, "seed": 2}},
  "robust": {"sgd": {"lr": 0.05, "batch_size": 32, "epochs": 2}},
  "grid": {"lrs": [0.05], "l2s": [0.0001, 0.01]}
}"#;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> std::process::Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"layer_ids": [7]}"#).unwrap();
    let out = run(&["discover"], &cfg, &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(run(&["grid"], &cfg, &dir.path().join("run")).status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["pipeline", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["eval", "--checkpoint", "/nonexistent/ckpt"], &cfg, &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stages_run_one_after_another() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    for args in [&["synth"][..], &["discover"], &["train", "--method", "group-dro"], &["eval"]] {
        let o = run(args, &cfg, &out);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "manifest.json",
        "datasets/images.grtn",
        "datasets/labels.csv",
        "clustering/train_pseudo.csv",
        "features/style_layout.json",
        "checkpoints/id_model/manifest.json",
        "checkpoints/robust/manifest.json",
        "reports/train.json",
        "reports/train_epochs.csv",
        "reports/eval.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["schema_version"], 1);
    assert_eq!(eval["test"]["group_labels"], "true");
}

#[test]
fn sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["sweep-k", "--ks", "1,2"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("reports/sweep_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let o = run(&["sweep-layers", "1", "3", "1,2,3"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/sweep_layers.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    let o = run(&["sweep-layers", "1,2", "2,1"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin()
            .args(["pipeline", "--seed", "9", "--threads", "1", "--quiet", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["reports/pipeline.json", "reports/grid.json", "reports/grid.csv", "reports/discovery.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

use super::*;
use crate::nets::SgdmConfig;

fn tiny() -> PipelineConfig {
    PipelineConfig {
        dataset: DatasetSource::Synth(SynthConfig {
            n_train: 120,
            n_val: 60,
            n_test: 60,
            image_size: 6,
            majority_frac: 0.8,
            seed: 1,
            ..Default::default()
        }),
        robust: RobustConfig {
            sgd: SgdmConfig {
                lr: 0.05,
                batch_size: 32,
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        },
        grid: GridConfig {
            lrs: vec![0.05],
            l2s: vec![1e-4],
        },
        seed: 5,
        ..Default::default()
    }
}

fn cell(l2: f64, lr: f64, worst: f64, avg: f64, diverged: bool) -> RobustReport {
    let m = Some(Metrics {
        worst_group: worst,
        average: avg,
    });
    RobustReport {
        schema_version: 1,
        method: Method::GroupDro,
        train_groups: None,
        l2,
        lr,
        diverged,
        val_true_groups: m,
        val_pseudo_groups: m,
        test: None,
        train: TrainReport {
            schema_version: 1,
            method: "group_dro".into(),
            config: SgdmConfig::default(),
            epochs: Vec::new(),
            diverged,
            final_q: None,
            checkpoint: None,
        },
    }
}

#[test]
fn selection_tie_chain() {
    let cells = vec![
        cell(1e-2, 1e-4, 0.8, 0.9, false),
        cell(1e-4, 1e-4, 0.8, 0.9, false),
        cell(1e-4, 5e-5, 0.8, 0.9, false),
        cell(1.0, 1e-4, 0.95, 0.95, true),
        cell(1e-1, 1e-5, 0.7, 0.99, false),
    ];
    assert_eq!(select(&cells, GroupSource::True).unwrap(), 2);
    let cells = vec![cell(1e-4, 1e-4, 0.8, 0.85, false), cell(1e-2, 1e-4, 0.8, 0.9, false)];
    assert_eq!(select(&cells, GroupSource::Pseudo).unwrap(), 1);
}

#[test]
fn all_diverged_grid_is_an_error() {
    let cells = vec![cell(1.0, 1.0, f64::NAN, 0.0, true)];
    assert!(matches!(select(&cells, GroupSource::True), Err(Error::AllDiverged)));
}

#[test]
fn config_validation() {
    assert!(PipelineConfig::default().validate().is_ok());
    let bad = PipelineConfig { layer_ids: vec![4], ..Default::default() };
    assert!(bad.validate().unwrap_err().is_config());
    let bad = PipelineConfig { layer_ids: vec![2, 2], ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = PipelineConfig { k: 0, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = PipelineConfig { style: StyleKind::Penultimate, layer_ids: vec![1], ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn config_json_round_trip() {
    let cfg = tiny();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    let partial: PipelineConfig = serde_json::from_str(r#"{"k": 4, "projection": {"explicit": 32}}"#).unwrap();
    assert_eq!(partial.k, 4);
    assert_eq!(partial.projection, ProjectionMode::Explicit(32));
}

#[test]
fn group_dro_without_pseudo_labels_fails() {
    let cfg = tiny();
    let splits = load_data(&cfg).unwrap();
    let sgd = cfg.robust_sgd(1e-4, 0.05);
    assert!(run_robust(&cfg, &splits, sgd).is_err());
    let erm = PipelineConfig {
        robust: RobustConfig { method: Method::Erm, ..cfg.robust.clone() },
        ..cfg.clone()
    };
    let (_, r) = run_robust(&erm, &splits, sgd).unwrap();
    assert_eq!(r.train_groups, None);
    assert_eq!(r.test.unwrap().group_labels, "true");
}

#[test]
fn discovery_is_deterministic_and_writes_artifacts() {
    let cfg = tiny();
    let splits = load_data(&cfg).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = run_discovery(&cfg, &splits, Some(a.path())).unwrap();
    let db = run_discovery(&cfg, &splits, Some(b.path())).unwrap();
    assert_eq!(da.report, db.report);
    for f in ["clustering/train_pseudo.csv", "clustering/val_pseudo.csv", "reports/discovery.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let back = load_pseudo_labels(a.path(), &splits).unwrap();
    assert_eq!(back.train.pseudo_envs, da.splits.train.pseudo_envs);
    assert_eq!(back.val.pseudo_envs, da.splits.val.pseudo_envs);
    assert!(a.path().join("features/projection.json").exists());
}

#[test]
fn pipeline_grid_of_one_returns_that_run() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.grid.cells.len(), 1);
    assert_eq!(report.grid.best, 0);
    assert_eq!(report.selected, report.grid.cells[0]);
    assert!(dir.path().join("reports/pipeline.json").exists());
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("datasets/images.grtn").exists());
}

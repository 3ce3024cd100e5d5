//! Cluster-count and layer-choice sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    cluster_features, compute_features, ensure_dir, load_data, run_robust, train_id_model, validate_layers,
    write_report, PipelineConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSweepRow {
    pub k: usize,
    pub val_matching_accuracy: Option<f64>,
    pub val_worst_group: Option<f64>,
    pub val_pseudo_worst_group: Option<f64>,
    pub test_worst_group: Option<f64>,
    pub test_average: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub layer_ids: Vec<usize>,
    pub val_matching_accuracy: Option<f64>,
    pub train_matching_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct Table<'a, T> {
    schema_version: u32,
    rows: &'a [T],
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn write_table<T: Serialize>(dir: &Path, name: &str, rows: &[T], csv: String) -> Result<()> {
    write_report(
        dir,
        name,
        &Table {
            schema_version: crate::SCHEMA_VERSION,
            rows,
        },
    )?;
    let path = ensure_dir(&dir.join("reports"))?.join(format!("{name}.csv"));
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// One discovery and one robust training run per cluster count. The
/// identification model and style features are shared across entries; a
/// failing entry is recorded and the sweep moves on.
pub fn sweep_clusters(cfg: &PipelineConfig, ks: &[usize], out: Option<&Path>) -> Result<Vec<ClusterSweepRow>> {
    if ks.is_empty() {
        return Err(Error::Config("cluster sweep needs at least one k".into()));
    }
    cfg.validate()?;
    let splits = load_data(cfg)?;
    let net = train_id_model(cfg, &splits.train)?;
    let features = compute_features(cfg, &net, &splits, cfg.style, &cfg.layer_ids)?;
    let sgd = cfg.robust_sgd(cfg.robust.sgd.l2, cfg.robust.sgd.lr);
    let rows: Vec<ClusterSweepRow> = ks
        .iter()
        .map(|&k| {
            let run = || -> Result<ClusterSweepRow> {
                let d = cluster_features(cfg, &features, &splits, k)?;
                let (_, r) = run_robust(cfg, &d.splits, sgd)?;
                Ok(ClusterSweepRow {
                    k,
                    val_matching_accuracy: d.report.val_matching_accuracy,
                    val_worst_group: r.val_true_groups.map(|m| m.worst_group),
                    val_pseudo_worst_group: r.val_pseudo_groups.map(|m| m.worst_group),
                    test_worst_group: r.test.as_ref().map(|t| t.worst_group),
                    test_average: r.test.as_ref().map(|t| t.average),
                    error: r.diverged.then(|| "training diverged".to_string()),
                })
            };
            run().unwrap_or_else(|e| {
                log::warn!("k={k}: {e}");
                ClusterSweepRow {
                    k,
                    val_matching_accuracy: None,
                    val_worst_group: None,
                    val_pseudo_worst_group: None,
                    test_worst_group: None,
                    test_average: None,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    if let Some(dir) = out {
        let mut csv = String::from("k,val_matching_accuracy,val_worst_group,val_pseudo_worst_group,test_worst_group,test_average,error\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k,
                opt(r.val_matching_accuracy),
                opt(r.val_worst_group),
                opt(r.val_pseudo_worst_group),
                opt(r.test_worst_group),
                opt(r.test_average),
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        write_table(dir, "sweep_k", &rows, csv)?;
    }
    Ok(rows)
}

/// Validation matching accuracy of `cfg.k`-means clustering for each layer set,
/// all computed from one identification model.
pub fn sweep_layers(cfg: &PipelineConfig, layer_sets: &[Vec<usize>], out: Option<&Path>) -> Result<Vec<LayerSweepRow>> {
    if layer_sets.is_empty() {
        return Err(Error::Config("layer sweep needs at least one layer set".into()));
    }
    for set in layer_sets {
        validate_layers(set).map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut seen: Vec<Vec<usize>> = layer_sets
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.sort_unstable();
            s
        })
        .collect();
    seen.sort();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("layer sweep repeats a layer set".into()));
    }
    cfg.validate()?;
    let splits = load_data(cfg)?;
    let net = train_id_model(cfg, &splits.train)?;
    let rows: Vec<LayerSweepRow> = layer_sets
        .iter()
        .map(|set| {
            let run = || -> Result<LayerSweepRow> {
                let features = compute_features(cfg, &net, &splits, cfg.style, set)?;
                let d = cluster_features(cfg, &features, &splits, cfg.k)?;
                Ok(LayerSweepRow {
                    layer_ids: set.clone(),
                    val_matching_accuracy: d.report.val_matching_accuracy,
                    train_matching_accuracy: d.report.train_matching_accuracy,
                    error: None,
                })
            };
            run().unwrap_or_else(|e| {
                log::warn!("layers {set:?}: {e}");
                LayerSweepRow {
                    layer_ids: set.clone(),
                    val_matching_accuracy: None,
                    train_matching_accuracy: None,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    if let Some(dir) = out {
        let mut csv = String::from("layer_ids,val_matching_accuracy,train_matching_accuracy,error\n");
        for r in &rows {
            let ids: Vec<String> = r.layer_ids.iter().map(usize::to_string).collect();
            csv.push_str(&format!(
                "{},{},{},{}\n",
                ids.join("+"),
                opt(r.val_matching_accuracy),
                opt(r.train_matching_accuracy),
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        write_table(dir, "sweep_layers", &rows, csv)?;
    }
    Ok(rows)
}


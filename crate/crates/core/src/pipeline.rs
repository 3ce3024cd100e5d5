//! End-to-end orchestration: discovery, robust training and grid search.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{assign_to_centroids, flatten, kmeans, Clustering, KMeansParams, Points};
use crate::error::{Error, Result, StageExt};
use crate::evalmatch::{hungarian_match, WorstGroupAccuracy};
use crate::nets::{save_checkpoint, ConvNet, SgdmConfig, NUM_LAYERS};
use crate::projection::{default_projection_dim, BlockProjector};
use crate::robusttrain::{evaluate, DroConfig, GroupAssignment, Objective, TrainReport, Trainer};
use crate::rng::{derive_seed, tag};
use crate::stylefeat::{compute, StyleKind, StyleLayout, StyleVector};
use crate::synthdata::{self, read_json, write_json, GroupedDataset, Splits, SynthConfig};
use crate::tensor::{stack_rows, Tensor};

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synth(SynthConfig),
    Dir(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    Auto,
    Explicit(usize),
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    #[default]
    GroupDro,
    ImportanceWeighting,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::GroupDro => "group_dro",
            Method::ImportanceWeighting => "importance_weighting",
        }
    }
}

/// Which environment labels a stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupSource {
    #[default]
    Pseudo,
    True,
}

impl GroupSource {
    fn use_pseudo(self) -> bool {
        self == GroupSource::Pseudo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    pub method: Method,
    /// Environment labels used to form training groups.
    pub train_groups: GroupSource,
    pub sgd: SgdmConfig,
    pub dro: DroConfig,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            method: Method::GroupDro,
            train_groups: GroupSource::Pseudo,
            sgd: SgdmConfig {
                lr: 0.02,
                l2: 1e-4,
                momentum: 0.9,
                batch_size: 64,
                epochs: 10,
                seed: 0,
            },
            dro: DroConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub lrs: Vec<f64>,
    pub l2s: Vec<f64>,
}

impl GridConfig {
    /// Learning rates scaled for training the small network from scratch.
    pub fn desk() -> Self {
        Self {
            lrs: vec![0.01, 0.02, 0.05],
            l2s: vec![1e-4, 1e-2, 1e-1, 1.0],
        }
    }

    /// The fine-tuning grid used with large pretrained backbones.
    pub fn pretrained() -> Self {
        Self {
            lrs: vec![1e-5, 5e-5, 1e-4],
            l2s: vec![1e-4, 1e-2, 1e-1, 1.0],
        }
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.l2s
            .iter()
            .flat_map(|&l2| self.lrs.iter().map(move |&lr| (l2, lr)))
            .collect()
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub style: StyleKind,
    pub layer_ids: Vec<usize>,
    pub projection: ProjectionMode,
    pub k: usize,
    /// Identification model optimizer; `None` reuses `robust.sgd` with one epoch.
    pub id_model: Option<SgdmConfig>,
    pub robust: RobustConfig,
    /// Environment labels used to score validation runs in the grid.
    pub selection: GroupSource,
    pub grid: GridConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            style: StyleKind::Gram,
            layer_ids: vec![NUM_LAYERS],
            projection: ProjectionMode::Auto,
            k: 2,
            id_model: None,
            robust: RobustConfig::default(),
            selection: GroupSource::Pseudo,
            grid: GridConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        validate_layers(&self.layer_ids).map_err(|e| Error::Config(e.to_string()))?;
        if self.style == StyleKind::Penultimate && self.layer_ids != [NUM_LAYERS] {
            return Err(Error::Config(format!(
                "penultimate style reads layer {NUM_LAYERS} only"
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        if self.projection == ProjectionMode::Explicit(0) {
            return Err(Error::Config("explicit projection dimension must be ≥ 1".into()));
        }
        if let DatasetSource::Synth(s) = &self.dataset {
            s.validate()?;
        }
        self.id_model_sgd().validate()?;
        self.robust.sgd.validate()?;
        if !(self.robust.dro.eta_q >= 0.0 && self.robust.dro.eta_q.is_finite()) {
            return Err(Error::Config("eta_q must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn id_model_sgd(&self) -> SgdmConfig {
        let mut c = self.id_model.unwrap_or(SgdmConfig {
            epochs: 1,
            ..self.robust.sgd
        });
        c.seed = derive_seed(self.seed, tag("id_model"));
        c
    }

    pub fn robust_sgd(&self, l2: f64, lr: f64) -> SgdmConfig {
        SgdmConfig {
            lr,
            l2,
            seed: derive_seed(self.seed, tag("robust")),
            ..self.robust.sgd
        }
    }

    /// Whether any stage reads pseudo environments.
    pub fn needs_discovery(&self) -> bool {
        self.selection.use_pseudo()
            || (self.robust.method != Method::Erm && self.robust.train_groups.use_pseudo())
    }
}

pub(crate) fn validate_layers(layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("layer list is empty"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > NUM_LAYERS) {
        return Err(Error::invalid(format!(
            "unknown layer id {bad}; valid ids are 1..={NUM_LAYERS}"
        )));
    }
    if layers.iter().collect::<BTreeSet<_>>().len() != layers.len() {
        return Err(Error::invalid(format!("layer list {layers:?} repeats a layer")));
    }
    Ok(())
}

/// Generates or loads the four splits.
pub fn load_data(cfg: &PipelineConfig) -> Result<Splits> {
    match &cfg.dataset {
        DatasetSource::Synth(s) => synthdata::generate(s),
        DatasetSource::Dir(dir) => synthdata::load(dir).map(|(_, splits)| splits),
    }
    .stage("dataset")
}

/// Trains the identification network with plain ERM.
pub fn train_id_model(cfg: &PipelineConfig, train: &GroupedDataset) -> Result<ConvNet<f32>> {
    let trained = Trainer::new(train, Objective::Erm, cfg.id_model_sgd())
        .and_then(|t| t.run(None))
        .stage("id_model")?;
    if trained.report.diverged {
        return Err(Error::AllDiverged.in_stage("id_model"));
    }
    Ok(trained.net)
}

const FEATURE_CHUNK: usize = 256;

/// Style vectors for every image of a split.
pub fn style_vectors(
    net: &ConvNet<f32>,
    ds: &GroupedDataset,
    kind: StyleKind,
    layer_ids: &[usize],
) -> Result<Vec<StyleVector>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(FEATURE_CHUNK) {
        let images: Vec<&[f32]> = chunk.iter().map(|&i| ds.image(i)).collect();
        let maps = net.extract_features_batch(&images, layer_ids)?;
        let styles = crate::par::map(&maps, |_, fms| compute(kind, fms));
        for s in styles {
            out.push(s?);
        }
    }
    Ok(out)
}

/// Clustering inputs for the train and validation splits.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub layout: StyleLayout,
    pub projector: Option<BlockProjector>,
    pub train_style: Vec<Vec<f32>>,
    pub val_style: Vec<Vec<f32>>,
    pub train: Vec<Vec<f32>>,
    pub val: Vec<Vec<f32>>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.train.first().map_or(0, Vec::len)
    }
}

pub fn compute_features(
    cfg: &PipelineConfig,
    net: &ConvNet<f32>,
    splits: &Splits,
    kind: StyleKind,
    layer_ids: &[usize],
) -> Result<FeatureSet> {
    let train = style_vectors(net, &splits.train, kind, layer_ids).stage("features")?;
    let val = style_vectors(net, &splits.val, kind, layer_ids).stage("features")?;
    let sample = train
        .first()
        .ok_or_else(|| Error::invalid("training split is empty").in_stage("features"))?;
    let zero_blocks = train.iter().chain(&val).map(StyleVector::zero_blocks).sum();
    if zero_blocks > 0 {
        log::warn!("{zero_blocks} all-zero style blocks");
    }
    let layout = StyleLayout::describe(kind, sample, zero_blocks);
    let target = match cfg.projection {
        ProjectionMode::Off => None,
        ProjectionMode::Explicit(d) => Some(d),
        ProjectionMode::Auto => Some(default_projection_dim(train.len()).stage("projection")?),
    };
    let projector = target
        .map(|d| BlockProjector::new(derive_seed(cfg.seed, tag("projection")), d, sample))
        .transpose()
        .stage("projection")?;
    let (train_p, val_p) = match &projector {
        Some(p) => (
            p.project_all(&train).stage("projection")?,
            p.project_all(&val).stage("projection")?,
        ),
        None => (
            train.iter().map(|s| s.concat().to_vec()).collect(),
            val.iter().map(|s| s.concat().to_vec()).collect(),
        ),
    };
    Ok(FeatureSet {
        layout,
        projector,
        train_style: train.into_iter().map(StyleVector::into_concat).collect(),
        val_style: val.into_iter().map(StyleVector::into_concat).collect(),
        train: train_p,
        val: val_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub schema_version: u32,
    pub style: StyleKind,
    pub layer_ids: Vec<usize>,
    pub k: usize,
    pub style_dim: usize,
    pub feature_dim: usize,
    pub projected: bool,
    pub zero_blocks: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub cluster_sizes: Vec<usize>,
    pub train_matching_accuracy: Option<f64>,
    pub val_matching_accuracy: Option<f64>,
    /// Matched true environment per cluster on the validation split.
    pub val_permutation: Option<Vec<Option<usize>>>,
}

/// Outcome of clustering one feature set.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub clustering: Clustering,
    /// Train and validation carry pseudo environments; test splits are untouched.
    pub splits: Splits,
    pub report: DiscoveryReport,
}

/// Clusters the training features, labels validation by nearest centroid and
/// scores both against true environments when available.
pub fn cluster_features(
    cfg: &PipelineConfig,
    features: &FeatureSet,
    splits: &Splits,
    k: usize,
) -> Result<Discovery> {
    let (train_flat, dim) = flatten(&features.train).stage("clustering")?;
    let (val_flat, _) = flatten(&features.val).stage("clustering")?;
    let train_pts = Points::new(&train_flat, dim).stage("clustering")?;
    let val_pts = Points::new(&val_flat, dim).stage("clustering")?;
    let clustering = kmeans(&train_pts, &KMeansParams::new(k, derive_seed(cfg.seed, tag("kmeans"))))
        .stage("clustering")?;
    let val_assign = assign_to_centroids(&clustering, &val_pts).stage("clustering")?;
    let score = |ds: &GroupedDataset, a: &[usize]| -> Result<Option<crate::evalmatch::MatchResult>> {
        ds.true_envs.as_deref().map(|t| hungarian_match(a, t)).transpose()
    };
    let train_match = score(&splits.train, &clustering.assignments).stage("matching")?;
    let val_match = score(&splits.val, &val_assign).stage("matching")?;
    let mut out = splits.clone();
    out.train = out.train.with_pseudo_envs(clustering.assignments.clone(), k)?;
    out.val = out.val.with_pseudo_envs(val_assign, k)?;
    let report = DiscoveryReport {
        schema_version: crate::SCHEMA_VERSION,
        style: features.layout.kind,
        layer_ids: features.layout.layer_ids.clone(),
        k,
        style_dim: features.layout.dim,
        feature_dim: dim,
        projected: features.projector.is_some(),
        zero_blocks: features.layout.zero_blocks,
        inertia: clustering.inertia,
        iterations: clustering.iterations_run,
        cluster_sizes: clustering.cluster_sizes(),
        train_matching_accuracy: train_match.as_ref().map(|m| m.matching_accuracy),
        val_matching_accuracy: val_match.as_ref().map(|m| m.matching_accuracy),
        val_permutation: val_match.map(|m| m.permutation),
    };
    Ok(Discovery {
        clustering,
        splits: out,
        report,
    })
}

/// Trains the identification model, extracts and projects style features,
/// clusters them and writes every intermediate artifact under `out`.
pub fn run_discovery(cfg: &PipelineConfig, splits: &Splits, out: Option<&Path>) -> Result<Discovery> {
    cfg.validate()?;
    let net = train_id_model(cfg, &splits.train)?;
    let features = compute_features(cfg, &net, splits, cfg.style, &cfg.layer_ids)?;
    let discovery = cluster_features(cfg, &features, splits, cfg.k)?;
    if let Some(dir) = out {
        write_discovery(dir, cfg, &net, &features, &discovery).stage("artifacts")?;
    }
    Ok(discovery)
}

fn write_discovery(
    dir: &Path,
    cfg: &PipelineConfig,
    net: &ConvNet<f32>,
    features: &FeatureSet,
    d: &Discovery,
) -> Result<()> {
    let feat = ensure_dir(&dir.join("features"))?;
    let clus = ensure_dir(&dir.join("clustering"))?;
    save_checkpoint(&dir.join("checkpoints").join("id_model"), net, cfg.id_model_sgd().seed, 1)?;
    stack_rows(&features.train_style)?.save(feat.join("train_style.grtn"))?;
    stack_rows(&features.val_style)?.save(feat.join("val_style.grtn"))?;
    write_json(&feat.join("style_layout.json"), &features.layout)?;
    if let Some(p) = &features.projector {
        write_json(&feat.join("projection.json"), p)?;
        stack_rows(&features.train)?.save(feat.join("train_projected.grtn"))?;
        stack_rows(&features.val)?.save(feat.join("val_projected.grtn"))?;
    }
    Tensor::new(vec![d.clustering.k, d.clustering.dim], d.clustering.centroids.clone())?
        .save(clus.join("centroids.grtn"))?;
    write_pseudo_labels(&clus.join("train_pseudo.csv"), &d.splits.train)?;
    write_pseudo_labels(&clus.join("val_pseudo.csv"), &d.splits.val)?;
    write_report(dir, "discovery", &d.report)
}

fn write_pseudo_labels(path: &Path, ds: &GroupedDataset) -> Result<()> {
    let mut text = String::from("index,pseudo_env\n");
    for (i, e) in ds.pseudo_envs.iter().flatten().enumerate() {
        text.push_str(&format!("{i},{e}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads pseudo environments written by a discovery run back onto the splits.
pub fn load_pseudo_labels(dir: &Path, splits: &Splits) -> Result<Splits> {
    let report: DiscoveryReport = read_json(&dir.join("reports").join("discovery.json"))?;
    let read = |name: &str| -> Result<Vec<usize>> {
        let path = dir.join("clustering").join(name);
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Csv {
            path: path.clone(),
            source: e,
        })?;
        r.deserialize::<(usize, usize)>()
            .map(|row| row.map(|(_, e)| e))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Csv { path, source: e })
    };
    let mut out = splits.clone();
    out.train = out.train.with_pseudo_envs(read("train_pseudo.csv")?, report.k)?;
    out.val = out.val.with_pseudo_envs(read("val_pseudo.csv")?, report.k)?;
    Ok(out)
}

/// `(env, class)` groups of a split, compacted to the observed pairs.
pub fn groups_of(ds: &GroupedDataset, source: GroupSource) -> Result<GroupAssignment> {
    let envs = match source {
        GroupSource::Pseudo => ds.pseudo_envs.as_ref().ok_or_else(|| {
            Error::invalid(format!(
                "{} split has no pseudo environments; run discovery first",
                ds.split.name()
            ))
        })?,
        GroupSource::True => ds
            .true_envs
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} split has no true environments", ds.split.name())))?,
    };
    let keys: Vec<(usize, usize)> = envs.iter().copied().zip(ds.labels.iter().copied()).collect();
    Ok(GroupAssignment::compact(&keys).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub worst_group: f64,
    pub average: f64,
}

impl From<&WorstGroupAccuracy> for Metrics {
    fn from(w: &WorstGroupAccuracy) -> Self {
        Self {
            worst_group: w.worst,
            average: w.average,
        }
    }
}

/// Final test metrics, always scored against true environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub group_labels: String,
    /// Worst `(env, class)` accuracy on the environment-balanced test split.
    pub worst_group: f64,
    /// Accuracy on the in-distribution test split.
    pub average: f64,
    pub shift_average: f64,
    pub per_group: Vec<crate::evalmatch::GroupAccuracy>,
}

pub fn test_metrics(net: &ConvNet<f32>, splits: &Splits) -> Result<TestMetrics> {
    let shift = evaluate(net, &splits.test_shift, &groups_of(&splits.test_shift, GroupSource::True)?)?;
    let ind = evaluate(net, &splits.test_ind, &groups_of(&splits.test_ind, GroupSource::True)?)?;
    Ok(TestMetrics {
        group_labels: "true".into(),
        worst_group: shift.worst,
        average: ind.average,
        shift_average: shift.average,
        per_group: shift.per_group,
    })
}

fn val_metrics(net: &ConvNet<f32>, val: &GroupedDataset, source: GroupSource) -> Result<Option<Metrics>> {
    let present = match source {
        GroupSource::Pseudo => val.pseudo_envs.is_some(),
        GroupSource::True => val.true_envs.is_some(),
    };
    if !present {
        return Ok(None);
    }
    Ok(Some(Metrics::from(&evaluate(net, val, &groups_of(val, source)?)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub schema_version: u32,
    pub method: Method,
    pub train_groups: Option<GroupSource>,
    pub l2: f64,
    pub lr: f64,
    pub diverged: bool,
    pub val_true_groups: Option<Metrics>,
    pub val_pseudo_groups: Option<Metrics>,
    pub test: Option<TestMetrics>,
    pub train: TrainReport,
}

/// Trains the configured method once and scores it.
pub fn run_robust(cfg: &PipelineConfig, splits: &Splits, sgd: SgdmConfig) -> Result<(ConvNet<f32>, RobustReport)> {
    let method = cfg.robust.method;
    let train = &splits.train;
    let groups = match method {
        Method::Erm => None,
        _ => Some(groups_of(train, cfg.robust.train_groups).stage("robust")?),
    };
    let objective = match (method, &groups) {
        (Method::Erm, _) => Objective::Erm,
        (Method::GroupDro, Some(g)) => Objective::GroupDro(g, cfg.robust.dro),
        (Method::ImportanceWeighting, Some(g)) => Objective::ImportanceWeighting(g),
        _ => unreachable!("groups built for grouped methods"),
    };
    let monitor = match (&groups, train.true_envs.is_some()) {
        (None, true) => Some(groups_of(train, GroupSource::True)?),
        _ => None,
    };
    let trained = Trainer::new(train, objective, sgd)
        .and_then(|t| t.run(monitor.as_ref()))
        .stage("robust")?;
    let diverged = trained.report.diverged;
    let net = trained.net;
    let (vt, vp, test) = if diverged {
        (None, None, None)
    } else {
        (
            val_metrics(&net, &splits.val, GroupSource::True).stage("evaluate")?,
            val_metrics(&net, &splits.val, GroupSource::Pseudo).stage("evaluate")?,
            Some(test_metrics(&net, splits).stage("evaluate")?),
        )
    };
    let report = RobustReport {
        schema_version: crate::SCHEMA_VERSION,
        method,
        train_groups: groups.as_ref().map(|_| cfg.robust.train_groups),
        l2: sgd.l2,
        lr: sgd.lr,
        diverged,
        val_true_groups: vt,
        val_pseudo_groups: vp,
        test,
        train: trained.report,
    };
    Ok((net, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema_version: u32,
    pub method: Method,
    pub selection: GroupSource,
    pub cells: Vec<RobustReport>,
    pub best: usize,
}

impl GridReport {
    pub fn best_cell(&self) -> &RobustReport {
        &self.cells[self.best]
    }

    pub fn to_csv(&self) -> String {
        let f = |m: Option<f64>| m.map_or(String::new(), |v| v.to_string());
        let mut out = String::from(
            "l2,lr,diverged,val_true_worst,val_true_avg,val_pseudo_worst,val_pseudo_avg,test_worst,test_avg\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.l2,
                c.lr,
                c.diverged,
                f(c.val_true_groups.map(|m| m.worst_group)),
                f(c.val_true_groups.map(|m| m.average)),
                f(c.val_pseudo_groups.map(|m| m.worst_group)),
                f(c.val_pseudo_groups.map(|m| m.average)),
                f(c.test.as_ref().map(|t| t.worst_group)),
                f(c.test.as_ref().map(|t| t.average)),
            ));
        }
        out
    }
}

/// Index of the best non-diverged cell by validation worst-group accuracy
/// under `selection`; ties go to higher average, then smaller λ, then smaller η.
pub fn select(cells: &[RobustReport], selection: GroupSource) -> Result<usize> {
    let metric = |c: &RobustReport| match selection {
        GroupSource::True => c.val_true_groups,
        GroupSource::Pseudo => c.val_pseudo_groups,
    };
    let mut best: Option<(usize, Metrics)> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some(m) = metric(c).filter(|m| !c.diverged && m.worst_group.is_finite()) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((j, b)) => {
                let o = &cells[*j];
                m.worst_group
                    .total_cmp(&b.worst_group)
                    .then(m.average.total_cmp(&b.average))
                    .then(o.l2.total_cmp(&c.l2))
                    .then(o.lr.total_cmp(&c.lr))
                    .is_gt()
            }
        };
        if better {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::AllDiverged)
}

/// Trains every `(λ, η)` cell and keeps the best under the selection labels.
pub fn grid_search(cfg: &PipelineConfig, splits: &Splits, out: Option<&Path>) -> Result<(ConvNet<f32>, GridReport)> {
    let cells = cfg.grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    let mut nets = Vec::with_capacity(cells.len());
    let mut reports = Vec::with_capacity(cells.len());
    for (l2, lr) in cells {
        log::info!("grid cell l2={l2} lr={lr}");
        let (net, report) = run_robust(cfg, splits, cfg.robust_sgd(l2, lr))?;
        nets.push(net);
        reports.push(report);
    }
    let best = select(&reports, cfg.selection).stage("grid")?;
    let report = GridReport {
        schema_version: crate::SCHEMA_VERSION,
        method: cfg.robust.method,
        selection: cfg.selection,
        cells: reports,
        best,
    };
    let net = nets.swap_remove(best);
    if let Some(dir) = out {
        let epochs = report.best_cell().train.epochs.len();
        save_checkpoint(&dir.join("checkpoints").join("robust"), &net, cfg.robust_sgd(0.0, 0.0).seed, epochs)
            .stage("artifacts")?;
        write_report(dir, "grid", &report).stage("artifacts")?;
        let csv = ensure_dir(&dir.join("reports"))?.join("grid.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok((net, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub discovery: Option<DiscoveryReport>,
    pub grid: GridReport,
    pub selected: RobustReport,
}

/// Run manifest; the only artifact carrying a wall-clock timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub created_unix_secs: u64,
    pub config: PipelineConfig,
}

pub fn write_manifest(dir: &Path, command: &str, cfg: &PipelineConfig) -> Result<()> {
    ensure_dir(dir)?;
    let created_unix_secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    write_json(
        &dir.join("manifest.json"),
        &RunManifest {
            schema_version: crate::SCHEMA_VERSION,
            command: command.into(),
            created_unix_secs,
            config: cfg.clone(),
        },
    )
}

/// Writes the synthetic dataset (if any) under `datasets/`.
pub fn write_dataset(dir: &Path, cfg: &PipelineConfig, splits: &Splits) -> Result<()> {
    match &cfg.dataset {
        DatasetSource::Synth(s) => synthdata::save(&dir.join("datasets"), s, splits).stage("artifacts"),
        DatasetSource::Dir(_) => Ok(()),
    }
}

/// All stages: data, discovery when pseudo labels are needed, grid search.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineReport> {
    cfg.validate()?;
    if let Some(dir) = out {
        write_manifest(dir, "pipeline", cfg).stage("artifacts")?;
    }
    let splits = load_data(cfg)?;
    if let Some(dir) = out {
        write_dataset(dir, cfg, &splits)?;
    }
    let (splits, discovery) = if cfg.needs_discovery() {
        let d = run_discovery(cfg, &splits, out)?;
        (d.splits, Some(d.report))
    } else {
        (splits, None)
    };
    let (_, grid) = grid_search(cfg, &splits, out)?;
    let report = PipelineReport {
        schema_version: crate::SCHEMA_VERSION,
        config: cfg.clone(),
        discovery,
        selected: grid.best_cell().clone(),
        grid,
    };
    if let Some(dir) = out {
        write_report(dir, "pipeline", &report).stage("artifacts")?;
    }
    Ok(report)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Writes `reports/<name>.json`.
pub fn write_report<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let reports = ensure_dir(&dir.join("reports"))?;
    write_json(&reports.join(format!("{name}.json")), value)
}

#[cfg(test)]
mod tests;

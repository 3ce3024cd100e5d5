//! ERM, importance-weighted and GroupDRO training loops.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmatch::{worst_group_accuracy, WorstGroupAccuracy};
use crate::nets::{sgdm_step, Architecture, ConvNet, Momentum, ParamSet, SgdmConfig};
use crate::rng::{derive_seed, tag, SeededRng};
use crate::synthdata::GroupedDataset;

/// Per-sample group index in `0..n_groups`, every group non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    ids: Vec<usize>,
    n_groups: usize,
}

impl GroupAssignment {
    pub fn new(ids: Vec<usize>, n_groups: usize) -> Result<Self> {
        let mut sizes = vec![0usize; n_groups];
        for &g in &ids {
            if g >= n_groups {
                return Err(Error::invalid(format!("group {g} out of range 0..{n_groups}")));
            }
            sizes[g] += 1;
        }
        if let Some(group) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyGroup { group });
        }
        Ok(Self { ids, n_groups })
    }

    /// Relabels arbitrary keys to `0..G` in order of first appearance of the
    /// sorted key set, dropping keys with no samples. Returns the keys too.
    pub fn compact<K: Ord + Clone>(keys: &[K]) -> (Self, Vec<K>) {
        let mut distinct: Vec<K> = keys.to_vec();
        distinct.sort();
        distinct.dedup();
        let ids = keys
            .iter()
            .map(|k| distinct.binary_search(k).expect("key present"))
            .collect();
        let n_groups = distinct.len();
        (Self { ids, n_groups }, distinct)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_groups];
        for &g in &self.ids {
            s[g] += 1;
        }
        s
    }
}

/// Simplex weights over groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub q: Vec<f64>,
    pub eta_q: f64,
}

impl GroupWeights {
    pub fn uniform(n_groups: usize, eta_q: f64) -> Self {
        Self {
            q: vec![1.0 / n_groups as f64; n_groups],
            eta_q,
        }
    }

    /// Exponentiated-gradient step on the groups present in the batch, then
    /// per-sample weights `q_g / n_g`. Absent groups keep their mass and get
    /// no weight this step. The result does not depend on sample order.
    pub fn update(&mut self, groups: &[usize], losses: &[f64]) -> Vec<f64> {
        let (mean_loss, counts) = batch_group_losses(groups, losses, self.q.len());
        for g in 0..self.q.len() {
            if counts[g] > 0 {
                self.q[g] *= (self.eta_q * mean_loss[g]).exp();
            }
        }
        let total: f64 = self.q.iter().sum();
        self.q.iter_mut().for_each(|q| *q /= total);
        groups
            .iter()
            .map(|&g| self.q[g] / counts[g] as f64)
            .collect()
    }

    pub fn on_simplex(&self) -> bool {
        self.q.iter().all(|&q| q >= 0.0) && (self.q.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

/// Mean loss and sample count per group; sums run over sorted values so the
/// result is independent of sample order.
fn batch_group_losses(groups: &[usize], losses: &[f64], n_groups: usize) -> (Vec<f64>, Vec<usize>) {
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_groups];
    for (&g, &l) in groups.iter().zip(losses) {
        buckets[g].push(l);
    }
    let counts = buckets.iter().map(Vec::len).collect();
    let means = buckets
        .iter_mut()
        .map(|b| {
            if b.is_empty() {
                return 0.0;
            }
            b.sort_by(f64::total_cmp);
            b.iter().sum::<f64>() / b.len() as f64
        })
        .collect();
    (means, counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DroConfig {
    pub eta_q: f64,
    /// Put all weight on the worst group of each batch instead of the
    /// exponentiated-gradient weights.
    pub hard_max: bool,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            eta_q: 0.01,
            hard_max: false,
        }
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Erm,
    GroupDro(&'a GroupAssignment, DroConfig),
    ImportanceWeighting(&'a GroupAssignment),
}

impl Objective<'_> {
    fn name(&self) -> &'static str {
        match self {
            Objective::Erm => "erm",
            Objective::GroupDro(..) => "group_dro",
            Objective::ImportanceWeighting(_) => "importance_weighting",
        }
    }

    fn groups(&self) -> Option<&GroupAssignment> {
        match self {
            Objective::Erm => None,
            Objective::GroupDro(g, _) | Objective::ImportanceWeighting(g) => Some(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub avg_loss: f64,
    pub accuracy: f64,
    pub group_losses: Vec<f64>,
    pub group_accuracies: Vec<f64>,
    pub worst_group_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub method: String,
    pub config: SgdmConfig,
    pub epochs: Vec<EpochStats>,
    pub diverged: bool,
    pub final_q: Option<Vec<f64>>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.avg_loss)
    }

    /// Per-epoch metrics as CSV text.
    pub fn to_csv(&self) -> String {
        let g = self.epochs.first().map_or(0, |e| e.group_losses.len());
        let mut out = String::from("epoch,avg_loss,accuracy,worst_group_accuracy");
        for i in 0..g {
            out.push_str(&format!(",group{i}_loss,group{i}_acc"));
        }
        out.push('\n');
        for e in &self.epochs {
            let worst = e.worst_group_accuracy.map_or(String::new(), |w| w.to_string());
            out.push_str(&format!("{},{},{},{}", e.epoch, e.avg_loss, e.accuracy, worst));
            for (l, a) in e.group_losses.iter().zip(&e.group_accuracies) {
                out.push_str(&format!(",{l},{a}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        crate::synthdata::write_json(json, self)?;
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))
    }
}

pub struct Trained {
    pub net: ConvNet<f32>,
    pub report: TrainReport,
}

/// Owns the net and optimizer state for one training run.
pub struct Trainer<'a> {
    ds: &'a GroupedDataset,
    objective: Objective<'a>,
    cfg: SgdmConfig,
    net: ConvNet<f32>,
    momentum: Momentum<f32>,
    q: Option<GroupWeights>,
    iw: Option<Vec<f64>>,
}

/// Result of one minibatch step.
pub struct StepOutcome {
    pub losses: Vec<f64>,
    pub preds: Vec<usize>,
    pub grads: ParamSet<f32>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a GroupedDataset, objective: Objective<'a>, cfg: SgdmConfig) -> Result<Self> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if let Some(g) = objective.groups() {
            if g.ids().len() != ds.len() {
                return Err(Error::DimensionMismatch {
                    expected: ds.len(),
                    found: g.ids().len(),
                });
            }
        }
        let arch = Architecture {
            in_channels: ds.channels,
            image_size: ds.image_size,
            n_classes: ds.n_classes,
        };
        let net = ConvNet::new(arch, derive_seed(cfg.seed, tag("init")));
        let momentum = Momentum::zeros_like(&net);
        let q = match objective {
            Objective::GroupDro(g, dro) => Some(GroupWeights::uniform(g.n_groups(), dro.eta_q)),
            _ => None,
        };
        let iw = match objective {
            Objective::ImportanceWeighting(g) => Some(importance_weights(g)),
            _ => None,
        };
        Ok(Self {
            ds,
            objective,
            cfg,
            net,
            momentum,
            q,
            iw,
        })
    }

    pub fn net(&self) -> &ConvNet<f32> {
        &self.net
    }

    pub fn group_weights(&self) -> Option<&GroupWeights> {
        self.q.as_ref()
    }

    /// Batch order for an epoch: a seeded shuffle cut into minibatches, each
    /// sorted by sample index.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.ds.len()).collect();
        let mut rng = SeededRng::new(derive_seed(self.cfg.seed, tag("shuffle")), epoch as u64).generator();
        order.shuffle(&mut rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|c| {
                let mut b = c.to_vec();
                b.sort_unstable();
                b
            })
            .collect()
    }

    fn sample_weights(&mut self, batch: &[usize], losses: &[f64]) -> Vec<f64> {
        let b = batch.len() as f64;
        match self.objective {
            Objective::Erm => vec![1.0 / b; batch.len()],
            Objective::ImportanceWeighting(_) => {
                let w = self.iw.as_ref().expect("weights set");
                let groups = self.objective.groups().unwrap().ids();
                batch.iter().map(|&i| w[groups[i]] / b).collect()
            }
            Objective::GroupDro(g, dro) => {
                let groups: Vec<usize> = batch.iter().map(|&i| g.ids()[i]).collect();
                if dro.hard_max {
                    let (means, counts) = batch_group_losses(&groups, losses, g.n_groups());
                    let worst = (0..g.n_groups())
                        .filter(|&k| counts[k] > 0)
                        .max_by(|&a, &c| means[a].total_cmp(&means[c]).then(c.cmp(&a)))
                        .expect("batch is non-empty");
                    groups
                        .iter()
                        .map(|&k| if k == worst { 1.0 / counts[k] as f64 } else { 0.0 })
                        .collect()
                } else {
                    self.q.as_mut().expect("q set").update(&groups, losses)
                }
            }
        }
    }

    /// Forward, reweight and backward on one batch, then apply an SGD-M step.
    /// The batch is processed in ascending sample order regardless of the
    /// order given.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepOutcome> {
        let mut batch = batch.to_vec();
        batch.sort_unstable();
        let images: Vec<&[f32]> = batch.iter().map(|&i| self.ds.image(i)).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.ds.labels[i]).collect();
        let trace = self.net.forward_train(&images)?;
        let (losses, preds) = self.net.cross_entropy(&trace, &labels);
        let losses: Vec<f64> = losses.iter().map(|&l| l as f64).collect();
        let weights: Vec<f32> = self
            .sample_weights(&batch, &losses)
            .into_iter()
            .map(|w| w as f32)
            .collect();
        let dlogits = self.net.weighted_dlogits(&trace, &labels, &weights);
        let grads = self.net.backward(&trace, &dlogits);
        sgdm_step(&mut self.net, &grads, &self.cfg, &mut self.momentum);
        Ok(StepOutcome { losses, preds, grads })
    }

    /// Runs every epoch; stops early only on divergence.
    pub fn run(mut self, monitor: Option<&GroupAssignment>) -> Result<Trained> {
        let monitor = monitor.or(self.objective.groups()).cloned();
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        let mut diverged = false;
        'outer: for epoch in 0..self.cfg.epochs {
            let n_groups = monitor.as_ref().map_or(0, |m| m.n_groups());
            let mut g_loss = vec![0.0f64; n_groups];
            let mut g_correct = vec![0usize; n_groups];
            let mut g_total = vec![0usize; n_groups];
            let (mut loss_sum, mut correct) = (0.0f64, 0usize);
            for batch in self.epoch_batches(epoch) {
                let out = self.step(&batch)?;
                if out.losses.iter().any(|l| !l.is_finite())
                    || self.net.params().iter().flatten().any(|v| !v.is_finite())
                {
                    diverged = true;
                    log::warn!("training diverged in epoch {epoch}");
                    break 'outer;
                }
                for (k, &i) in batch.iter().enumerate() {
                    let ok = out.preds[k] == self.ds.labels[i];
                    loss_sum += out.losses[k];
                    correct += ok as usize;
                    if let Some(m) = &monitor {
                        let g = m.ids()[i];
                        g_loss[g] += out.losses[k];
                        g_total[g] += 1;
                        g_correct[g] += ok as usize;
                    }
                }
                if let Some(q) = &self.q {
                    debug_assert!(q.on_simplex());
                }
            }
            let n = self.ds.len() as f64;
            let group_accuracies: Vec<f64> = g_correct
                .iter()
                .zip(&g_total)
                .map(|(&c, &t)| c as f64 / t.max(1) as f64)
                .collect();
            epochs.push(EpochStats {
                epoch,
                avg_loss: loss_sum / n,
                accuracy: correct as f64 / n,
                group_losses: g_loss.iter().zip(&g_total).map(|(&l, &t)| l / t.max(1) as f64).collect(),
                worst_group_accuracy: group_accuracies.iter().cloned().reduce(f64::min),
                group_accuracies,
            });
        }
        let report = TrainReport {
            schema_version: crate::SCHEMA_VERSION,
            method: self.objective.name().into(),
            config: self.cfg,
            epochs,
            diverged,
            final_q: self.q.as_ref().map(|q| q.q.clone()),
            checkpoint: None,
        };
        Ok(Trained {
            net: self.net,
            report,
        })
    }
}

/// `N / (G · |D_g|)` for every group.
pub fn importance_weights(groups: &GroupAssignment) -> Vec<f64> {
    let n = groups.ids().len() as f64;
    let g = groups.n_groups() as f64;
    groups
        .sizes()
        .iter()
        .map(|&s| n / (g * s as f64))
        .collect()
}

pub fn train_erm(ds: &GroupedDataset, cfg: &SgdmConfig, monitor: Option<&GroupAssignment>) -> Result<Trained> {
    Trainer::new(ds, Objective::Erm, *cfg)?.run(monitor)
}

pub fn train_group_dro(
    ds: &GroupedDataset,
    groups: &GroupAssignment,
    cfg: &SgdmConfig,
    dro: &DroConfig,
) -> Result<Trained> {
    Trainer::new(ds, Objective::GroupDro(groups, *dro), *cfg)?.run(None)
}

pub fn train_importance_weighting(
    ds: &GroupedDataset,
    groups: &GroupAssignment,
    cfg: &SgdmConfig,
) -> Result<Trained> {
    Trainer::new(ds, Objective::ImportanceWeighting(groups), *cfg)?.run(None)
}

/// Worst-group and average accuracy of `net` on `ds` under the given groups.
pub fn evaluate(net: &ConvNet<f32>, ds: &GroupedDataset, groups: &GroupAssignment) -> Result<WorstGroupAccuracy> {
    let images: Vec<&[f32]> = (0..ds.len()).map(|i| ds.image(i)).collect();
    let preds = net.predict(&images, 256)?;
    worst_group_accuracy(&preds, &ds.labels, groups.ids(), groups.n_groups())
}

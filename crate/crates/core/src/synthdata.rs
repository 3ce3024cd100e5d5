//! Seeded synthetic image datasets with planted class / environment structure.
//!
//! The class of an image decides a low-frequency elongated blob placed at a
//! random location. The environment decides a high-frequency grating texture
//! laid over the whole image. Environments are drawn class-aligned with
//! probability `majority_frac`, which makes the texture a spurious shortcut.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, tag, SeededRng};
use crate::tensor::Tensor;

/// How environments differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    /// Per-environment grating orientation and channel colouring.
    #[default]
    Oriented,
    /// Same orientation distribution and per-channel statistics in every
    /// environment; only the sign pattern of the cross-channel mixing differs.
    ChannelMixing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub n_envs: usize,
    pub majority_frac: f64,
    pub class_signal_strength: f32,
    pub env_texture_strength: f32,
    pub noise_std: f32,
    pub texture: TextureMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_val: 2000,
            n_test: 2000,
            image_size: 16,
            channels: 3,
            n_classes: 2,
            n_envs: 2,
            majority_frac: 0.95,
            class_signal_strength: 0.65,
            env_texture_strength: 1.0,
            noise_std: 1.0,
            texture: TextureMode::Oriented,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be ≥ 2, got {}", self.n_classes));
        }
        if self.n_envs < 2 {
            return bad(format!("n_envs must be ≥ 2, got {}", self.n_envs));
        }
        let lo = 1.0 / self.n_envs as f64;
        if !(lo - 1e-12..=1.0).contains(&self.majority_frac) {
            return bad(format!(
                "majority_frac must lie in [1/E, 1] = [{lo}, 1], got {}",
                self.majority_frac
            ));
        }
        if self.image_size < 4 || self.channels == 0 {
            return bad("image_size must be ≥ 4 and channels ≥ 1".into());
        }
        if self.texture == TextureMode::ChannelMixing
            && (self.channels < 2 || self.channels > 16 || self.n_envs > 1 << (self.channels - 1))
        {
            return bad(format!(
                "channel_mixing supports at most 2^(channels-1) = {} environments",
                1usize << self.channels.clamp(1, 16).saturating_sub(1)
            ));
        }
        if self.noise_std < 0.0 {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }

    fn aligned_env(&self, class: usize) -> usize {
        class % self.n_envs
    }

    fn env_probability(&self, class: usize, env: usize) -> f64 {
        if env == self.aligned_env(class) {
            self.majority_frac
        } else {
            (1.0 - self.majority_frac) / (self.n_envs - 1) as f64
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestInd,
    TestShift,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestInd, Split::TestShift];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestInd => "test_ind",
            Split::TestShift => "test_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split tag {s:?}")))
    }
}

/// Images with class labels and optional true / pseudo environment labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub split: Split,
    pub channels: usize,
    pub image_size: usize,
    /// `[N, channels, H, W]`, row-major.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub true_envs: Option<Vec<usize>>,
    pub n_envs: usize,
    pub pseudo_envs: Option<Vec<usize>>,
    pub n_pseudo_envs: usize,
}

/// `(env, class) → count`.
pub type GroupCounts = BTreeMap<(usize, usize), usize>;

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn with_pseudo_envs(mut self, envs: Vec<usize>, n_pseudo_envs: usize) -> Result<Self> {
        if envs.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: envs.len(),
            });
        }
        if let Some(&bad) = envs.iter().find(|&&e| e >= n_pseudo_envs) {
            return Err(Error::invalid(format!(
                "pseudo environment {bad} out of range 0..{n_pseudo_envs}"
            )));
        }
        self.pseudo_envs = Some(envs);
        self.n_pseudo_envs = n_pseudo_envs;
        Ok(self)
    }

    fn envs(&self, use_pseudo: bool) -> Result<(&[usize], usize)> {
        if use_pseudo {
            self.pseudo_envs
                .as_deref()
                .map(|e| (e, self.n_pseudo_envs))
                .ok_or_else(|| Error::invalid(format!("{} split has no pseudo environments", self.split.name())))
        } else {
            self.true_envs
                .as_deref()
                .map(|e| (e, self.n_envs))
                .ok_or_else(|| Error::invalid(format!("{} split has no true environments", self.split.name())))
        }
    }

    /// Exact `(env, class)` counts, including zero entries for every pair.
    pub fn group_counts(&self, use_pseudo: bool) -> Result<GroupCounts> {
        let (envs, n_envs) = self.envs(use_pseudo)?;
        let mut counts: GroupCounts = (0..n_envs)
            .flat_map(|e| (0..self.n_classes).map(move |k| ((e, k), 0)))
            .collect();
        for (&e, &k) in envs.iter().zip(&self.labels) {
            *counts.get_mut(&(e, k)).expect("labels in range") += 1;
        }
        Ok(counts)
    }

    /// Group index `env · K + class` for every sample.
    pub fn group_ids(&self, use_pseudo: bool) -> Result<Vec<usize>> {
        let (envs, _) = self.envs(use_pseudo)?;
        Ok(envs
            .iter()
            .zip(&self.labels)
            .map(|(&e, &k)| e * self.n_classes + k)
            .collect())
    }

    /// Keeps only the listed samples, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Option<Vec<usize>>| v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
        Self {
            split: self.split,
            channels: self.channels,
            image_size: self.image_size,
            images: idx.iter().flat_map(|&i| self.image(i).to_vec()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            true_envs: pick(&self.true_envs),
            n_envs: self.n_envs,
            pseudo_envs: pick(&self.pseudo_envs),
            n_pseudo_envs: self.n_pseudo_envs,
        }
    }
}

/// The four splits produced by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test_ind: GroupedDataset,
    pub test_shift: GroupedDataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &GroupedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestInd => &self.test_ind,
            Split::TestShift => &self.test_shift,
        }
    }
}

struct Sample {
    class: usize,
    env: usize,
    image: Vec<f32>,
}

fn draw_sample(cfg: &SynthConfig, rho: f64, rng: &mut ChaCha8Rng) -> Sample {
    let class = rng.random_range(0..cfg.n_classes);
    let aligned = cfg.aligned_env(class);
    let env = if rng.random::<f64>() < rho {
        aligned
    } else {
        // uniform over the other environments
        let r = rng.random_range(0..cfg.n_envs - 1);
        if r >= aligned {
            r + 1
        } else {
            r
        }
    };
    let image = render(cfg, class, env, rng);
    Sample { class, env, image }
}

/// Per-channel gain of the oriented texture in environment `env`.
fn channel_gain(cfg: &SynthConfig, env: usize) -> Vec<f32> {
    let c = cfg.channels;
    let phase = env as f32 / cfg.n_envs as f32;
    let raw: Vec<f32> = (0..c)
        .map(|ch| 0.4 + (2.0 * PI * (ch as f32 / c as f32 + phase)).cos())
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f32>().sqrt();
    raw.iter().map(|v| v / norm * (c as f32).sqrt()).collect()
}

/// ±1 channel signs for the channel-mixing mode: bit `c-1` of `env` flips
/// channel `c`, channel 0 is never flipped.
fn mixing_signs(cfg: &SynthConfig, env: usize) -> Vec<f32> {
    (0..cfg.channels)
        .map(|ch| if ch > 0 && (env >> (ch - 1)) & 1 == 1 { -1.0 } else { 1.0 })
        .collect()
}

/// Renders one `[C, H, W]` image.
pub fn render(cfg: &SynthConfig, class: usize, env: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = cfg.image_size;
    let sf = s as f32;
    let mut img = vec![0.0f32; cfg.image_len()];

    // environment texture
    let (theta, gain) = match cfg.texture {
        TextureMode::Oriented => (
            PI / 4.0 + PI * env as f32 / cfg.n_envs as f32 + rng.random_range(-0.15..0.15),
            channel_gain(cfg, env),
        ),
        TextureMode::ChannelMixing => (rng.random_range(0.0..PI), mixing_signs(cfg, env)),
    };
    let freq = rng.random_range(0.28f32..0.38);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut grating = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            grating[y * s + x] = (2.0 * PI * freq * (x as f32 * ct + y as f32 * st) + phase).sin();
        }
    }

    // class blob: elongated Gaussian whose orientation encodes the class
    let angle = PI * class as f32 / cfg.n_classes as f32;
    let (ca, sa) = (angle.cos(), angle.sin());
    let margin = sf * 0.25;
    let cx = rng.random_range(margin..sf - margin);
    let cy = rng.random_range(margin..sf - margin);
    let (long, short) = (sf * 0.18, sf * 0.06);
    let mut blob = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let u = dx * ca + dy * sa;
            let v = -dx * sa + dy * ca;
            blob[y * s + x] = (-(u * u) / (2.0 * long * long) - (v * v) / (2.0 * short * short)).exp();
        }
    }

    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).expect("valid std");
    for ch in 0..cfg.channels {
        let plane = &mut img[ch * s * s..(ch + 1) * s * s];
        for (p, v) in plane.iter_mut().enumerate() {
            let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = cfg.env_texture_strength * gain[ch] * grating[p]
                + cfg.class_signal_strength * 2.0 * blob[p]
                + n;
        }
    }
    img
}

fn generate_split(cfg: &SynthConfig, split: Split, n: usize, rho: f64) -> Result<GroupedDataset> {
    let seed = derive_seed(cfg.seed, tag(split.name()));
    let samples = par::map_range(n, |i| {
        let mut rng = SeededRng::new(seed, i as u64).generator();
        draw_sample(cfg, rho, &mut rng)
    });
    let mut images = Vec::with_capacity(n * cfg.image_len());
    let mut labels = Vec::with_capacity(n);
    let mut envs = Vec::with_capacity(n);
    for s in samples {
        images.extend(s.image);
        labels.push(s.class);
        envs.push(s.env);
    }
    let ds = GroupedDataset {
        split,
        channels: cfg.channels,
        image_size: cfg.image_size,
        images,
        labels,
        n_classes: cfg.n_classes,
        true_envs: Some(envs),
        n_envs: cfg.n_envs,
        pseudo_envs: None,
        n_pseudo_envs: 0,
    };
    let rho_cfg = SynthConfig {
        majority_frac: rho,
        ..cfg.clone()
    };
    for ((e, k), count) in ds.group_counts(false)? {
        if count == 0 && rho_cfg.env_probability(k, e) > 0.0 {
            return Err(Error::Config(format!(
                "{} split of {n} samples left group (env {e}, class {k}) empty; increase the sample count",
                split.name()
            )));
        }
    }
    Ok(ds)
}

/// Generates train, validation, in-distribution test and shifted test splits.
/// The shifted split draws environments uniformly.
pub fn generate(cfg: &SynthConfig) -> Result<Splits> {
    cfg.validate()?;
    let uniform = 1.0 / cfg.n_envs as f64;
    Ok(Splits {
        train: generate_split(cfg, Split::Train, cfg.n_train, cfg.majority_frac)?,
        val: generate_split(cfg, Split::Val, cfg.n_val, cfg.majority_frac)?,
        test_ind: generate_split(cfg, Split::TestInd, cfg.n_test, cfg.majority_frac)?,
        test_shift: generate_split(cfg, Split::TestShift, cfg.n_test, uniform)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    y: usize,
    e: usize,
    split: String,
}

/// Writes `images.grtn`, `labels.csv` and `manifest.json` under `dir`.
pub fn save(dir: &Path, cfg: &SynthConfig, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total: usize = Split::ALL.iter().map(|&s| splits.get(s).len()).sum();
    let mut images = Vec::with_capacity(total * cfg.image_len());
    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| Error::Csv {
        path: labels_path.clone(),
        source: e,
    })?;
    let mut index = 0;
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let ds = splits.get(split);
        images.extend_from_slice(&ds.images);
        counts.insert(split.name().to_string(), ds.len());
        let envs = ds.true_envs.as_ref().expect("generated splits carry true envs");
        for (&y, &e) in ds.labels.iter().zip(envs) {
            w.serialize(LabelRow {
                index,
                y,
                e,
                split: split.name().into(),
            })
            .map_err(|e| Error::Csv {
                path: labels_path.clone(),
                source: e,
            })?;
            index += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    Tensor::new(
        vec![total, cfg.channels, cfg.image_size, cfg.image_size],
        images,
    )?
    .save(dir.join("images.grtn"))?;
    let manifest = DatasetManifest {
        schema_version: crate::SCHEMA_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        counts,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads a dataset directory written by [`save`].
pub fn load(dir: &Path) -> Result<(SynthConfig, Splits)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let cfg = manifest.config;
    let tensor = Tensor::load(dir.join("images.grtn"))?;
    let shape = tensor.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!("images.grtn must be rank 4, got {shape:?}")));
    }
    let labels_path = dir.join("labels.csv");
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| Error::Csv {
        path: labels_path.clone(),
        source: e,
    })?;
    let rows: Vec<LabelRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Csv {
            path: labels_path.clone(),
            source: e,
        })?;
    if rows.len() != shape[0] {
        return Err(Error::DimensionMismatch {
            expected: shape[0],
            found: rows.len(),
        });
    }
    let image_len = shape[1] * shape[2] * shape[3];
    let data = tensor.data();
    let mut parts: BTreeMap<Split, (Vec<f32>, Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for row in &rows {
        let split = Split::parse(&row.split)?;
        if row.y >= cfg.n_classes || row.e >= cfg.n_envs {
            return Err(Error::invalid(format!("label out of range in row {}", row.index)));
        }
        let entry = parts.entry(split).or_default();
        entry
            .0
            .extend_from_slice(&data[row.index * image_len..(row.index + 1) * image_len]);
        entry.1.push(row.y);
        entry.2.push(row.e);
    }
    let mut take = |split: Split| {
        let (images, labels, envs) = parts.remove(&split).unwrap_or_default();
        GroupedDataset {
            split,
            channels: shape[1],
            image_size: shape[2],
            images,
            labels,
            n_classes: cfg.n_classes,
            true_envs: Some(envs),
            n_envs: cfg.n_envs,
            pseudo_envs: None,
            n_pseudo_envs: 0,
        }
    };
    let splits = Splits {
        train: take(Split::Train),
        val: take(Split::Val),
        test_ind: take(Split::TestInd),
        test_shift: take(Split::TestShift),
    };
    Ok((cfg, splits))
}

impl PartialOrd for Split {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Split {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

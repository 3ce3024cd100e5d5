//! ±1 random projection of style blocks to a lower dimension.
//!
//! Entry `(row, col)` of a [`ProjectionMatrix`] is bit `col` of ChaCha8 stream
//! `row` under the matrix seed, so any row can be regenerated on demand and
//! the full `ℓ0 × D` matrix never has to be held in memory.

use std::collections::HashSet;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, SeededRng};
use crate::stylefeat::StyleVector;

/// `⌊100 ln n⌋`, never below 8.
pub fn default_projection_dim(n: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "projection dimension needs at least 2 samples, got {n}"
        )));
    }
    Ok(((100.0 * (n as f64).ln()).floor() as usize).max(8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "projection matrix must be at least 1×1, got {rows}×{cols}"
            )));
        }
        Ok(Self { rows, cols, seed })
    }

    /// Output dimension `ℓ0`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Input dimension `D`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The sign at `(row, col)`, computed by seeking directly into the row stream.
    pub fn entry(&self, row: usize, col: usize) -> f32 {
        let mut rng = SeededRng::new(self.seed, row as u64).generator();
        rng.set_word_pos(2 * (col / 64) as u128);
        sign_of(rng.next_u64(), col % 64)
    }

    /// Writes row `row` into `out` (length `cols`).
    pub fn fill_row(&self, row: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.cols);
        let mut rng = SeededRng::new(self.seed, row as u64).generator();
        for chunk in out.chunks_mut(64) {
            let word = rng.next_u64();
            for (bit, v) in chunk.iter_mut().enumerate() {
                *v = sign_of(word, bit);
            }
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.rows as f64).sqrt()
    }

    /// `(1/√ℓ0) P f`.
    pub fn project(&self, f: &[f32]) -> Result<Vec<f32>> {
        Ok(self.project_many(&[f])?.pop().unwrap())
    }

    /// Projects every vector, generating each row of `P` once.
    pub fn project_many(&self, vecs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        for v in vecs {
            if v.len() != self.cols {
                return Err(Error::DimensionMismatch {
                    expected: self.cols,
                    found: v.len(),
                });
            }
        }
        let scale = self.scale();
        // each task owns a contiguous band of rows
        let band = 32usize;
        let bands = self.rows.div_ceil(band);
        let partial: Vec<Vec<f64>> = par::map_range(bands, |b| {
            let r0 = b * band;
            let r1 = (r0 + band).min(self.rows);
            let mut signs = vec![0.0f32; self.cols];
            let mut out = vec![0.0f64; (r1 - r0) * vecs.len()];
            for r in r0..r1 {
                self.fill_row(r, &mut signs);
                for (i, v) in vecs.iter().enumerate() {
                    out[(r - r0) * vecs.len() + i] = dot(&signs, v);
                }
            }
            out
        });
        let mut result = vec![vec![0.0f32; self.rows]; vecs.len()];
        for (b, chunk) in partial.iter().enumerate() {
            for (k, &v) in chunk.iter().enumerate() {
                let r = b * band + k / vecs.len();
                result[k % vecs.len()][r] = (v * scale) as f32;
            }
        }
        Ok(result)
    }
}

fn sign_of(word: u64, bit: usize) -> f32 {
    if (word >> bit) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

fn dot(signs: &[f32], v: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks_s = signs.chunks_exact(4);
    let mut chunks_v = v.chunks_exact(4);
    for (s, x) in (&mut chunks_s).zip(&mut chunks_v) {
        for k in 0..4 {
            acc[k] += (s[k] * x[k]) as f64;
        }
    }
    let tail: f64 = chunks_s
        .remainder()
        .iter()
        .zip(chunks_v.remainder())
        .map(|(s, x)| (s * x) as f64)
        .sum();
    acc.iter().sum::<f64>() + tail
}

/// Outcome of an empirical distance-preservation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub epsilon: f64,
    pub pairs_checked: usize,
    pub pairs_within_bound: usize,
}

impl DistortionReport {
    pub fn fraction_within(&self) -> f64 {
        if self.pairs_checked == 0 {
            1.0
        } else {
            self.pairs_within_bound as f64 / self.pairs_checked as f64
        }
    }
}

/// Counts sampled pairs whose projected distance lies within `(1 ± ε)` of the
/// original distance. All pairs are used when there are at most `max_pairs`.
pub fn distortion_check(
    p: &ProjectionMatrix,
    vecs: &[Vec<f32>],
    epsilon: f64,
    max_pairs: usize,
) -> Result<DistortionReport> {
    let n = vecs.len();
    if n < 2 {
        return Err(Error::invalid("distortion check needs at least 2 vectors"));
    }
    let refs: Vec<&[f32]> = vecs.iter().map(Vec::as_slice).collect();
    let projected = p.project_many(&refs)?;
    let pairs = sample_pairs(n, max_pairs, derive_seed(p.seed(), 0xd157));
    let within = pairs
        .iter()
        .filter(|&&(i, j)| {
            let d = distance(&vecs[i], &vecs[j]);
            if d == 0.0 {
                return true;
            }
            let dp = distance(&projected[i], &projected[j]);
            (1.0 - epsilon) * d <= dp && dp <= (1.0 + epsilon) * d
        })
        .count();
    Ok(DistortionReport {
        epsilon,
        pairs_checked: pairs.len(),
        pairs_within_bound: within,
    })
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn sample_pairs(n: usize, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * (n - 1) / 2;
    if total <= max_pairs {
        return (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
    }
    let mut rng = SeededRng::new(seed, 0).generator();
    let mut seen = HashSet::with_capacity(max_pairs);
    let mut out = Vec::with_capacity(max_pairs);
    while out.len() < max_pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let pair = (i.min(j), i.max(j));
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    out
}

/// Independent projections per style block, with seeds derived from one
/// master seed, so layer blocks never share a sign matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProjector {
    pub schema_version: u32,
    pub master_seed: u64,
    pub target_dim: usize,
    pub layer_ids: Vec<usize>,
    pub block_dims: Vec<usize>,
}

impl BlockProjector {
    pub fn new(master_seed: u64, target_dim: usize, layout: &StyleVector) -> Result<Self> {
        if target_dim == 0 {
            return Err(Error::invalid("projection dimension must be at least 1"));
        }
        Ok(Self {
            schema_version: crate::SCHEMA_VERSION,
            master_seed,
            target_dim,
            layer_ids: layout.spans().iter().map(|s| s.layer_id).collect(),
            block_dims: layout.spans().iter().map(|s| s.len).collect(),
        })
    }

    pub fn matrix(&self, block: usize) -> ProjectionMatrix {
        ProjectionMatrix {
            rows: self.target_dim,
            cols: self.block_dims[block],
            seed: derive_seed(self.master_seed, self.layer_ids[block] as u64),
        }
    }

    /// Output dimension `ℓ0 · S`.
    pub fn output_dim(&self) -> usize {
        self.target_dim * self.layer_ids.len()
    }

    /// Projects each style vector block by block and concatenates the results.
    pub fn project_all(&self, styles: &[StyleVector]) -> Result<Vec<Vec<f32>>> {
        let mut out = vec![Vec::with_capacity(self.output_dim()); styles.len()];
        for (b, &dim) in self.block_dims.iter().enumerate() {
            let mut blocks = Vec::with_capacity(styles.len());
            for s in styles {
                if s.num_blocks() != self.block_dims.len() || s.block(b).len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: if b < s.num_blocks() { s.block(b).len() } else { 0 },
                    });
                }
                blocks.push(s.block(b));
            }
            let projected = self.matrix(b).project_many(&blocks)?;
            for (o, p) in out.iter_mut().zip(projected) {
                o.extend(p);
            }
        }
        Ok(out)
    }
}

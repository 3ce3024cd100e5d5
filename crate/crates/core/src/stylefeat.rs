//! Style statistics of feature maps: normalized Gram matrices, channel-wise
//! mean/variance, and pooled penultimate activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activations of one layer for one image, `rows` spatial positions by `cols`
/// channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    layer_id: usize,
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(layer_id: usize, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "feature map of layer {layer_id} must have at least one row and column, got {rows}×{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                shape: vec![rows, cols],
                expected: rows * cols,
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            layer_id,
            rows,
            cols,
            values,
        })
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    /// Number of spatial positions.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of channels.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn channel_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (m, row) in self.values.chunks_exact(self.cols).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                out[c * self.rows + m] = v as f64;
            }
        }
        out
    }
}

/// Symmetric `channels × channels` second-moment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub channels: usize,
    pub values: Vec<f32>,
}

impl Gram {
    pub fn get(&self, a: usize, b: usize) -> f32 {
        self.values[a * self.channels + b]
    }

    pub fn trace(&self) -> f64 {
        (0..self.channels).map(|c| self.get(c, c) as f64).sum()
    }
}

/// `G = (1/M) φᵀφ`, accumulated in `f64`. The lower triangle is a copy of the
/// upper one, so the result is exactly symmetric.
pub fn gram(fm: &FeatureMap) -> Gram {
    let (m, c) = (fm.rows, fm.cols);
    let cols = fm.channel_major();
    let mut values = vec![0.0f32; c * c];
    let inv_m = 1.0 / m as f64;
    for a in 0..c {
        let col_a = &cols[a * m..(a + 1) * m];
        for b in a..c {
            let col_b = &cols[b * m..(b + 1) * m];
            let dot: f64 = col_a.iter().zip(col_b).map(|(x, y)| x * y).sum();
            let v = (dot * inv_m) as f32;
            values[a * c + b] = v;
            values[b * c + a] = v;
        }
    }
    Gram {
        channels: c,
        values,
    }
}

/// Which statistic a [`StyleVector`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    #[default]
    Gram,
    MeanVar,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub layer_id: usize,
    pub offset: usize,
    pub len: usize,
}

/// Concatenation of per-layer blocks, each ℓ2-normalized unless it was
/// identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector {
    spans: Vec<BlockSpan>,
    data: Vec<f32>,
    zero_blocks: usize,
}

impl StyleVector {
    fn from_blocks(blocks: Vec<(usize, Vec<f64>)>) -> Self {
        let mut spans = Vec::with_capacity(blocks.len());
        let mut data = Vec::new();
        let mut zero_blocks = 0;
        for (layer_id, block) in blocks {
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            spans.push(BlockSpan {
                layer_id,
                offset: data.len(),
                len: block.len(),
            });
            if norm > 0.0 {
                data.extend(block.iter().map(|v| (v / norm) as f32));
            } else {
                zero_blocks += 1;
                data.extend(std::iter::repeat_n(0.0, block.len()));
            }
        }
        if zero_blocks > 0 {
            log::warn!("{zero_blocks} style block(s) were identically zero and left unnormalized");
        }
        Self {
            spans,
            data,
            zero_blocks,
        }
    }

    /// Total dimension `D`.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn concat(&self) -> &[f32] {
        &self.data
    }

    pub fn into_concat(self) -> Vec<f32> {
        self.data
    }

    pub fn spans(&self) -> &[BlockSpan] {
        &self.spans
    }

    pub fn block(&self, i: usize) -> &[f32] {
        let s = self.spans[i];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn num_blocks(&self) -> usize {
        self.spans.len()
    }

    /// Count of blocks that were all zeros and therefore not normalized.
    pub fn zero_blocks(&self) -> usize {
        self.zero_blocks
    }
}

fn check_layers(fms: &[FeatureMap]) -> Result<()> {
    if fms.is_empty() {
        return Err(Error::invalid("at least one feature map is required"));
    }
    for (i, fm) in fms.iter().enumerate() {
        if fms[..i].iter().any(|o| o.layer_id == fm.layer_id) {
            return Err(Error::invalid(format!(
                "layer {} appears more than once",
                fm.layer_id
            )));
        }
    }
    Ok(())
}

/// Per-layer `vec(G_l) / ‖vec(G_l)‖`, concatenated in the given layer order.
pub fn style_vector(fms: &[FeatureMap]) -> Result<StyleVector> {
    check_layers(fms)?;
    let blocks = fms
        .iter()
        .map(|fm| {
            let g = gram(fm);
            (fm.layer_id, g.values.iter().map(|&v| v as f64).collect())
        })
        .collect();
    Ok(StyleVector::from_blocks(blocks))
}

/// Per layer, `(mean_1..mean_C, var_1..var_C)` over spatial positions with
/// population variance, each block ℓ2-normalized.
pub fn meanvar_vector(fms: &[FeatureMap]) -> Result<StyleVector> {
    check_layers(fms)?;
    let blocks = fms
        .iter()
        .map(|fm| {
            let m = fm.rows;
            let cols = fm.channel_major();
            let mut block = vec![0.0f64; 2 * fm.cols];
            for c in 0..fm.cols {
                let col = &cols[c * m..(c + 1) * m];
                let mean = col.iter().sum::<f64>() / m as f64;
                block[c] = mean;
                block[fm.cols + c] = if m >= 2 {
                    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64
                } else {
                    0.0
                };
            }
            (fm.layer_id, block)
        })
        .collect();
    Ok(StyleVector::from_blocks(blocks))
}

/// Spatially averaged channel vector of the last pooled layer, ℓ2-normalized.
pub fn penultimate_vector(fm: &FeatureMap) -> StyleVector {
    let mut sums = vec![0.0f64; fm.cols];
    for row in fm.values.chunks_exact(fm.cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let m = fm.rows as f64;
    sums.iter_mut().for_each(|s| *s /= m);
    StyleVector::from_blocks(vec![(fm.layer_id, sums)])
}

/// Dispatches on `kind`. `Penultimate` uses the last map in `fms`.
pub fn compute(kind: StyleKind, fms: &[FeatureMap]) -> Result<StyleVector> {
    match kind {
        StyleKind::Gram => style_vector(fms),
        StyleKind::MeanVar => meanvar_vector(fms),
        StyleKind::Penultimate => fms
            .last()
            .map(penultimate_vector)
            .ok_or_else(|| Error::invalid("at least one feature map is required")),
    }
}

/// JSON sidecar describing how a saved `[N, D]` style tensor is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleLayout {
    pub schema_version: u32,
    pub kind: StyleKind,
    pub layer_ids: Vec<usize>,
    pub blocks: Vec<BlockSpan>,
    pub dim: usize,
    pub zero_blocks: usize,
}

impl StyleLayout {
    pub fn describe(kind: StyleKind, sample: &StyleVector, zero_blocks: usize) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            kind,
            layer_ids: sample.spans.iter().map(|s| s.layer_id).collect(),
            blocks: sample.spans.clone(),
            dim: sample.dim(),
            zero_blocks,
        }
    }
}

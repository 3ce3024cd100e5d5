//! A small convolutional classifier with feature-map hooks.
//!
//! Architecture: three `3×3` stride-1 pad-1 convolutions (`C_in → 8 → 16 →
//! 32`), each followed by ReLU, then global average pooling and a linear head.
//! Layer ids `1..=3` name the post-ReLU outputs of the three convolutions.
//!
//! Activations are kept as `[batch · H · W, channels]` matrices so that every
//! convolution is one im2col + GEMM and a layer's activations for one image are
//! directly a `[M, C]` feature map.

mod checkpoint;
mod real;
mod sgdm;

use rand::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use real::Real;
pub use sgdm::{sgdm_step, Momentum, SgdmConfig};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stylefeat::FeatureMap;
use real::{gemm, Op};

/// Output channels of the three convolutions.
pub const WIDTHS: [usize; 3] = [8, 16, 32];
pub const NUM_LAYERS: usize = 3;
const TAPS: usize = 9;
const CHUNK_IMAGES: usize = 8;

/// Parameter names, in storage order.
pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "head.weight",
    "head.bias",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub image_size: usize,
    pub n_classes: usize,
}

impl Architecture {
    pub fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            WIDTHS[l - 1]
        }
    }

    pub fn positions(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Shapes of the parameters, in [`PARAM_NAMES`] order. Conv weights are
    /// `[9 · C_in, C_out]` with rows ordered by (tap, input channel).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (l, &w) in WIDTHS.iter().enumerate() {
            shapes.push(vec![TAPS * self.layer_in(l), w]);
            shapes.push(vec![w]);
        }
        shapes.push(vec![WIDTHS[NUM_LAYERS - 1], self.n_classes]);
        shapes.push(vec![self.n_classes]);
        shapes
    }

    pub fn describe(&self) -> String {
        format!(
            "conv3x3p1:{}-{}-{}-{};relu;gap;linear:{}-{};hw:{}",
            self.in_channels, WIDTHS[0], WIDTHS[1], WIDTHS[2], WIDTHS[2], self.n_classes, self.image_size
        )
    }

    fn fan_in(&self, param: usize) -> usize {
        let shape = &self.param_shapes()[param];
        shape[0]
    }
}

/// Parameters or gradients, one buffer per entry of [`PARAM_NAMES`].
pub type ParamSet<T> = Vec<Vec<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<T: Real> {
    arch: Architecture,
    params: ParamSet<T>,
}

/// Activations retained by a training forward pass.
pub struct Trace<T: Real> {
    batch: usize,
    /// `[batch · HW, in_channels]` network input.
    input: Vec<T>,
    /// Post-ReLU outputs, one per convolution.
    acts: Vec<Vec<T>>,
    pooled: Vec<T>,
    /// `[batch, n_classes]`.
    pub logits: Vec<T>,
}

impl<T: Real> Trace<T> {
    pub fn logits_of(&self, b: usize, k: usize) -> &[T] {
        &self.logits[b * k..(b + 1) * k]
    }
}

impl<T: Real> ConvNet<T> {
    /// He-uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let shapes = arch.param_shapes();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                if i % 2 == 1 {
                    return vec![T::zero(); n];
                }
                let bound = (6.0 / arch.fan_in(i) as f64).sqrt();
                let mut rng = SeededRng::new(seed, i as u64).generator();
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            })
            .collect();
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| vec![T::zero(); s.iter().product()])
            .collect();
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: ParamSet<T>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&shapes) {
            let n: usize = s.iter().product();
            if p.len() != n {
                return Err(Error::ShapeMismatch {
                    shape: s.clone(),
                    expected: n,
                    found: p.len(),
                });
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Converts to another element type.
    pub fn cast<U: Real>(&self) -> ConvNet<U> {
        ConvNet {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| U::of(v.to_f64().unwrap())).collect())
                .collect(),
        }
    }

    fn check_images(&self, images: &[&[f32]]) -> Result<()> {
        let want = self.arch.in_channels * self.arch.positions();
        for img in images {
            if img.len() != want {
                return Err(Error::DimensionMismatch {
                    expected: want,
                    found: img.len(),
                });
            }
        }
        Ok(())
    }

    /// `[C, H, W]` images to `[B · HW, C]`.
    fn input_matrix(&self, images: &[&[f32]]) -> Vec<T> {
        let c = self.arch.in_channels;
        let hw = self.arch.positions();
        let mut x = vec![T::zero(); images.len() * hw * c];
        for (b, img) in images.iter().enumerate() {
            for ch in 0..c {
                for p in 0..hw {
                    x[(b * hw + p) * c + ch] = T::of(img[ch * hw + p] as f64);
                }
            }
        }
        x
    }

    /// Writes the `[n · HW, 9 · cin]` patch matrix of `n` images held in `x`
    /// (`[n · HW, cin]`) into `cols`. Out-of-image taps are zero.
    fn im2col(&self, x: &[T], n: usize, cin: usize, cols: &mut Vec<T>) {
        let s = self.arch.image_size as isize;
        let hw = self.arch.positions();
        let width = TAPS * cin;
        cols.resize(n * hw * width, T::zero());
        for b in 0..n {
            for y in 0..s {
                for xx in 0..s {
                    let row = b * hw + (y * s + xx) as usize;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for tap in 0..TAPS {
                        let (ny, nx) = (y + tap as isize / 3 - 1, xx + tap as isize % 3 - 1);
                        let out = &mut dst[tap * cin..(tap + 1) * cin];
                        if ny < 0 || ny >= s || nx < 0 || nx >= s {
                            out.fill(T::zero());
                        } else {
                            let src = (b * hw + (ny * s + nx) as usize) * cin;
                            out.copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
    }

    /// Adds the patch-matrix gradient `dcols` of `n` images into `dx`
    /// (`[n · HW, cin]`).
    fn col2im(&self, dcols: &[T], n: usize, cin: usize, dx: &mut [T]) {
        let s = self.arch.image_size as isize;
        let hw = self.arch.positions();
        let width = TAPS * cin;
        for b in 0..n {
            for y in 0..s {
                for xx in 0..s {
                    let row = b * hw + (y * s + xx) as usize;
                    let src = &dcols[row * width..(row + 1) * width];
                    for tap in 0..TAPS {
                        let (ny, nx) = (y + tap as isize / 3 - 1, xx + tap as isize % 3 - 1);
                        if ny < 0 || ny >= s || nx < 0 || nx >= s {
                            continue;
                        }
                        let dst = (b * hw + (ny * s + nx) as usize) * cin;
                        for (d, &g) in dx[dst..dst + cin].iter_mut().zip(&src[tap * cin..(tap + 1) * cin]) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }

    /// Image ranges processed together so patch matrices stay cache-sized.
    fn chunks(batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        (0..batch).step_by(CHUNK_IMAGES).map(move |b| b..(b + CHUNK_IMAGES).min(batch))
    }

    /// Runs the batch forward, keeping what the backward pass needs.
    /// Layers deeper than `depth` are skipped (and `logits` left empty) when
    /// `depth < NUM_LAYERS`.
    fn run(&self, images: &[&[f32]], depth: usize) -> Trace<T> {
        let batch = images.len();
        let hw = self.arch.positions();
        let rows = batch * hw;
        let input = self.input_matrix(images);
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(depth);
        let mut cols = Vec::new();
        for l in 0..depth {
            let cin = self.arch.layer_in(l);
            let cout = WIDTHS[l];
            let x = if l == 0 { &input } else { &acts[l - 1] };
            let (w, bias) = (&self.params[2 * l], &self.params[2 * l + 1]);
            let mut z = vec![T::zero(); rows * cout];
            for r in 0..rows {
                z[r * cout..(r + 1) * cout].copy_from_slice(bias);
            }
            for c in Self::chunks(batch) {
                let (r0, r1) = (c.start * hw, c.end * hw);
                self.im2col(&x[r0 * cin..r1 * cin], c.len(), cin, &mut cols);
                gemm(r1 - r0, TAPS * cin, cout, &cols, Op::N, w, Op::N, &mut z[r0 * cout..r1 * cout], true);
            }
            for v in z.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            acts.push(z);
        }
        let x = acts.last().expect("depth is at least one");
        let (mut pooled, mut logits) = (Vec::new(), Vec::new());
        if depth == NUM_LAYERS {
            let c = WIDTHS[NUM_LAYERS - 1];
            let k = self.arch.n_classes;
            pooled = vec![T::zero(); batch * c];
            let inv = T::one() / T::of(hw as f64);
            for b in 0..batch {
                let dst = &mut pooled[b * c..(b + 1) * c];
                for p in 0..hw {
                    let src = &x[(b * hw + p) * c..(b * hw + p + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
                dst.iter_mut().for_each(|d| *d = *d * inv);
            }
            logits = vec![T::zero(); batch * k];
            for b in 0..batch {
                logits[b * k..(b + 1) * k].copy_from_slice(&self.params[7]);
            }
            gemm(batch, c, k, &pooled, Op::N, &self.params[6], Op::N, &mut logits, true);
        }
        Trace {
            batch,
            input,
            acts,
            pooled,
            logits,
        }
    }

    /// Training forward pass over a batch of `[C, H, W]` images.
    pub fn forward_train(&self, images: &[&[f32]]) -> Result<Trace<T>> {
        self.check_images(images)?;
        if images.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        Ok(self.run(images, NUM_LAYERS))
    }

    /// Logits for one image.
    pub fn forward(&self, image: &[f32]) -> Result<Vec<T>> {
        Ok(self.forward_train(&[image])?.logits)
    }

    /// Predicted classes, evaluated in chunks of `chunk` images.
    pub fn predict(&self, images: &[&[f32]], chunk: usize) -> Result<Vec<usize>> {
        self.check_images(images)?;
        let k = self.arch.n_classes;
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let t = self.run(part, NUM_LAYERS);
            for b in 0..part.len() {
                out.push(argmax(t.logits_of(b, k)));
            }
        }
        Ok(out)
    }

    /// Post-ReLU feature maps `[H·W, C_l]` of the requested layers for each image.
    pub fn extract_features_batch(
        &self,
        images: &[&[f32]],
        layer_ids: &[usize],
    ) -> Result<Vec<Vec<FeatureMap>>> {
        self.check_images(images)?;
        if let Some(&bad) = layer_ids.iter().find(|&&l| l == 0 || l > NUM_LAYERS) {
            return Err(Error::invalid(format!(
                "unknown layer id {bad}; valid ids are 1..={NUM_LAYERS}"
            )));
        }
        let depth = layer_ids.iter().copied().max().unwrap_or(0);
        let hw = self.arch.positions();
        if images.is_empty() || depth == 0 {
            return Ok(vec![Vec::new(); images.len()]);
        }
        let t = self.run(images, depth);
        let mut out = vec![Vec::with_capacity(layer_ids.len()); images.len()];
        for &l in layer_ids {
            let c = WIDTHS[l - 1];
            let act = &t.acts[l - 1];
            for (b, maps) in out.iter_mut().enumerate() {
                let values: Vec<f32> = act[b * hw * c..(b + 1) * hw * c]
                    .iter()
                    .map(|v| v.to_f32().unwrap())
                    .collect();
                maps.push(FeatureMap::new(l, hw, c, values)?);
            }
        }
        Ok(out)
    }

    pub fn extract_features(&self, image: &[f32], layer_ids: &[usize]) -> Result<Vec<FeatureMap>> {
        Ok(self
            .extract_features_batch(&[image], layer_ids)?
            .pop()
            .unwrap())
    }

    /// Gradients of `Σ_b ⟨dlogits_b, logits_b⟩` with respect to every parameter.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[T]) -> ParamSet<T> {
        let batch = trace.batch;
        let hw = self.arch.positions();
        let rows = batch * hw;
        let k = self.arch.n_classes;
        let c_last = WIDTHS[NUM_LAYERS - 1];
        let mut grads: ParamSet<T> = self.params.iter().map(|p| vec![T::zero(); p.len()]).collect();

        gemm(c_last, batch, k, &trace.pooled, Op::T, dlogits, Op::N, &mut grads[6], false);
        for b in 0..batch {
            for (g, &d) in grads[7].iter_mut().zip(&dlogits[b * k..(b + 1) * k]) {
                *g = *g + d;
            }
        }
        let mut dpooled = vec![T::zero(); batch * c_last];
        gemm(batch, k, c_last, dlogits, Op::N, &self.params[6], Op::T, &mut dpooled, false);

        let inv = T::one() / T::of(hw as f64);
        let mut dx = vec![T::zero(); rows * c_last];
        for b in 0..batch {
            let src = &dpooled[b * c_last..(b + 1) * c_last];
            for p in 0..hw {
                for (d, &g) in dx[(b * hw + p) * c_last..(b * hw + p + 1) * c_last].iter_mut().zip(src) {
                    *d = g * inv;
                }
            }
        }
        let mut cols = Vec::new();
        for l in (0..NUM_LAYERS).rev() {
            let cin = self.arch.layer_in(l);
            let cout = WIDTHS[l];
            let act = &trace.acts[l];
            for (d, &a) in dx.iter_mut().zip(act) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let x = if l == 0 { &trace.input } else { &trace.acts[l - 1] };
            let mut dprev = if l > 0 { vec![T::zero(); rows * cin] } else { Vec::new() };
            for c in Self::chunks(batch) {
                let (r0, r1) = (c.start * hw, c.end * hw);
                let dxc = &dx[r0 * cout..r1 * cout];
                self.im2col(&x[r0 * cin..r1 * cin], c.len(), cin, &mut cols);
                gemm(TAPS * cin, r1 - r0, cout, &cols, Op::T, dxc, Op::N, &mut grads[2 * l], true);
                if l > 0 {
                    gemm(r1 - r0, cout, TAPS * cin, dxc, Op::N, &self.params[2 * l], Op::T, &mut cols, false);
                    self.col2im(&cols, c.len(), cin, &mut dprev[r0 * cin..r1 * cin]);
                }
            }
            let gb = &mut grads[2 * l + 1];
            for r in 0..rows {
                for (g, &d) in gb.iter_mut().zip(&dx[r * cout..(r + 1) * cout]) {
                    *g = *g + d;
                }
            }
            if l > 0 {
                dx = dprev;
            }
        }
        grads
    }

    /// Per-sample cross-entropy losses and predictions for a traced batch.
    pub fn cross_entropy(&self, trace: &Trace<T>, labels: &[usize]) -> (Vec<T>, Vec<usize>) {
        let k = self.arch.n_classes;
        labels
            .iter()
            .enumerate()
            .map(|(b, &y)| {
                let z = trace.logits_of(b, k);
                (log_sum_exp(z) - z[y], argmax(z))
            })
            .unzip()
    }

    /// Gradient of `Σ_b w_b · ℓ_b` with respect to the logits.
    pub fn weighted_dlogits(&self, trace: &Trace<T>, labels: &[usize], weights: &[T]) -> Vec<T> {
        let k = self.arch.n_classes;
        let mut d = vec![T::zero(); trace.batch * k];
        for (b, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            let z = trace.logits_of(b, k);
            let lse = log_sum_exp(z);
            for j in 0..k {
                let p = (z[j] - lse).exp();
                let target = if j == y { T::one() } else { T::zero() };
                d[b * k + j] = w * (p - target);
            }
        }
        d
    }

    /// Mean softmax cross-entropy over the batch and its gradients.
    pub fn loss_and_grads(&self, images: &[&[f32]], labels: &[usize]) -> Result<(T, ParamSet<T>)> {
        if images.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: images.len(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.arch.n_classes) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        let trace = self.forward_train(images)?;
        let (losses, _) = self.cross_entropy(&trace, labels);
        let w = T::one() / T::of(images.len() as f64);
        let loss = losses.iter().fold(T::zero(), |a, &l| a + l) * w;
        let weights = vec![w; images.len()];
        let d = self.weighted_dlogits(&trace, labels, &weights);
        Ok((loss, self.backward(&trace, &d)))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, images: &[&[f32]], labels: &[usize]) -> Result<T> {
        let trace = self.forward_train(images)?;
        let (losses, _) = self.cross_entropy(&trace, labels);
        Ok(losses.iter().fold(T::zero(), |a, &l| a + l) / T::of(images.len() as f64))
    }
}

fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    m + z.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

//! Browser bindings for three small demos: the Gram matrix of a synthetic
//! image, random-projection distortion, and k-means on 2-D points.

use gramclust::clustering::{kmeans, KMeansParams, Points};
use gramclust::nets::{Architecture, ConvNet, WIDTHS};
use gramclust::projection::ProjectionMatrix;
use gramclust::rng::SeededRng;
use gramclust::stylefeat::gram;
use gramclust::synthdata::{render, SynthConfig};
use wasm_bindgen::prelude::*;

const IMAGE_SIZE: usize = 16;

fn demo_config() -> SynthConfig {
    SynthConfig {
        image_size: IMAGE_SIZE,
        ..SynthConfig::default()
    }
}

/// `[3, 16, 16]` synthetic image for a class and environment.
pub fn image(seed: u64, class: usize, env: usize) -> Vec<f32> {
    let cfg = demo_config();
    let mut rng = SeededRng::new(seed, 0).generator();
    render(&cfg, class % cfg.n_classes, env % cfg.n_envs, &mut rng)
}

/// Row-major `C × C` Gram matrix of `layer` (1..=3) for [`image`], computed
/// with an untrained network initialized from `net_seed`.
pub fn gram_of(seed: u64, class: usize, env: usize, layer: usize, net_seed: u64) -> Result<Vec<f32>, String> {
    let cfg = demo_config();
    let arch = Architecture {
        in_channels: cfg.channels,
        image_size: cfg.image_size,
        n_classes: cfg.n_classes,
    };
    let net = ConvNet::<f32>::new(arch, net_seed);
    let img = image(seed, class, env);
    let maps = net.extract_features(&img, &[layer]).map_err(|e| e.to_string())?;
    Ok(gram(&maps[0]).values)
}

/// Squared-distance ratios after projection for every pair of `n` random
/// unit vectors in `dim` dimensions.
pub fn distortion_ratios(n: usize, dim: usize, target_dim: usize, seed: u64) -> Result<Vec<f64>, String> {
    use rand_distr::{Distribution, StandardNormal};
    let p = ProjectionMatrix::new(target_dim, dim, seed).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(seed, 1).generator();
    let vecs: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let refs: Vec<&[f32]> = vecs.iter().map(Vec::as_slice).collect();
    let proj = p.project_many(&refs).map_err(|e| e.to_string())?;
    let sq = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(sq(&proj[i], &proj[j]) / sq(&vecs[i], &vecs[j]));
        }
    }
    Ok(out)
}

/// Cluster index per point for interleaved `x, y` coordinates.
pub fn cluster_2d(xy: &[f32], k: usize, seed: u64) -> Result<Vec<u32>, String> {
    let pts = Points::new(xy, 2).map_err(|e| e.to_string())?;
    let c = kmeans(&pts, &KMeansParams::new(k, seed)).map_err(|e| e.to_string())?;
    Ok(c.assignments.into_iter().map(|a| a as u32).collect())
}

#[wasm_bindgen]
pub fn demo_image(seed: u32, class: u32, env: u32) -> Vec<f32> {
    image(seed as u64, class as usize, env as usize)
}

#[wasm_bindgen]
pub fn demo_gram(seed: u32, class: u32, env: u32, layer: u32, net_seed: u32) -> Result<Vec<f32>, JsValue> {
    gram_of(seed as u64, class as usize, env as usize, layer as usize, net_seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn layer_width(layer: u32) -> u32 {
    WIDTHS.get((layer as usize).wrapping_sub(1)).map_or(0, |&w| w as u32)
}

#[wasm_bindgen]
pub fn demo_distortion(n: u32, dim: u32, target_dim: u32, seed: u32) -> Result<Vec<f64>, JsValue> {
    distortion_ratios(n as usize, dim as usize, target_dim as usize, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn demo_kmeans(xy: Vec<f32>, k: u32, seed: u32) -> Result<Vec<u32>, JsValue> {
    cluster_2d(&xy, k as usize, seed as u64).map_err(|e| JsValue::from_str(&e))
}

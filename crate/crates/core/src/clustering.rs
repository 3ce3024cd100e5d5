//! k-means partitioning of projected style vectors into pseudo-environments.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Row-major `n × dim` view over a set of points.
#[derive(Debug, Clone, Copy)]
pub struct Points<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values cannot be split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Flattens equal-length rows into one buffer, returning it with the row width.
pub fn flatten(rows: &[Vec<f32>]) -> Result<(Vec<f32>, usize)> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.len(),
            });
        }
        data.extend_from_slice(r);
    }
    Ok((data, dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    /// Zero-based cluster index per point.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step, in order.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

fn sq_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(p: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(points: &Points, stop_at: usize) -> usize {
    let mut seen = HashSet::new();
    for i in 0..points.len() {
        let key: Vec<u32> = points
            .get(i)
            .iter()
            // fold -0.0 into 0.0
            .map(|v| (v + 0.0).to_bits())
            .collect();
        seen.insert(key);
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

/// k-means++ seeding: the first centre uniformly, each next one with
/// probability proportional to squared distance from the closest chosen centre.
fn plus_plus_init(points: &Points, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed, 0).generator();
    let n = points.len();
    let to_f64 = |i: usize| points.get(i).iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut centres = vec![to_f64(rng.random_range(0..n))];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.get(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        // at least one point has d > 0 because there are ≥ k distinct points
        let pick = pick.expect("a point at positive distance exists");
        let c = to_f64(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.get(i), &c));
        }
        centres.push(c);
    }
    centres
}

fn assign(points: &Points, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let idx: Vec<usize> = (0..points.len()).collect();
    par::map(&idx, |_, &i| nearest(points.get(i), centroids))
        .into_iter()
        .unzip()
}

/// Means of the assigned points, summed in point order.
fn update(points: &Points, assignments: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points.dim();
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(points.get(i)) {
            *s += v as f64;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its own centroid into each empty cluster.
/// Only points from clusters with more than one member are eligible.
fn repair_empty(
    points: &Points,
    assignments: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
    counts: &mut [usize],
) {
    for empty in 0..counts.len() {
        if counts[empty] > 0 {
            continue;
        }
        let far = (0..assignments.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .fold(None::<(usize, f64)>, |best, i| match best {
                Some((_, d)) if d >= dists[i] => best,
                _ => Some((i, dists[i])),
            });
        let Some((i, _)) = far else { return };
        counts[assignments[i]] -= 1;
        counts[empty] = 1;
        assignments[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = points.get(i).iter().map(|&v| v as f64).collect();
    }
}

fn sse(points: &Points, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.get(i), &centroids[a]))
        .sum()
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans(points: &Points, params: &KMeansParams) -> Result<Clustering> {
    let k = params.k;
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::InsufficientDistinctPoints { distinct: n, k });
    }
    let distinct = count_distinct(points, k);
    if distinct < k {
        return Err(Error::InsufficientDistinctPoints { distinct, k });
    }

    let mut centroids = plus_plus_init(points, k, params.seed);
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let (mut next, mut counts) = update(points, &assignments, k);
        if counts.contains(&0) {
            repair_empty(points, &mut assignments, &mut dists, &mut next, &mut counts);
            let (means, _) = update(points, &assignments, k);
            next = means;
        }
        centroids = next;
        let (a, d) = assign(points, &centroids);
        assignments = a;
        dists = d;
        let inertia: f64 = dists.iter().sum();
        let prev = *history.last().unwrap();
        history.push(inertia);
        if prev <= 0.0 || (prev - inertia) / prev < params.tol {
            break;
        }
    }

    // final means; a cluster left empty by the last assignment is repaired first
    let (mut means, mut counts) = update(points, &assignments, k);
    if counts.contains(&0) {
        repair_empty(points, &mut assignments, &mut dists, &mut means, &mut counts);
        means = update(points, &assignments, k).0;
    }
    let inertia = sse(points, &assignments, &means);
    Ok(Clustering {
        k,
        dim: points.dim(),
        centroids: means.iter().flatten().map(|&v| v as f32).collect(),
        assignments,
        inertia,
        iterations_run: iterations,
        inertia_history: history,
    })
}

/// Within-cluster sum of squared distances to the stored centroids.
pub fn inertia(points: &Points, clustering: &Clustering) -> f64 {
    (0..points.len())
        .map(|i| sq_dist_f32(points.get(i), clustering.centroid(clustering.assignments[i])))
        .sum()
}

/// `Σ_e (1/|C_e|) Σ_{i,j ∈ C_e} ‖f_i − f_j‖²` over ordered pairs, evaluated
/// directly from pairwise distances.
pub fn pairwise_objective(points: &Points, clustering: &Clustering) -> f64 {
    let mut members = vec![Vec::new(); clustering.k];
    for (i, &a) in clustering.assignments.iter().enumerate() {
        members[a].push(i);
    }
    members
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let mut s = 0.0;
            for (x, &i) in m.iter().enumerate() {
                for &j in &m[x + 1..] {
                    s += sq_dist_f32(points.get(i), points.get(j));
                }
            }
            2.0 * s / m.len() as f64
        })
        .sum()
}

/// Nearest-centroid index for each point; ties go to the lowest index.
pub fn assign_to_centroids(clustering: &Clustering, points: &Points) -> Result<Vec<usize>> {
    if points.dim() != clustering.dim {
        return Err(Error::DimensionMismatch {
            expected: clustering.dim,
            found: points.dim(),
        });
    }
    let centroids: Vec<Vec<f64>> = (0..clustering.k)
        .map(|c| clustering.centroid(c).iter().map(|&v| v as f64).collect())
        .collect();
    Ok(assign(points, &centroids).0)
}

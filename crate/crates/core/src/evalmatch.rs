//! Matching discovered environments to true ones, group accuracy metrics, and
//! the cluster-count / layer sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod sweep;

pub use sweep::{sweep_clusters, sweep_layers, ClusterSweepRow, LayerSweepRow};

/// Solves the maximum-weight assignment on a rectangular matrix.
///
/// Returns, for each row, the column it is matched to (`None` when the matrix
/// has more rows than columns and the row is left out), plus the total weight.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return (vec![None; rows], 0.0);
    }
    let n = rows.max(cols);
    let max_w = weights
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    // square cost matrix; padded cells have weight 0
    let cost = |i: usize, j: usize| -> f64 {
        let w = if i < rows && j < cols { weights[i][j] } else { 0.0 };
        max_w.max(0.0) - w
    };

    // Kuhn-Munkres with potentials, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j] - 1;
        if i < rows && j - 1 < cols {
            assignment[i] = Some(j - 1);
            total += weights[i][j - 1];
        }
    }
    (assignment, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `permutation[cluster]` is the true environment the cluster maps to.
    pub permutation: Vec<Option<usize>>,
    pub matching_accuracy: f64,
    /// `contingency[cluster][env]` sample counts.
    pub contingency: Vec<Vec<usize>>,
}

/// Matches pseudo labels to true labels with the Hungarian algorithm on their
/// contingency table. Samples in unmatched clusters count as mismatched.
pub fn hungarian_match(pseudo: &[usize], truth: &[usize]) -> Result<MatchResult> {
    if pseudo.len() != truth.len() || pseudo.is_empty() {
        return Err(Error::invalid(format!(
            "label vectors must be non-empty and aligned, got {} and {}",
            pseudo.len(),
            truth.len()
        )));
    }
    let rows = pseudo.iter().max().unwrap() + 1;
    let cols = truth.iter().max().unwrap() + 1;
    let mut contingency = vec![vec![0usize; cols]; rows];
    for (&p, &t) in pseudo.iter().zip(truth) {
        contingency[p][t] += 1;
    }
    let weights: Vec<Vec<f64>> = contingency
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();
    let (permutation, matched) = max_weight_assignment(&weights);
    Ok(MatchResult {
        permutation,
        matching_accuracy: matched / pseudo.len() as f64,
        contingency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstGroupAccuracy {
    pub worst: f64,
    pub average: f64,
    pub per_group: Vec<GroupAccuracy>,
}

/// Per-group accuracy over groups `0..n_groups`; `worst` is the minimum and
/// `average` the overall sample accuracy.
pub fn worst_group_accuracy(
    preds: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
) -> Result<WorstGroupAccuracy> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::invalid("predictions, labels and groups must align"));
    }
    let mut correct = vec![0usize; n_groups];
    let mut total = vec![0usize; n_groups];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        if g >= n_groups {
            return Err(Error::invalid(format!("group {g} out of range 0..{n_groups}")));
        }
        total[g] += 1;
        if p == y {
            correct[g] += 1;
        }
    }
    if let Some(group) = total.iter().position(|&t| t == 0) {
        return Err(Error::EmptyGroup { group });
    }
    let per_group: Vec<GroupAccuracy> = (0..n_groups)
        .map(|g| GroupAccuracy {
            group: g,
            correct: correct[g],
            total: total[g],
            accuracy: correct[g] as f64 / total[g] as f64,
        })
        .collect();
    let worst = per_group
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    let average = correct.iter().sum::<usize>() as f64 / preds.len() as f64;
    Ok(WorstGroupAccuracy {
        worst,
        average,
        per_group,
    })
}

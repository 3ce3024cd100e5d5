//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line per
//! criterion to stderr before asserting, and tests run one at a time so the
//! reported runtimes are not inflated by each other.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use gramclust::clustering::{inertia, kmeans, pairwise_objective, KMeansParams, Points};
use gramclust::evalmatch::{hungarian_match, sweep_clusters};
use gramclust::nets::{Architecture, ConvNet, PARAM_NAMES};
use gramclust::pipeline::{
    load_data, run_discovery, run_pipeline, select, DatasetSource, GroupSource, Method, PipelineConfig,
    PipelineReport,
};
use gramclust::projection::{default_projection_dim, ProjectionMatrix};
use gramclust::stylefeat::{gram, FeatureMap, StyleKind};
use gramclust::synthdata::{SynthConfig, TextureMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, pass: bool, name: &str, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {id:>2} {}: {name} | {detail} | {:.1}s\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    // direct write; libtest does not capture it
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn c01_gram_matches_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(101);
    let (mut max_err, mut max_diag_err, mut min_eig_rel) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut symmetric = true;
    for _ in 0..100 {
        let m = r.random_range(1..=64);
        let c = r.random_range(1..=32);
        let values: Vec<f32> = (0..m * c).map(|_| r.random_range(-1.0..1.0)).collect();
        let fm = FeatureMap::new(1, m, c, values.clone()).unwrap();
        let g = gram(&fm);
        let mut dense = vec![vec![0.0f64; c]; c];
        for a in 0..c {
            for b in 0..c {
                let mut s = 0.0f64;
                for row in 0..m {
                    s += values[row * c + a] as f64 * values[row * c + b] as f64;
                }
                let oracle = s / m as f64;
                max_err = max_err.max((g.get(a, b) as f64 - oracle).abs());
                symmetric &= g.get(a, b) == g.get(b, a);
                dense[a][b] = g.get(a, b) as f64;
            }
            let mean_sq = (0..m).map(|row| (values[row * c + a] as f64).powi(2)).sum::<f64>() / m as f64;
            max_diag_err = max_diag_err.max((g.get(a, a) as f64 - mean_sq).abs());
        }
        let scale = g.trace().max(1e-12);
        let min_eig = symmetric_eigenvalues(dense).into_iter().fold(f64::INFINITY, f64::min);
        min_eig_rel = min_eig_rel.min(min_eig / scale);
    }
    let elapsed = start.elapsed();
    let psd = min_eig_rel >= -1e-6;
    let pass = max_err <= 1e-6 && symmetric && psd && max_diag_err <= 1e-6 && elapsed.as_secs_f64() < 10.0;
    report(
        1,
        pass,
        "Gram correctness",
        &format!("max err {max_err:.2e}, symmetric {symmetric}, min eig/trace {min_eig_rel:.2e}, diag err {max_diag_err:.2e}"),
        elapsed,
    );
    assert!(pass);
}

fn unit_gaussian(r: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
    v.into_iter().map(|x| x / n).collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

#[test]
fn c02_projection_preserves_distances() {
    let _g = serial();
    let start = Instant::now();
    let (n, d, eps) = (500, 4096, 0.2);
    let l0 = default_projection_dim(n).unwrap();
    let mut r = rng(202);
    let vecs: Vec<Vec<f32>> = (0..n).map(|_| unit_gaussian(&mut r, d)).collect();
    let p = ProjectionMatrix::new(l0, d, 7).unwrap();
    let refs: Vec<&[f32]> = vecs.iter().map(Vec::as_slice).collect();
    let proj = p.project_many(&refs).unwrap();
    let pairs = 10_000;
    let mut within = 0;
    for _ in 0..pairs {
        let i = r.random_range(0..n);
        let j = loop {
            let j = r.random_range(0..n);
            if j != i {
                break j;
            }
        };
        let (orig, projected) = (sq_dist(&vecs[i], &vecs[j]), sq_dist(&proj[i], &proj[j]));
        if (1.0 - eps) * orig <= projected && projected <= (1.0 + eps) * orig {
            within += 1;
        }
    }
    let frac = within as f64 / pairs as f64;
    let f = unit_gaussian(&mut r, d);
    let mean_ratio = (0..200u64)
        .map(|seed| {
            let fp = ProjectionMatrix::new(l0, d, 1000 + seed).unwrap().project(&f).unwrap();
            fp.iter().map(|x| (*x as f64).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / 200.0;
    let elapsed = start.elapsed();
    let pass = l0 == 621 && frac >= 0.99 && (mean_ratio - 1.0).abs() <= 0.05 && elapsed.as_secs_f64() < 60.0;
    report(
        2,
        pass,
        "JL preservation",
        &format!("l0 {l0}, {:.2}% of pairs within 1±{eps}, mean norm ratio {mean_ratio:.4}", 100.0 * frac),
        elapsed,
    );
    assert!(pass);
}

fn random_points(r: &mut ChaCha8Rng, n: usize, dim: usize, centers: usize) -> Vec<f32> {
    let cs: Vec<Vec<f32>> = (0..centers).map(|_| (0..dim).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
    (0..n)
        .flat_map(|i| {
            let c = cs[i % centers].clone();
            c.into_iter().map(|v| {
                let z: f32 = StandardNormal.sample(&mut *r);
                v + z
            }).collect::<Vec<_>>()
        })
        .collect()
}

fn exhaustive_two_means(pts: &Points) -> f64 {
    let n = pts.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let mut sse = 0.0;
        for side in [true, false] {
            let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
            let mean: Vec<f64> = (0..pts.dim())
                .map(|k| members.iter().map(|&i| pts.get(i)[k] as f64).sum::<f64>() / members.len() as f64)
                .collect();
            sse += members
                .iter()
                .map(|&i| pts.get(i).iter().zip(&mean).map(|(x, m)| (*x as f64 - m).powi(2)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(sse);
    }
    best
}

#[test]
fn c03_kmeans_identities() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(303);
    let (mut max_rel, mut monotone, mut runs) = (0.0f64, true, 0);
    for t in 0..50u64 {
        let k = r.random_range(1..=6);
        let n = r.random_range(k.max(2)..=120);
        let dim = r.random_range(1..=8);
        let centers = r.random_range(1..=6);
        let data = random_points(&mut r, n, dim, centers);
        let pts = Points::new(&data, dim).unwrap();
        let c = kmeans(&pts, &KMeansParams::new(k, t)).unwrap();
        let obj = pairwise_objective(&pts, &c);
        max_rel = max_rel.max((obj - 2.0 * inertia(&pts, &c)).abs() / obj.max(1e-12));
        monotone &= c.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        runs += 1;
    }
    let mut worst_gap = 0.0f64;
    for t in 0..20u64 {
        let data = random_points(&mut r, 8, 2, 2);
        let pts = Points::new(&data, 2).unwrap();
        let opt = exhaustive_two_means(&pts);
        let c = kmeans(&pts, &KMeansParams::new(2, t)).unwrap();
        monotone &= c.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        runs += 1;
        worst_gap = worst_gap.max(c.inertia / opt.max(1e-12) - 1.0);
    }
    let elapsed = start.elapsed();
    let pass = max_rel <= 1e-6 && monotone && worst_gap <= 0.05 && elapsed.as_secs_f64() < 30.0;
    report(
        3,
        pass,
        "k-means identities",
        &format!("pairwise/inertia rel err {max_rel:.2e}, monotone over {runs} runs {monotone}, worst gap to optimum {:.2}%", 100.0 * worst_gap),
        elapsed,
    );
    assert!(pass);
}

fn best_by_enumeration(table: &[Vec<usize>]) -> usize {
    fn go(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == table.len() {
            return 0;
        }
        // a row may stay unmatched when there are more rows than columns
        let mut best = go(table, row + 1, used);
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                best = best.max(table[row][col] + go(table, row + 1, used));
                used[col] = false;
            }
        }
        best
    }
    go(table, 0, &mut vec![false; table[0].len()])
}

#[test]
fn c04_hungarian_matches_enumeration() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(404);
    let mut mismatches = 0;
    for _ in 0..200 {
        let rows = r.random_range(1..=5);
        let cols = r.random_range(1..=5);
        let n = r.random_range(1..=300);
        let mut pseudo: Vec<usize> = (0..n).map(|_| r.random_range(0..rows)).collect();
        let mut truth: Vec<usize> = (0..n).map(|_| r.random_range(0..cols)).collect();
        // pin the label ranges so the table is exactly rows × cols
        pseudo.push(rows - 1);
        truth.push(cols - 1);
        let m = hungarian_match(&pseudo, &truth).unwrap();
        let best = best_by_enumeration(&m.contingency);
        let got = (m.matching_accuracy * pseudo.len() as f64).round() as usize;
        let mut seen = vec![false; cols];
        let valid = m.permutation.iter().flatten().all(|&c| !std::mem::replace(&mut seen[c], true));
        if got != best || !valid {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed.as_secs_f64() < 10.0;
    report(4, pass, "Hungarian matching", &format!("{mismatches} of 200 tables differ from enumeration"), elapsed);
    assert!(pass);
}

#[test]
fn c05_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    // small enough that almost no ReLU in a 16×16 batch flips state
    let h = 1e-7;
    let (mut worst, mut where_) = (0.0f64, String::new());
    let mut failures = 0usize;
    let mut checked = 0usize;
    for (batch, size) in [(0u64, 16usize), (1, 8)] {
        let arch = Architecture {
            in_channels: 3,
            image_size: size,
            n_classes: 2,
        };
        let net = ConvNet::<f64>::new(arch, 50 + batch);
        let mut r = rng(60 + batch);
        let imgs: Vec<Vec<f32>> = (0..4).map(|_| (0..3 * size * size).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        let labels = [0, 1, 1, 0];
        let (_, grads) = net.loss_and_grads(&refs, &labels).unwrap();
        let mut probe = net.clone();
        for (p, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let orig = probe.params()[p][i];
                probe.params_mut()[p][i] = orig + h;
                let plus = probe.loss(&refs, &labels).unwrap();
                probe.params_mut()[p][i] = orig - h;
                let minus = probe.loss(&refs, &labels).unwrap();
                probe.params_mut()[p][i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let err = (fd - g[i]).abs();
                let scale = fd.abs().max(g[i].abs());
                checked += 1;
                if err > 1e-3 * scale + 1e-8 {
                    failures += 1;
                }
                let used = err / (1e-3 * scale + 1e-8);
                if used > worst {
                    worst = used;
                    where_ = format!("{}[{i}]", PARAM_NAMES[p]);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed.as_secs_f64() < 60.0;
    report(
        5,
        pass,
        "gradient check",
        &format!("{checked} entries, {failures} outside tolerance, worst error {worst:.2} of tolerance at {where_}"),
        elapsed,
    );
    assert!(pass);
}

fn discovery_matching(cfg: &PipelineConfig) -> f64 {
    let splits = load_data(cfg).unwrap();
    run_discovery(cfg, &splits, None).unwrap().report.val_matching_accuracy.unwrap()
}

#[test]
fn c06_discovery_matches_environments() {
    let _g = serial();
    let start = Instant::now();
    let acc = discovery_matching(&PipelineConfig::default());
    let elapsed = start.elapsed();
    let pass = acc >= 0.95 && elapsed.as_secs_f64() < 300.0;
    report(6, pass, "environment discovery", &format!("validation matching {acc:.4}"), elapsed);
    assert!(pass);
}

#[test]
fn c07_gram_beats_meanvar_on_channel_mixing() {
    let _g = serial();
    let start = Instant::now();
    let dataset = DatasetSource::Synth(SynthConfig {
        texture: TextureMode::ChannelMixing,
        ..SynthConfig::default()
    });
    let with_style = |style| PipelineConfig {
        dataset: dataset.clone(),
        style,
        ..PipelineConfig::default()
    };
    let g = discovery_matching(&with_style(StyleKind::Gram));
    let mv = discovery_matching(&with_style(StyleKind::MeanVar));
    let elapsed = start.elapsed();
    let pass = g - mv >= 0.20 && elapsed.as_secs_f64() < 300.0;
    report(
        7,
        pass,
        "Gram beats MeanVar on channel mixing",
        &format!("gram {g:.4}, meanvar {mv:.4}, gap {:.1} points", 100.0 * (g - mv)),
        elapsed,
    );
    assert!(pass, "gram {g} vs meanvar {mv}");
}

fn test_worst(report: &PipelineReport) -> f64 {
    report.selected.test.as_ref().unwrap().worst_group
}

/// Every file under `dir`, keyed by relative path. The manifest's timestamp
/// field is removed.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel == "manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("created_unix_secs");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Criteria 8 to 11 share the ERM baseline and the pseudo-group pipeline run.
#[test]
fn c08_to_c11_robust_training() {
    let _g = serial();
    let base = PipelineConfig::default();
    let erm_cfg = PipelineConfig {
        selection: GroupSource::True,
        ..base.clone()
    };
    let mut erm_cfg = erm_cfg;
    erm_cfg.robust.method = Method::Erm;
    let cv_cfg = base.clone();
    let mut dro_cfg = PipelineConfig {
        selection: GroupSource::True,
        ..base.clone()
    };
    dro_cfg.robust.train_groups = GroupSource::True;
    let dir = tempfile::tempdir().unwrap();
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));

    let start = Instant::now();
    let erm = run_pipeline(&erm_cfg, None).unwrap();
    let cv = run_pipeline(&cv_cfg, Some(&out_a)).unwrap();
    let dro = run_pipeline(&dro_cfg, None).unwrap();
    let elapsed = start.elapsed();
    let (e, c, d) = (test_worst(&erm), test_worst(&cv), test_worst(&dro));
    let pass8 = c >= e + 0.10 && (c - d).abs() <= 0.05 && elapsed.as_secs_f64() < 1200.0;
    report(
        8,
        pass8,
        "robustness gap closes",
        &format!("test worst-group: ERM {e:.4}, pseudo-group DRO {c:.4}, true-group DRO {d:.4}"),
        elapsed,
    );

    let start = Instant::now();
    let by_true = select(&cv.grid.cells, GroupSource::True).unwrap();
    let t = cv.grid.cells[by_true].test.as_ref().unwrap().worst_group;
    let pass9 = (c - t).abs() <= 0.05;
    report(
        9,
        pass9,
        "pseudo-group model selection",
        &format!(
            "pseudo-selected cell {} test worst {c:.4}, true-selected cell {by_true} test worst {t:.4}",
            cv.grid.best
        ),
        start.elapsed(),
    );

    let start = Instant::now();
    let rows = sweep_clusters(&cv_cfg, &[2, 4, 8], None).unwrap();
    let elapsed = start.elapsed();
    let worst_at = |k: usize| rows.iter().find(|r| r.k == k).and_then(|r| r.test_worst_group);
    let (k2, k8) = (worst_at(2), worst_at(8));
    let pass10 = match (k2, k8) {
        (Some(a), Some(b)) => (a - b).abs() <= 0.05 && b >= e && elapsed.as_secs_f64() < 1800.0,
        _ => false,
    };
    let detail = rows
        .iter()
        .map(|r| format!("k={} {}", r.k, r.test_worst_group.map_or("error".into(), |v| format!("{v:.4}"))))
        .collect::<Vec<_>>()
        .join(", ");
    report(10, pass10, "cluster-count robustness", &format!("test worst-group {detail}; ERM {e:.4}"), elapsed);

    let start = Instant::now();
    let again = run_pipeline(&cv_cfg, Some(&out_b)).unwrap();
    let (a, b) = (artifacts(&out_a), artifacts(&out_b));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let pass11 = a.len() == b.len()
        && differing.is_empty()
        && serde_json::to_vec(&cv).unwrap() == serde_json::to_vec(&again).unwrap();
    report(
        11,
        pass11,
        "determinism",
        &format!("{} artifacts compared, {} differ {differing:?}", a.len(), differing.len()),
        start.elapsed(),
    );

    assert!(pass8, "criterion 8");
    assert!(pass9, "criterion 9");
    assert!(pass10, "criterion 10: {rows:?}");
    assert!(pass11, "criterion 11: {differing:?}");
}

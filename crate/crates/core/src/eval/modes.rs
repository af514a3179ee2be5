use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::Serialize;

use crate::structured_gaussian::component_rng;
use crate::{Error, Result};

const VARIANCE_TARGET: f64 = 0.95;
const MAX_COMPONENTS: usize = 10;
const RESTARTS: u64 = 20;
const MAX_ITERS: usize = 300;

/// PCA plus k-means summary of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeAnalysis {
    /// Cluster per sample. Clusters are numbered by first appearance.
    pub assignments: Vec<usize>,
    /// Sample nearest each cluster mean, in PCA space.
    pub representatives: Vec<usize>,
    /// Explained-variance ratio of each retained component.
    pub explained_variance: Vec<f64>,
    /// Sample coordinates in the retained components, one row per sample.
    pub scores: Vec<Vec<f64>>,
}

/// Principal scores through the `N x N` Gram matrix of centred samples.
fn pca_scores(samples: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = samples.len();
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = d;
            gram[(j, i)] = d;
        }
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = vals.iter().sum();

    let mut keep = 1;
    if total > 0.0 {
        let mut acc = 0.0;
        keep = 0;
        for v in &vals {
            acc += v;
            keep += 1;
            if acc / total >= VARIANCE_TARGET || keep == MAX_COMPONENTS {
                break;
            }
        }
    }
    let ratios = vals[..keep]
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    // score of sample i on component k is u_ik * sqrt(lambda_k)
    let scores = (0..n)
        .map(|i| {
            (0..keep)
                .map(|k| eig.eigenvectors[(i, order[k])] * vals[k].sqrt())
                .collect()
        })
        .collect();
    (scores, ratios)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One k-means run from a k-means++ start. Returns (assignments, inertia).
fn kmeans_once<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centres: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centres.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centres.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    chosen = i;
                    break;
                }
                u -= di;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.push(points[pick].clone());
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, centre) in centres.iter().enumerate() {
                let d = dist2(p, centre);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in centre.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| dist2(p, &centres[a]))
        .sum();
    (assign, inertia)
}

/// Relabel clusters in order of first appearance.
fn canonical(assign: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    assign
        .iter()
        .map(|&a| match map.iter().find(|(from, _)| *from == a) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((a, to));
                to
            }
        })
        .collect()
}

/// PCA to 95% variance (at most ten components), then k-means with twenty
/// seeded k-means++ restarts keeping the lowest inertia.
pub fn analyze_modes(samples: &[Vec<f64>], n_clusters: usize, seed: u64) -> Result<ModeAnalysis> {
    if n_clusters == 0 || samples.len() < n_clusters {
        return Err(Error::InvalidConfig(format!(
            "{} samples cannot form {n_clusters} clusters",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: samples.iter().map(|s| s.len()).find(|&l| l != dim).unwrap_or(dim),
        });
    }
    let (scores, explained) = pca_scores(samples);

    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..RESTARTS {
        let mut rng = component_rng(seed, "modes/kmeans", restart);
        let (assign, inertia) = kmeans_once(&scores, n_clusters, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    let assignments = canonical(&best.expect("at least one restart").0);
    let clusters = assignments.iter().max().map_or(0, |m| m + 1);

    let k = scores[0].len();
    let representatives = (0..clusters)
        .map(|c| {
            let members: Vec<usize> = (0..samples.len()).filter(|&i| assignments[i] == c).collect();
            let mut mean = vec![0.0; k];
            for &i in &members {
                for (m, s) in mean.iter_mut().zip(&scores[i]) {
                    *m += s;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            let mut best = (members[0], f64::INFINITY);
            for &i in &members {
                let d = dist2(&scores[i], &mean);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();

    Ok(ModeAnalysis {
        assignments,
        representatives,
        explained_variance: explained,
        scores,
    })
}

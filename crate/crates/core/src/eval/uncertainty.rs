use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::tensor_grid::{warp_labels, DisplacementField, Grid, LabelVolume};
use crate::{Error, Result};

/// Per-voxel label frequencies over a set of label warps.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbabilities {
    grid: Grid,
    /// Sorted label ids, background included.
    labels: Vec<u16>,
    /// Voxel-major: `probs[v * labels.len() + k]`.
    probs: Vec<f64>,
}

impl LabelProbabilities {
    /// Mean of one-hot encodings of `warped`, over the label set `labels`.
    pub fn from_warped(warped: &[LabelVolume], labels: &[u16]) -> Result<Self> {
        let first = warped
            .first()
            .ok_or_else(|| Error::DegenerateEnsemble("no warped labels".into()))?;
        let grid = *first.grid();
        let mut labels = labels.to_vec();
        labels.sort_unstable();
        labels.dedup();
        let k = labels.len();
        let mut probs = vec![0.0; grid.num_voxels() * k];
        let share = 1.0 / warped.len() as f64;
        for w in warped {
            grid.ensure_same(w.grid())?;
            for (v, l) in w.labels().iter().enumerate() {
                let idx = labels.binary_search(l).map_err(|_| {
                    Error::InvalidConfig(format!("label {l} missing from the label set"))
                })?;
                probs[v * k + idx] += share;
            }
        }
        Ok(Self { grid, labels, probs })
    }

    /// Warp `moving` by each sample and aggregate.
    pub fn from_samples(moving: &LabelVolume, samples: &[DisplacementField], labels: &[u16]) -> Result<Self> {
        let warped = samples
            .iter()
            .map(|s| warp_labels(moving, s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_warped(&warped, labels)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn at(&self, voxel: usize) -> &[f64] {
        let k = self.labels.len();
        &self.probs[voxel * k..(voxel + 1) * k]
    }

    /// Probability of `label` at every voxel (zeros if it never occurs).
    pub fn of_label(&self, label: u16) -> Vec<f64> {
        match self.labels.binary_search(&label) {
            Ok(i) => (0..self.grid.num_voxels()).map(|v| self.at(v)[i]).collect(),
            Err(_) => vec![0.0; self.grid.num_voxels()],
        }
    }
}

/// `-sum_c p_c ln p_c` per voxel.
pub fn label_entropy(p: &LabelProbabilities) -> Vec<f64> {
    (0..p.grid.num_voxels())
        .map(|v| {
            p.at(v)
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| -x * x.ln())
                .sum()
        })
        .collect()
}

/// Unbiased per-voxel sample covariance of the displacement vectors, in mm².
/// Each entry is a row-major `D x D` matrix.
pub fn displacement_covariances(samples: &[DisplacementField]) -> Result<Vec<Vec<f64>>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::DegenerateEnsemble("no samples".into()))?;
    let grid = *first.grid();
    let d = first.channels();
    for s in samples {
        grid.ensure_same(s.grid())?;
    }
    let sp = grid.spacing();
    let n = samples.len() as f64;
    let denom = (n - 1.0).max(1.0);
    Ok((0..grid.num_voxels())
        .map(|v| {
            let mut mean = [0.0; 3];
            for s in samples {
                for (c, m) in mean.iter_mut().enumerate().take(d) {
                    *m += s.at(v, c) * sp[c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut cov = vec![0.0; d * d];
            for s in samples {
                for a in 0..d {
                    let da = s.at(v, a) * sp[a] - mean[a];
                    for b in 0..d {
                        cov[a * d + b] += da * (s.at(v, b) * sp[b] - mean[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= denom);
            cov
        })
        .collect())
}

const DET_FLOOR: f64 = 1e-12;

/// Gaussian entropy `0.5 ln((2 pi e)^D det C)` of one covariance, `det` floored.
pub fn gaussian_entropy(cov: &[f64]) -> f64 {
    let d = (cov.len() as f64).sqrt().round() as usize;
    let det = DMatrix::from_row_slice(d, d, cov).determinant().max(DET_FLOOR);
    0.5 * (d as f64 * (2.0 * PI * std::f64::consts::E).ln() + det.ln())
}

pub fn displacement_entropy(samples: &[DisplacementField]) -> Result<Vec<f64>> {
    Ok(displacement_covariances(samples)?
        .iter()
        .map(|c| gaussian_entropy(c))
        .collect())
}

/// Binary expected calibration error over the masked voxels, equal-width bins.
pub fn ece(prob: &[f64], truth: &[bool], mask: &[bool], bins: usize) -> f64 {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    let mut total = 0usize;
    for i in 0..prob.len() {
        if !mask[i] {
            continue;
        }
        let p = prob[i].clamp(0.0, 1.0);
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += truth[i] as u8 as f64;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            n / total as f64 * (acc[b] / n - conf[b] / n).abs()
        })
        .sum()
}

const AUSE_STEPS: usize = 20;

fn kept_error_curve(order: &[usize], error: &[f64]) -> Vec<f64> {
    let n = order.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, &o) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + error[o];
    }
    (0..AUSE_STEPS)
        .map(|i| {
            let keep = n - i * n / AUSE_STEPS;
            prefix[keep] / keep as f64
        })
        .collect()
}

/// Sparsification curve minus the oracle curve at removal fractions
/// `0, 0.05, ..., 0.95`.
pub fn sparsification_gap(uncertainty: &[f64], error: &[f64], mask: &[bool]) -> Vec<f64> {
    let idx: Vec<usize> = (0..uncertainty.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return vec![0.0; AUSE_STEPS];
    }
    let mut by_unc = idx.clone();
    by_unc.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    let mut by_err = idx;
    by_err.sort_by(|&a, &b| error[a].total_cmp(&error[b]).then(a.cmp(&b)));
    let curve = kept_error_curve(&by_unc, error);
    let oracle = kept_error_curve(&by_err, error);
    curve.iter().zip(&oracle).map(|(c, o)| c - o).collect()
}

/// Area between the uncertainty-ordered and error-ordered sparsification curves.
pub fn ause(uncertainty: &[f64], error: &[f64], mask: &[bool]) -> f64 {
    let gap = sparsification_gap(uncertainty, error, mask);
    gap.iter().sum::<f64>() / gap.len() as f64
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation with average ranks for ties. NaN when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

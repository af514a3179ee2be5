//! Windowed squared normalised cross-correlation.
//!
//! Windows are clipped at the image border, so every statistic is taken over
//! in-bounds voxels only and constant images correlate to zero everywhere.

use crate::tensor_grid::{Grid, Volume};
use crate::Result;

/// Clipped box sum of edge `2 * half + 1`, applied separably.
pub(crate) struct BoxFilter {
    grid: Grid,
    half: usize,
    counts: Vec<f64>,
}

impl BoxFilter {
    pub(crate) fn new(grid: Grid, window: usize) -> Self {
        let half = window / 2;
        let dims = grid.dims();
        let extent = |p: usize, n: usize| -> f64 {
            let lo = p.saturating_sub(half);
            let hi = (p + half).min(n - 1);
            (hi - lo + 1) as f64
        };
        let counts = (0..grid.num_voxels())
            .map(|v| {
                let c = grid.coords(v);
                (0..3).map(|a| extent(c[a], dims[a])).product()
            })
            .collect();
        Self { grid, half, counts }
    }

    pub(crate) fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub(crate) fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut cur = values.to_vec();
        let mut scratch = vec![0.0; values.len()];
        let mut prefix = Vec::new();
        let dims = self.grid.dims();
        let strides = self.grid.strides();
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                continue;
            }
            let stride = strides[a];
            prefix.resize(n + 1, 0.0);
            for start in 0..values.len() {
                if self.grid.coords(start)[a] != 0 {
                    continue;
                }
                prefix[0] = 0.0;
                for i in 0..n {
                    prefix[i + 1] = prefix[i] + cur[start + i * stride];
                }
                for i in 0..n {
                    let lo = i.saturating_sub(self.half);
                    let hi = (i + self.half).min(n - 1);
                    scratch[start + i * stride] = prefix[hi + 1] - prefix[lo];
                }
            }
            std::mem::swap(&mut cur, &mut scratch);
        }
        cur
    }
}

/// Per-voxel window statistics for one (fixed, warped) pair.
pub(crate) struct NccStats {
    /// cc^2 per voxel.
    pub cc: Vec<f64>,
    mean_i: Vec<f64>,
    mean_j: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

pub(crate) fn ncc_stats(filter: &BoxFilter, fixed: &[f64], warped: &[f64], eps: f64) -> NccStats {
    let nv = fixed.len();
    let ii: Vec<f64> = fixed.iter().map(|v| v * v).collect();
    let jj: Vec<f64> = warped.iter().map(|v| v * v).collect();
    let ij: Vec<f64> = fixed.iter().zip(warped).map(|(a, b)| a * b).collect();
    let si = filter.apply(fixed);
    let sj = filter.apply(warped);
    let sii = filter.apply(&ii);
    let sjj = filter.apply(&jj);
    let sij = filter.apply(&ij);
    let counts = filter.counts();

    let mut cc = vec![0.0; nv];
    let mut mean_i = vec![0.0; nv];
    let mut mean_j = vec![0.0; nv];
    let mut alpha = vec![0.0; nv];
    let mut beta = vec![0.0; nv];
    for v in 0..nv {
        let n = counts[v];
        let ui = si[v] / n;
        let uj = sj[v] / n;
        let cross = sij[v] - si[v] * uj;
        let ivar = (sii[v] - si[v] * ui).max(0.0);
        let jvar = (sjj[v] - sj[v] * uj).max(0.0);
        let b = ivar + eps;
        let c = jvar + eps;
        cc[v] = cross * cross / (b * c);
        mean_i[v] = ui;
        mean_j[v] = uj;
        alpha[v] = 2.0 * cross / (b * c);
        beta[v] = 2.0 * cross * cross / (b * c * c);
    }
    NccStats {
        cc,
        mean_i,
        mean_j,
        alpha,
        beta,
    }
}

impl NccStats {
    /// Gradient of `sum_x cc(x)` with respect to each warped intensity.
    pub(crate) fn grad_sum_wrt_warped(
        &self,
        filter: &BoxFilter,
        fixed: &[f64],
        warped: &[f64],
    ) -> Vec<f64> {
        let a_ui: Vec<f64> = self.alpha.iter().zip(&self.mean_i).map(|(a, u)| a * u).collect();
        let b_uj: Vec<f64> = self.beta.iter().zip(&self.mean_j).map(|(b, u)| b * u).collect();
        let box_a = filter.apply(&self.alpha);
        let box_aui = filter.apply(&a_ui);
        let box_b = filter.apply(&self.beta);
        let box_buj = filter.apply(&b_uj);
        (0..fixed.len())
            .map(|y| fixed[y] * box_a[y] - box_aui[y] - warped[y] * box_b[y] + box_buj[y])
            .collect()
    }
}

/// Mean over voxels of the squared local correlation coefficient, in `[0, 1]`.
pub fn local_ncc(fixed: &Volume, warped: &Volume, window: usize, eps: f64) -> Result<f64> {
    fixed.grid().ensure_same(warped.grid())?;
    let filter = BoxFilter::new(*fixed.grid(), window);
    let stats = ncc_stats(&filter, fixed.values(), warped.values(), eps);
    Ok(stats.cc.iter().sum::<f64>() / stats.cc.len() as f64)
}

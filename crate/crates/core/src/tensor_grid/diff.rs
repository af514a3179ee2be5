//! Spatial differencing of displacement fields.

use super::grid::{DisplacementField, Grid};

/// Forward differences `z(x + e_a) - z(x)` for each axis `a`.
///
/// Each axis block has the same interleaved layout as the field. The last
/// slice along each axis is zero (no wraparound).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardDiff {
    channels: usize,
    axes: [Vec<f64>; 3],
}

impl ForwardDiff {
    pub fn axis(&self, a: usize) -> &[f64] {
        &self.axes[a]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.axes.iter().flatten().map(|d| d * d).sum()
    }
}

pub fn spatial_forward_diff(field: &DisplacementField) -> ForwardDiff {
    let grid = field.grid();
    let ch = field.channels();
    let dims = grid.dims();
    let strides = grid.strides();
    let data = field.as_slice();
    let axes = std::array::from_fn(|a| {
        let mut out = vec![0.0; data.len()];
        for v in 0..grid.num_voxels() {
            let c = grid.coords(v);
            if c[a] + 1 < dims[a] {
                let w = v + strides[a];
                for k in 0..ch {
                    out[v * ch + k] = data[w * ch + k] - data[v * ch + k];
                }
            }
        }
        out
    });
    ForwardDiff { channels: ch, axes }
}

/// Jacobian determinant of `x + z(x)` per voxel, central differences inside
/// and one-sided at the boundary. Axes of extent one contribute identity rows.
pub fn jacobian_determinants(field: &DisplacementField) -> Vec<f64> {
    let grid = field.grid();
    let ch = field.channels();
    let d = ch.min(3);
    (0..grid.num_voxels())
        .map(|v| {
            let mut j = [[0.0; 3]; 3];
            for (c, row) in j.iter_mut().enumerate().take(d) {
                for (a, entry) in row.iter_mut().enumerate().take(d) {
                    *entry = derivative(grid, field, v, c, a) + if a == c { 1.0 } else { 0.0 };
                }
            }
            match d {
                1 => j[0][0],
                2 => j[0][0] * j[1][1] - j[0][1] * j[1][0],
                _ => det3(&j),
            }
        })
        .collect()
}

#[inline]
fn derivative(grid: &Grid, field: &DisplacementField, v: usize, c: usize, a: usize) -> f64 {
    let n = grid.dims()[a];
    if n == 1 {
        return 0.0;
    }
    let stride = grid.strides()[a];
    let pos = grid.coords(v)[a];
    let ch = field.channels();
    let at = |w: usize| field.as_slice()[w * ch + c];
    if pos == 0 {
        at(v + stride) - at(v)
    } else if pos == n - 1 {
        at(v) - at(v - stride)
    } else {
        (at(v + stride) - at(v - stride)) / 2.0
    }
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Fraction of voxels whose Jacobian determinant is non-positive.
pub fn jacobian_fold_fraction(field: &DisplacementField) -> f64 {
    let dets = jacobian_determinants(field);
    dets.iter().filter(|&&d| d <= 0.0).count() as f64 / dets.len() as f64
}

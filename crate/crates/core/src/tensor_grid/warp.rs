//! Resampling of images through a displacement field, `I_m(x + z(x))`.
//!
//! Sample positions outside the grid are clamped to the edge voxel; the
//! derivative across a clamped axis is zero.

use super::grid::{DisplacementField, Grid, LabelVolume, Volume};
use crate::Result;

#[derive(Debug, Clone, Copy)]
struct AxisSample {
    i0: usize,
    i1: usize,
    frac: f64,
    /// False when the position was clamped (or the axis is a single voxel).
    differentiable: bool,
}

#[inline]
fn axis_sample(p: f64, n: usize) -> AxisSample {
    if n == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            frac: 0.0,
            differentiable: false,
        };
    }
    let max = (n - 1) as f64;
    let differentiable = (0.0..=max).contains(&p);
    let pc = p.clamp(0.0, max);
    let i0 = (pc.floor() as usize).min(n - 2);
    AxisSample {
        i0,
        i1: i0 + 1,
        frac: pc - i0 as f64,
        differentiable,
    }
}

#[inline]
fn axis_samples(grid: &Grid, p: [f64; 3]) -> [AxisSample; 3] {
    let d = grid.dims();
    [
        axis_sample(p[0], d[0]),
        axis_sample(p[1], d[1]),
        axis_sample(p[2], d[2]),
    ]
}

/// Trilinear value and its derivative with respect to the sample position.
#[inline]
fn trilinear(values: &[f64], grid: &Grid, p: [f64; 3]) -> (f64, [f64; 3]) {
    let [sx, sy, sz] = axis_samples(grid, p);
    let at = |x: usize, y: usize, z: usize| values[grid.index(x, y, z)];
    let c000 = at(sx.i0, sy.i0, sz.i0);
    let c100 = at(sx.i1, sy.i0, sz.i0);
    let c010 = at(sx.i0, sy.i1, sz.i0);
    let c110 = at(sx.i1, sy.i1, sz.i0);
    let c001 = at(sx.i0, sy.i0, sz.i1);
    let c101 = at(sx.i1, sy.i0, sz.i1);
    let c011 = at(sx.i0, sy.i1, sz.i1);
    let c111 = at(sx.i1, sy.i1, sz.i1);
    let (fx, fy, fz) = (sx.frac, sy.frac, sz.frac);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);

    let c00 = c000 * gx + c100 * fx;
    let c10 = c010 * gx + c110 * fx;
    let c01 = c001 * gx + c101 * fx;
    let c11 = c011 * gx + c111 * fx;
    let c0 = c00 * gy + c10 * fy;
    let c1 = c01 * gy + c11 * fy;
    let value = c0 * gz + c1 * fz;

    let mut grad = [0.0; 3];
    if sx.differentiable {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        grad[0] = (d00 * gy + d10 * fy) * gz + (d01 * gy + d11 * fy) * fz;
    }
    if sy.differentiable {
        grad[1] = (c10 - c00) * gz + (c11 - c01) * fz;
    }
    if sz.differentiable {
        grad[2] = c1 - c0;
    }
    (value, grad)
}

#[inline]
fn sample_position(grid: &Grid, field: &DisplacementField, voxel: usize) -> [f64; 3] {
    let c = grid.coords(voxel);
    let d = field.vector(voxel);
    [
        c[0] as f64 + d[0],
        c[1] as f64 + d[1],
        c[2] as f64 + d[2],
    ]
}

/// Warp an intensity image with trilinear (bilinear in 2-D) interpolation.
pub fn warp_intensity(moving: &Volume, field: &DisplacementField) -> Result<Volume> {
    let grid = *moving.grid();
    grid.ensure_same(field.grid())?;
    let values = moving.values();
    let out = (0..grid.num_voxels())
        .map(|v| trilinear(values, &grid, sample_position(&grid, field, v)).0)
        .collect();
    Volume::new(grid, out)
}

/// Warp a label map with nearest-neighbour sampling; exact halves round down.
pub fn warp_labels(moving: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    let grid = *moving.grid();
    grid.ensure_same(field.grid())?;
    let dims = grid.dims();
    let labels = moving.labels();
    let nearest = |p: f64, n: usize| -> usize {
        let r = (p - 0.5).ceil();
        r.clamp(0.0, (n - 1) as f64) as usize
    };
    let out = (0..grid.num_voxels())
        .map(|v| {
            let p = sample_position(&grid, field, v);
            let x = nearest(p[0], dims[0]);
            let y = nearest(p[1], dims[1]);
            let z = nearest(p[2], dims[2]);
            labels[grid.index(x, y, z)]
        })
        .collect();
    LabelVolume::new(grid, out)
}

/// Gradient of `sum_x upstream(x) * warped(x)` with respect to the field.
pub fn warp_gradient(
    moving: &Volume,
    field: &DisplacementField,
    upstream: &[f64],
) -> Result<DisplacementField> {
    let grid = *moving.grid();
    grid.ensure_same(field.grid())?;
    if upstream.len() != grid.num_voxels() {
        return Err(crate::Error::DimensionMismatch {
            expected: grid.num_voxels(),
            actual: upstream.len(),
        });
    }
    let ch = field.channels();
    let mut out = DisplacementField::zeros_with_channels(grid, ch);
    let values = moving.values();
    let data = out.as_mut_slice();
    for (v, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        let (_, g) = trilinear(values, &grid, sample_position(&grid, field, v));
        for c in 0..ch {
            data[v * ch + c] = u * g[c];
        }
    }
    Ok(out)
}

/// Warped image together with its spatial derivative at every sample position.
pub(crate) fn warp_with_derivative(
    moving: &Volume,
    field: &DisplacementField,
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let grid = *moving.grid();
    grid.ensure_same(field.grid())?;
    let values = moving.values();
    Ok((0..grid.num_voxels())
        .map(|v| trilinear(values, &grid, sample_position(&grid, field, v)))
        .unzip())
}

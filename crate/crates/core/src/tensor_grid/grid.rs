use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A regular voxel lattice with physical spacing (mm per axis).
///
/// Linear voxel index is `(z * ny + y) * nx + x`, x fastest. Two-dimensional
/// grids are represented with `nz == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spaced grid.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn cube(n: usize) -> Self {
        Self::with_dims([n, n, n]).expect("cube grid must have n >= 1")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Spatial dimensionality: 2 when the z extent is a single slice.
    pub fn ndim(&self) -> usize {
        if self.dims[2] == 1 {
            2
        } else {
            3
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }
}

/// Scalar intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    values: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_voxels() {
            return Err(Error::DimensionMismatch {
                expected: grid.num_voxels(),
                actual: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_voxels()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let values = (0..grid.num_voxels()).map(|i| f(grid.coords(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Integer label map (0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != grid.num_voxels() {
            return Err(Error::DimensionMismatch {
                expected: grid.num_voxels(),
                actual: labels.len(),
            });
        }
        Ok(Self { grid, labels })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> u16) -> Self {
        let labels = (0..grid.num_voxels()).map(|i| f(grid.coords(i))).collect();
        Self { grid, labels }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted foreground labels present in the volume.
    pub fn structures(&self) -> Vec<u16> {
        let mut present = vec![false; self.max_label() as usize + 1];
        for &l in &self.labels {
            present[l as usize] = true;
        }
        (1..present.len())
            .filter(|&l| present[l])
            .map(|l| l as u16)
            .collect()
    }

    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

/// Dense displacement field in voxel units.
///
/// Stored voxel-major with channels interleaved: component `c` of voxel `v`
/// lives at `v * channels + c`. This is the `vec(Z)` ordering used by the
/// structured Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl DisplacementField {
    /// Zero field with one channel per spatial axis.
    pub fn zeros(grid: Grid) -> Self {
        Self::zeros_with_channels(grid, grid.ndim())
    }

    pub fn zeros_with_channels(grid: Grid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid.num_voxels() * channels],
        }
    }

    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || channels > 3 {
            return Err(Error::InvalidGrid(format!(
                "displacement fields carry 1..=3 channels, got {channels}"
            )));
        }
        let expected = grid.num_voxels() * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("displacement field has non-finite values".into()));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    /// Field with the grid's natural channel count.
    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self> {
        Self::new(grid, grid.ndim(), data)
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let channels = grid.ndim();
        let mut data = Vec::with_capacity(grid.num_voxels() * channels);
        for i in 0..grid.num_voxels() {
            let d = f(grid.coords(i));
            data.extend_from_slice(&d[..channels]);
        }
        Self {
            grid,
            channels,
            data,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, voxel: usize, channel: usize) -> f64 {
        self.data[voxel * self.channels + channel]
    }

    /// Displacement of a voxel padded to three components.
    #[inline]
    pub fn vector(&self, voxel: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        out[..self.channels]
            .copy_from_slice(&self.data[voxel * self.channels..(voxel + 1) * self.channels]);
        out
    }

    /// Mean Euclidean length in mm over all voxels.
    pub fn mean_norm_mm(&self) -> f64 {
        let sp = self.grid.spacing();
        let n = self.grid.num_voxels();
        let total: f64 = (0..n)
            .map(|v| {
                let d = self.vector(v);
                (0..3).map(|a| (d[a] * sp[a]).powi(2)).sum::<f64>().sqrt()
            })
            .sum();
        total / n as f64
    }

    /// Mean endpoint error against another field, in mm.
    pub fn endpoint_error_mm(&self, other: &DisplacementField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let diff: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DisplacementField {
            grid: self.grid,
            channels: self.channels,
            data: diff,
        }
        .mean_norm_mm())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Voxel-wise mean of a non-empty set of fields on the same grid.
    pub fn mean_of(fields: &[DisplacementField]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidConfig("mean of zero fields".into()))?;
        let mut acc = vec![0.0; first.data.len()];
        for f in fields {
            first.grid.ensure_same(&f.grid)?;
            for (a, v) in acc.iter_mut().zip(&f.data) {
                *a += v;
            }
        }
        let k = fields.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(Self {
            grid: first.grid,
            channels: first.channels,
            data: acc,
        })
    }
}

//! Binary 8-bit PGM export of axial slices.

use std::fs;
use std::path::Path;

use crate::tensor_grid::{DisplacementField, Volume};
use crate::{Error, Result};

/// A `width x height` grey image, row-major, top row first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Slice {
    /// Min-max normalise `values` to 0..=255. A constant image maps to 0.
    pub fn normalized(width: usize, height: usize, values: &[f64]) -> Self {
        let (lo, hi) = values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| {
                if !v.is_finite() || !(span > 0.0) {
                    0
                } else {
                    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                }
            })
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

fn check_z(z: usize, nz: usize) -> Result<()> {
    if z >= nz {
        return Err(Error::InvalidConfig(format!("slice {z} outside 0..{nz}")));
    }
    Ok(())
}

/// Axial slice `z` of a volume: x runs across, y down.
pub fn axial_slice(vol: &Volume, z: usize) -> Result<Slice> {
    let g = vol.grid();
    let [nx, ny, nz] = g.dims();
    check_z(z, nz)?;
    let vals: Vec<f64> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .map(|(x, y)| vol.values()[g.index(x, y, z)])
        .collect();
    Ok(Slice::normalized(nx, ny, &vals))
}

/// Axial slice of one displacement channel, or of the vector magnitude when
/// `channel` is `None`.
pub fn axial_field_slice(field: &DisplacementField, z: usize, channel: Option<usize>) -> Result<Slice> {
    let g = field.grid();
    let [nx, ny, nz] = g.dims();
    check_z(z, nz)?;
    if let Some(c) = channel {
        if c >= field.channels() {
            return Err(Error::InvalidConfig(format!(
                "channel {c} outside 0..{}",
                field.channels()
            )));
        }
    }
    let vals: Vec<f64> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .map(|(x, y)| {
            let v = g.index(x, y, z);
            match channel {
                Some(c) => field.at(v, c),
                None => field.vector(v).iter().map(|d| d * d).sum::<f64>().sqrt(),
            }
        })
        .collect();
    Ok(Slice::normalized(nx, ny, &vals))
}

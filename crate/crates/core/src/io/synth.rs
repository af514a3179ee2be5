//! Synthetic image pairs with known deformations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::structured_gaussian::component_rng;
use crate::tensor_grid::{
    jacobian_fold_fraction, warp_intensity, warp_labels, DisplacementField, Grid, LabelVolume,
    Volume,
};
use crate::{Error, Result};

const MIN_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Random blobs on a textured background, warped by a smooth random field.
    Smooth,
    /// One central blob against two identical blobs placed symmetrically
    /// along x, so two translations explain the pair equally well.
    Bimodal,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smooth" => Ok(SynthKind::Smooth),
            "bimodal" => Ok(SynthKind::Bimodal),
            _ => Err(Error::InvalidConfig(format!("unknown synthetic kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: Volume,
    pub moving: Volume,
    /// `fixed = moving o z_true`.
    pub z_true: DisplacementField,
    pub labels_fixed: LabelVolume,
    pub labels_moving: LabelVolume,
    /// Every field that explains the pair equally well (bimodal: both
    /// translations; smooth: just `z_true`).
    pub alternatives: Vec<DisplacementField>,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    centre: [f64; 3],
    sigma: f64,
    amp: f64,
}

impl Blob {
    fn at(&self, c: [usize; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| (c[a] as f64 - self.centre[a]).powi(2)).sum();
        self.amp * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Label of the strongest blob whose response reaches half its peak, else 0.
fn blob_labels(grid: Grid, blobs: &[Blob], ids: &[u16]) -> LabelVolume {
    LabelVolume::from_fn(grid, |c| {
        let mut best = (0u16, 0.0);
        for (b, &id) in blobs.iter().zip(ids) {
            let v = b.at(c);
            if v >= 0.5 * b.amp && v > best.1 {
                best = (id, v);
            }
        }
        best.0
    })
}

pub fn synth_pair(kind: SynthKind, dims: [usize; 3], seed: u64) -> Result<SynthPair> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::InvalidGrid(format!(
            "synthetic pairs need at least {MIN_DIM} voxels per axis, got {dims:?}"
        )));
    }
    let grid = Grid::new(dims, [1.0; 3])?;
    match kind {
        SynthKind::Smooth => smooth(grid, seed),
        SynthKind::Bimodal => Ok(bimodal(grid)),
    }
}

fn smooth(grid: Grid, seed: u64) -> Result<SynthPair> {
    let mut rng = component_rng(seed, "synth/smooth", 0);
    let dims = grid.dims();
    let scale = *dims.iter().min().unwrap() as f64 / 32.0;
    let uniform_in = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
        [0, 1, 2].map(|a| rng.random_range(lo..hi) * (dims[a] - 1) as f64)
    };

    let n_blobs = rng.random_range(4..=8);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            centre: uniform_in(&mut rng, 0.2, 0.8),
            sigma: rng.random_range(2.0..3.5) * scale,
            amp: rng.random_range(0.6..1.0),
        })
        .collect();
    // low-frequency plane waves so that every region carries some texture
    let waves: Vec<([f64; 3], f64)> = (0..6)
        .map(|_| {
            let mut k = [0.0; 3];
            for v in &mut k {
                *v = rng.random_range(-1.0..1.0);
            }
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            let wavelength = rng.random_range(6.0..12.0) * scale;
            let f = std::f64::consts::TAU / wavelength / norm;
            (k.map(|v| v * f), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let moving = Volume::from_fn(grid, |c| {
        let bg: f64 = waves
            .iter()
            .map(|(k, ph)| 0.3 * (k[0] * c[0] as f64 + k[1] * c[1] as f64 + k[2] * c[2] as f64 + ph).sin())
            .sum();
        bg + blobs.iter().map(|b| b.at(c)).sum::<f64>()
    });
    let ids: Vec<u16> = (1..=n_blobs as u16).collect();
    let labels_moving = blob_labels(grid, &blobs, &ids);

    let bumps: Vec<([f64; 3], f64, [f64; 3])> = (0..3)
        .map(|_| {
            let centre = uniform_in(&mut rng, 0.25, 0.75);
            let width = rng.random_range(8.0..12.0) * scale;
            let mut v = [0.0; 3];
            for x in &mut v {
                *x = rng.random_range(-1.0..1.0);
            }
            (centre, width, v)
        })
        .collect();
    let raw = DisplacementField::from_fn(grid, |c| {
        let mut d = [0.0; 3];
        for (centre, w, v) in &bumps {
            let r2: f64 = (0..3).map(|a| (c[a] as f64 - centre[a]).powi(2)).sum();
            let g = (-r2 / (2.0 * w * w)).exp();
            for a in 0..3 {
                d[a] += v[a] * g;
            }
        }
        d
    });
    let peak = (0..grid.num_voxels())
        .map(|v| raw.vector(v).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut target_peak = rng.random_range(2.5..4.0);
    let z_true = loop {
        let z = raw.scaled(target_peak / peak.max(1e-12));
        if jacobian_fold_fraction(&z) == 0.0 {
            break z;
        }
        target_peak *= 0.8;
    };

    let fixed = warp_intensity(&moving, &z_true)?;
    let labels_fixed = warp_labels(&labels_moving, &z_true)?;
    Ok(SynthPair {
        fixed,
        moving,
        alternatives: vec![z_true.clone()],
        z_true,
        labels_fixed,
        labels_moving,
    })
}

fn bimodal(grid: Grid) -> SynthPair {
    let dims = grid.dims();
    let centre = dims.map(|n| (n - 1) as f64 / 2.0);
    let sigma = 1.5 * dims[0] as f64 / 16.0;
    // Half-peak radius. The offset is the smallest integer that keeps the
    // unwanted blob out of reach of either translation, so that each one
    // carries the labels of exactly one blob onto the fixed blob.
    let radius = sigma * (2.0 * std::f64::consts::LN_2).sqrt();
    let offset = ((centre[0] + radius) / 2.0).floor() + 1.0;
    let centred = Blob {
        centre,
        sigma,
        amp: 1.0,
    };
    let shifted = |s: f64| Blob {
        centre: [centre[0] + s, centre[1], centre[2]],
        ..centred
    };
    let pair = [shifted(offset), shifted(-offset)];
    let fixed = Volume::from_fn(grid, |c| centred.at(c));
    let moving = Volume::from_fn(grid, |c| pair[0].at(c) + pair[1].at(c));
    let labels_fixed = blob_labels(grid, &[centred], &[1]);
    let labels_moving = blob_labels(grid, &pair, &[1, 1]);
    let plus = DisplacementField::from_fn(grid, |_| [offset, 0.0, 0.0]);
    let minus = DisplacementField::from_fn(grid, |_| [-offset, 0.0, 0.0]);
    SynthPair {
        fixed,
        moving,
        z_true: plus.clone(),
        labels_fixed,
        labels_moving,
        alternatives: vec![plus, minus],
    }
}

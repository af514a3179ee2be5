use crate::tensor_grid::{warp_labels, DisplacementField, Grid, LabelVolume};
use crate::{Error, Result};

/// `2|A ∩ B| / (|A| + |B|)` for one label; 1.0 when both are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    Ok(dice_slices(a.labels(), b.labels(), label))
}

pub(crate) fn dice_slices(a: &[u16], b: &[u16], label: u16) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Mean Dice over `structures`.
pub fn mean_dice(a: &LabelVolume, b: &LabelVolume, structures: &[u16]) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    if structures.is_empty() {
        return Err(Error::InvalidConfig("no structures to score".into()));
    }
    let s: f64 = structures
        .iter()
        .map(|&l| dice_slices(a.labels(), b.labels(), l))
        .sum();
    Ok(s / structures.len() as f64)
}

/// Index of the sample whose label warp best matches the fixed labels, by mean
/// Dice over the fixed image's structures. Ties go to the lowest index.
pub fn oracle_select(
    samples: &[DisplacementField],
    fixed: &LabelVolume,
    moving: &LabelVolume,
) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::DegenerateEnsemble("no samples to select from".into()));
    }
    let structures = fixed.structures();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in samples.iter().enumerate() {
        let warped = warp_labels(moving, s)?;
        let d = mean_dice(fixed, &warped, &structures)?;
        if d > best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// `radius` rounds of 26-neighbourhood dilation, i.e. a cube of half-width
/// `radius` clipped at the border.
pub fn dilate_mask(mask: &[bool], grid: &Grid, radius: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    if radius == 0 {
        return cur;
    }
    let dims = grid.dims();
    let strides = grid.strides();
    let mut next = vec![false; cur.len()];
    for a in 0..3 {
        let n = dims[a];
        if n == 1 {
            continue;
        }
        let stride = strides[a];
        for start in 0..cur.len() {
            if grid.coords(start)[a] != 0 {
                continue;
            }
            // distance to the most recent set voxel, scanning both ways
            let mut last: Option<usize> = None;
            for i in 0..n {
                if cur[start + i * stride] {
                    last = Some(i);
                }
                next[start + i * stride] = matches!(last, Some(j) if i - j <= radius);
            }
            let mut last: Option<usize> = None;
            for i in (0..n).rev() {
                if cur[start + i * stride] {
                    last = Some(i);
                }
                if matches!(last, Some(j) if j - i <= radius) {
                    next[start + i * stride] = true;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

use serde::{Deserialize, Serialize};

use crate::tensor_grid::Grid;

/// Lower-triangular sparsity structure of the precision factor `L`.
///
/// Rows and columns follow `vec(Z)` ordering: voxel-major (x fastest) with the
/// channels of a voxel adjacent. Row `i` couples to every column `j <= i` whose
/// voxel lies within the `(2r+1)^d` stencil; only the lower instance of each
/// symmetric offset pair exists. Entries of a row are sorted by column with the
/// diagonal last.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    grid: Grid,
    channels: usize,
    kernel_radius: usize,
    cross_channel: bool,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kernel_radius: usize,
    pub cross_channel: bool,
}

impl PatternSpec {
    /// Independent per-component precision.
    pub const DIAGONAL: PatternSpec = PatternSpec {
        kernel_radius: 0,
        cross_channel: false,
    };

    /// 3x3x3 neighbourhood with cross-channel coupling.
    pub const STENCIL: PatternSpec = PatternSpec {
        kernel_radius: 1,
        cross_channel: true,
    };
}

impl SparsityPattern {
    pub fn build(grid: Grid, channels: usize, kernel_radius: usize, cross_channel: bool) -> Self {
        let n = grid.num_voxels() * channels;
        let dims = grid.dims();
        let r = kernel_radius as isize;
        // Offsets enumerated in lexicographic (dz, dy, dx) order, restricted to
        // those pointing at earlier voxels, so neighbour indices come out sorted.
        let mut offsets = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dz, dy, dx) < (0, 0, 0) {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for v in 0..grid.num_voxels() {
            let c = grid.coords(v);
            for ch in 0..channels {
                for off in &offsets {
                    let mut q = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        let p = c[a] as isize + off[a];
                        if p < 0 || p >= dims[a] as isize {
                            inside = false;
                            break;
                        }
                        q[a] = p as usize;
                    }
                    if !inside {
                        continue;
                    }
                    let w = grid.index(q[0], q[1], q[2]);
                    if cross_channel {
                        for k in 0..channels {
                            cols.push((w * channels + k) as u32);
                        }
                    } else {
                        cols.push((w * channels + ch) as u32);
                    }
                }
                if cross_channel {
                    for k in 0..ch {
                        cols.push((v * channels + k) as u32);
                    }
                }
                cols.push((v * channels + ch) as u32);
                row_ptr.push(cols.len());
            }
        }
        Self {
            grid,
            channels,
            kernel_radius,
            cross_channel,
            row_ptr,
            cols,
        }
    }

    pub fn from_spec(grid: Grid, channels: usize, spec: PatternSpec) -> Self {
        Self::build(grid, channels, spec.kernel_radius, spec.cross_channel)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spec(&self) -> PatternSpec {
        PatternSpec {
            kernel_radius: self.kernel_radius,
            cross_channel: self.cross_channel,
        }
    }

    /// Total dimension `n = channels * N_v`.
    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_ptr[row]..self.row_ptr[row + 1]
    }

    #[inline]
    pub fn col(&self, entry: usize) -> usize {
        self.cols[entry] as usize
    }

    #[inline]
    pub fn diag_entry(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - 1
    }

    pub fn is_diag(&self, entry: usize) -> bool {
        // rows are contiguous and end with their diagonal
        self.row_ptr[1..].binary_search(&(entry + 1)).is_ok()
    }

    /// Boolean mask over entries marking diagonals.
    pub fn diag_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nnz()];
        for row in 0..self.dim() {
            mask[self.diag_entry(row)] = true;
        }
        mask
    }

    /// `(row, col)` pairs in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.dim()).flat_map(move |row| self.row_range(row).map(move |e| (row, self.col(e))))
    }
}

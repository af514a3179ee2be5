use std::sync::Arc;

use nalgebra::DMatrix;

use super::pattern::SparsityPattern;
use crate::{Error, Result};

/// Numerically stable `log(1 + exp(u))`.
#[inline]
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`], the logistic function.
#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `d > 0`.
#[inline]
pub fn softplus_inv(d: f64) -> f64 {
    // log(exp(d) - 1) = d + log(1 - exp(-d))
    d + (-(-d).exp()).ln_1p()
}

/// Parameterisation of the sparse precision factor `L`.
///
/// One stored value per pattern entry. Diagonal entries hold the raw
/// pre-activation value and are mapped through softplus; off-diagonal
/// entries are used as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    /// Factor with unit effective diagonal and zero off-diagonals.
    pub fn identity(pattern: Arc<SparsityPattern>) -> Self {
        Self::scaled_identity(pattern, 1.0)
    }

    pub fn scaled_identity(pattern: Arc<SparsityPattern>, diag: f64) -> Self {
        let mut values = vec![0.0; pattern.nnz()];
        let raw = softplus_inv(diag);
        for row in 0..pattern.dim() {
            values[pattern.diag_entry(row)] = raw;
        }
        Self { pattern, values }
    }

    pub fn from_raw(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::DimensionMismatch {
                expected: pattern.nnz(),
                actual: values.len(),
            });
        }
        Ok(Self { pattern, values })
    }

    /// Build from effective entries; diagonals must be positive.
    pub fn from_effective(pattern: Arc<SparsityPattern>, effective: &[f64]) -> Result<Self> {
        if effective.len() != pattern.nnz() {
            return Err(Error::DimensionMismatch {
                expected: pattern.nnz(),
                actual: effective.len(),
            });
        }
        let mut values = effective.to_vec();
        for row in 0..pattern.dim() {
            let e = pattern.diag_entry(row);
            if !(effective[e] > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "diagonal entry of row {row} must be positive"
                )));
            }
            values[e] = softplus_inv(effective[e]);
        }
        Ok(Self { pattern, values })
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    /// Stored (raw) values in pattern order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Materialise the effective lower-triangular matrix.
    pub fn effective(&self) -> LowerFactor {
        let mut vals = self.values.clone();
        for row in 0..self.pattern.dim() {
            let e = self.pattern.diag_entry(row);
            vals[e] = softplus(vals[e]);
        }
        LowerFactor {
            pattern: Arc::clone(&self.pattern),
            vals,
        }
    }

    /// Convert a gradient with respect to effective entries into one with
    /// respect to the stored values (softplus chain rule on diagonals).
    pub fn chain_effective_grad(&self, grad: &mut [f64]) {
        for row in 0..self.pattern.dim() {
            let e = self.pattern.diag_entry(row);
            grad[e] *= sigmoid(self.values[e]);
        }
    }
}

/// Effective lower-triangular factor with positive diagonal.
#[derive(Debug, Clone)]
pub struct LowerFactor {
    pattern: Arc<SparsityPattern>,
    vals: Vec<f64>,
}

impl LowerFactor {
    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    pub fn diag(&self, row: usize) -> f64 {
        self.vals[self.pattern.diag_entry(row)]
    }

    /// `L v`.
    pub fn apply_l(&self, v: &[f64]) -> Vec<f64> {
        let p = &*self.pattern;
        (0..p.dim())
            .map(|i| p.row_range(i).map(|e| self.vals[e] * v[p.col(e)]).sum())
            .collect()
    }

    /// `L^T v`, by scattering each row of `L` into its columns.
    pub fn apply_lt(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply_lt_into(v, &mut out);
        out
    }

    pub fn apply_lt_into(&self, v: &[f64], out: &mut [f64]) {
        let p = &*self.pattern;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate().take(p.dim()) {
            if vi == 0.0 {
                continue;
            }
            for e in p.row_range(i) {
                out[p.col(e)] += self.vals[e] * vi;
            }
        }
    }

    /// `(L^T R)^T` for `rt = R^T`. Working on transposes keeps each row of `R`
    /// contiguous, so the scatter runs over whole rows at once.
    pub fn apply_lt_transposed(&self, rt: &DMatrix<f64>) -> DMatrix<f64> {
        let p = &*self.pattern;
        let r = rt.nrows();
        let src = rt.as_slice();
        let mut out = DMatrix::zeros(r, rt.ncols());
        let dst = out.as_mut_slice();
        for i in 0..p.dim().min(rt.ncols()) {
            let row = &src[i * r..(i + 1) * r];
            for e in p.row_range(i) {
                let v = self.vals[e];
                let j = p.col(e);
                for (o, x) in dst[j * r..(j + 1) * r].iter_mut().zip(row) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// Forward substitution: solves `L y = w`.
    pub fn solve_l(&self, w: &[f64]) -> Vec<f64> {
        let p = &*self.pattern;
        let mut y = vec![0.0; w.len()];
        for i in 0..p.dim() {
            let range = p.row_range(i);
            let diag = range.end - 1;
            let mut acc = w[i];
            for e in range.start..diag {
                acc -= self.vals[e] * y[p.col(e)];
            }
            y[i] = acc / self.vals[diag];
        }
        y
    }

    /// Back substitution: solves `L^T y = w`, sweeping rows of `L` in reverse.
    pub fn solve_lt(&self, w: &[f64]) -> Vec<f64> {
        let mut y = w.to_vec();
        self.solve_lt_in_place(&mut y);
        y
    }

    pub fn solve_lt_in_place(&self, y: &mut [f64]) {
        let p = &*self.pattern;
        for i in (0..p.dim()).rev() {
            let range = p.row_range(i);
            let diag = range.end - 1;
            let yi = y[i] / self.vals[diag];
            y[i] = yi;
            if yi == 0.0 {
                continue;
            }
            for e in range.start..diag {
                y[p.col(e)] -= self.vals[e] * yi;
            }
        }
    }

    /// `log det(L L^T) = 2 sum log diag(L)`.
    pub fn log_det_precision(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// Dense copy, for tests and small diagnostics.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (e, (i, j)) in self.pattern.entries().enumerate() {
            m[(i, j)] = self.vals[e];
        }
        m
    }
}

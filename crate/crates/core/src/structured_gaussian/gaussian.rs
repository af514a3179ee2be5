use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::factor::{sigmoid, CholeskyFactor, LowerFactor};
use super::noise::NoiseDraw;
use super::pattern::SparsityPattern;
use crate::tensor_grid::DisplacementField;
use crate::{Error, Result};

/// Gaussian `N(mu, R R^T + (L L^T)^-1)` over `vec(Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredGaussian {
    mean: Vec<f64>,
    chol: CholeskyFactor,
    lowrank: DMatrix<f64>,
}

/// Gradient with respect to every parameter of a [`StructuredGaussian`].
///
/// `chol` is with respect to the stored (raw) factor values, i.e. after the
/// softplus chain rule on diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec<f64>,
    pub chol: Vec<f64>,
    pub lowrank: DMatrix<f64>,
}

impl GaussianGrad {
    pub fn zeros(n: usize, nnz: usize, rank: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            chol: vec![0.0; nnz],
            lowrank: DMatrix::zeros(n, rank),
        }
    }

    pub fn zeros_like(q: &StructuredGaussian) -> Self {
        Self::zeros(q.dim(), q.chol.pattern().nnz(), q.rank())
    }

    pub fn add_assign(&mut self, other: &GaussianGrad) {
        add_into(&mut self.mean, &other.mean);
        add_into(&mut self.chol, &other.chol);
        self.lowrank += &other.lowrank;
    }

    pub fn scale(&mut self, s: f64) {
        self.mean.iter_mut().for_each(|v| *v *= s);
        self.chol.iter_mut().for_each(|v| *v *= s);
        self.lowrank *= s;
    }

    /// Flattened in [`StructuredGaussian::params_flat`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mean.len() + self.chol.len() + self.lowrank.len());
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.chol);
        out.extend_from_slice(self.lowrank.as_slice());
        out
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.mean.iter().map(|v| v * v).sum::<f64>()
            + self.chol.iter().map(|v| v * v).sum::<f64>()
            + self.lowrank.iter().map(|v| v * v).sum::<f64>();
        s.sqrt()
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl StructuredGaussian {
    pub fn new(mean: Vec<f64>, chol: CholeskyFactor, lowrank: DMatrix<f64>) -> Result<Self> {
        let n = chol.pattern().dim();
        if mean.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: mean.len(),
            });
        }
        if lowrank.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: lowrank.nrows(),
            });
        }
        Ok(Self {
            mean,
            chol,
            lowrank,
        })
    }

    /// `N(0, I)`: unit effective diagonal, zero off-diagonals and zero `R`.
    pub fn standard(pattern: Arc<SparsityPattern>, rank: usize) -> Self {
        let n = pattern.dim();
        Self {
            mean: vec![0.0; n],
            chol: CholeskyFactor::identity(pattern),
            lowrank: DMatrix::zeros(n, rank),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.lowrank.ncols()
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        self.chol.pattern()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut [f64] {
        &mut self.mean
    }

    /// The mean as a displacement field on the pattern's grid.
    pub fn mean_field(&self) -> DisplacementField {
        let p = self.pattern();
        DisplacementField::new(*p.grid(), p.channels(), self.mean.clone())
            .expect("mean matches its pattern")
    }

    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn chol_mut(&mut self) -> &mut CholeskyFactor {
        &mut self.chol
    }

    pub fn lowrank(&self) -> &DMatrix<f64> {
        &self.lowrank
    }

    pub fn lowrank_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.lowrank
    }

    pub fn num_params(&self) -> usize {
        self.mean.len() + self.chol.values().len() + self.lowrank.len()
    }

    /// Parameters as one vector: mean, factor values (pattern order), then `R`
    /// column-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(self.chol.values());
        out.extend_from_slice(self.lowrank.as_slice());
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let n = self.mean.len();
        let nnz = self.chol.values().len();
        self.mean.copy_from_slice(&params[..n]);
        self.chol.values_mut().copy_from_slice(&params[n..n + nnz]);
        self.lowrank
            .as_mut_slice()
            .copy_from_slice(&params[n + nnz..]);
        Ok(())
    }

    /// Precompute `L`, `S = L^T R` and the eigendecomposition of `M = I + S^T S`.
    pub fn prepare(&self) -> Prepared<'_> {
        Prepared::new(self)
    }

    pub fn sample(&self, noise: &NoiseDraw) -> Vec<f64> {
        self.prepare().sample(noise)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.prepare().log_density(z)
    }
}

/// Per-parameter-state workspace shared by every evaluation of one proposal.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    q: &'a StructuredGaussian,
    l: LowerFactor,
    diag_sigmoid: Vec<f64>,
    s: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    m_inv: DMatrix<f64>,
    log_det_sigma: f64,
}

/// Eigenvalues of `M` are at least one analytically; the floor absorbs roundoff.
const M_EIGEN_FLOOR: f64 = 1.0;

impl<'a> Prepared<'a> {
    fn new(q: &'a StructuredGaussian) -> Self {
        let l = q.chol.effective();
        let n = q.dim();
        let r = q.rank();
        let pattern = q.pattern();
        let diag_sigmoid = (0..n)
            .map(|i| sigmoid(q.chol.values()[pattern.diag_entry(i)]))
            .collect();

        let st = l.apply_lt_transposed(&q.lowrank.transpose());
        let (eigvals, eigvecs, m_inv) = if r == 0 {
            (DVector::zeros(0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        } else {
            let mut m = &st * st.transpose();
            for i in 0..r {
                m[(i, i)] += 1.0;
            }
            let eig = SymmetricEigen::new(m);
            let vals = eig.eigenvalues.map(|v| v.max(M_EIGEN_FLOOR));
            let vecs = eig.eigenvectors;
            let scaled = DMatrix::from_fn(r, r, |i, j| vecs[(i, j)] / vals[j]);
            let m_inv = scaled * vecs.transpose();
            (vals, vecs, m_inv)
        };
        let s = st.transpose();
        let log_det_m: f64 = eigvals.iter().map(|v| v.ln()).sum();
        let log_det_sigma = -l.log_det_precision() + log_det_m;
        Self {
            q,
            l,
            diag_sigmoid,
            s,
            eigvals,
            eigvecs,
            m_inv,
            log_det_sigma,
        }
    }

    pub fn gaussian(&self) -> &StructuredGaussian {
        self.q
    }

    pub fn factor(&self) -> &LowerFactor {
        &self.l
    }

    /// `S = L^T R`.
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Floored eigenvalues of `M = I + S^T S`.
    pub fn m_eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn m_eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    /// `Z = mu + R eps_R + L^{-T} eps_L`.
    pub fn sample(&self, noise: &NoiseDraw) -> Vec<f64> {
        self.sample_with_latent(noise).0
    }

    /// Sample together with `y = L^{-T} eps_L`, which the pathwise gradient reuses.
    pub fn sample_with_latent(&self, noise: &NoiseDraw) -> (Vec<f64>, Vec<f64>) {
        let y = self.l.solve_lt(&noise.eps_l);
        let mut z = self.q.mean.clone();
        add_into(&mut z, &y);
        if self.q.rank() > 0 {
            let eps = DVector::from_column_slice(&noise.eps_r);
            let re = &self.q.lowrank * eps;
            add_into(&mut z, re.as_slice());
        }
        (z, y)
    }

    /// `log q` of the sample drawn from `noise`, without touching `L`: for
    /// `x = R eps_R + L^{-T} eps_L`, `L^T x = S eps_R + eps_L`. Agrees with
    /// [`Prepared::log_density`] of that sample up to roundoff.
    pub fn log_density_of_draw(&self, noise: &NoiseDraw) -> f64 {
        let mut k = noise.eps_l.clone();
        let t = if self.q.rank() > 0 {
            let se = &self.s * DVector::from_column_slice(&noise.eps_r);
            add_into(&mut k, se.as_slice());
            self.s.tr_mul(&DVector::from_column_slice(&k))
        } else {
            DVector::zeros(0)
        };
        let quad = self.quadratic_from(&k, &t);
        let n = self.dim() as f64;
        -0.5 * (quad + n * (2.0 * PI).ln() + self.log_det_sigma)
    }

    /// Returns `(k, S^T k)` for `k = L^T x`.
    fn project(&self, x: &[f64]) -> (Vec<f64>, DVector<f64>) {
        let k = self.l.apply_lt(x);
        let t = if self.q.rank() > 0 {
            self.s.tr_mul(&DVector::from_column_slice(&k))
        } else {
            DVector::zeros(0)
        };
        (k, t)
    }

    fn quadratic_from(&self, k: &[f64], t: &DVector<f64>) -> f64 {
        let kk = dot(k, k);
        if self.q.rank() == 0 {
            return kk;
        }
        // t^T M^-1 t through the eigenbasis
        let proj = self.eigvecs.tr_mul(t);
        let corr: f64 = proj
            .iter()
            .zip(self.eigvals.iter())
            .map(|(p, l)| p * p / l)
            .sum();
        (kk - corr).max(0.0)
    }

    /// `x^T Sigma^-1 x` by the Woodbury identity, for `x = vec(Z) - mu`.
    pub fn woodbury_quadratic(&self, x: &[f64]) -> f64 {
        let (k, t) = self.project(x);
        self.quadratic_from(&k, &t)
    }

    /// `log det Sigma = -log det(L L^T) + log det M`.
    pub fn log_det_sigma(&self) -> f64 {
        self.log_det_sigma
    }

    fn centered(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.q.mean).map(|(a, m)| a - m).collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let x = self.centered(z);
        let quad = self.woodbury_quadratic(&x);
        let n = self.dim() as f64;
        -0.5 * (quad + n * (2.0 * PI).ln() + self.log_det_sigma)
    }

    /// `Sigma^-1 x = L (k - S M^-1 S^T k)`.
    fn precision_apply(&self, x: &[f64]) -> Vec<f64> {
        let (mut k, t) = self.project(x);
        if self.q.rank() > 0 {
            let w = &self.m_inv * t;
            let sw = &self.s * w;
            for (a, b) in k.iter_mut().zip(sw.iter()) {
                *a -= b;
            }
        }
        self.l.apply_l(&k)
    }

    /// `d log q / d vec(Z) = -Sigma^-1 (vec(Z) - mu)`.
    pub fn grad_log_density_x(&self, z: &[f64]) -> Vec<f64> {
        let mut u = self.precision_apply(&self.centered(z));
        u.iter_mut().for_each(|v| *v = -*v);
        u
    }

    /// Direct derivatives of `log q(Z)` with respect to the parameters, `Z` held fixed.
    pub fn grad_log_density_params(&self, z: &[f64]) -> GaussianGrad {
        let n = self.dim();
        let r = self.q.rank();
        let pattern = self.q.pattern();
        let u = self.precision_apply(&self.centered(z));

        // dL_ij = -a_i b_j + [i == j] / L_ii - (R M^-1)_i . S_j
        // with b = L^-1 u and a = L^-T b.
        let b = self.l.solve_l(&u);
        let a = self.l.solve_lt(&b);
        let rm = if r > 0 {
            &self.q.lowrank * &self.m_inv
        } else {
            DMatrix::zeros(n, 0)
        };
        let vals = self.l.values();
        let mut chol = vec![0.0; pattern.nnz()];
        for i in 0..n {
            let range = pattern.row_range(i);
            let diag = range.end - 1;
            for e in range {
                let j = pattern.col(e);
                let mut g = -a[i] * b[j];
                if e == diag {
                    g += 1.0 / vals[e];
                }
                if r > 0 {
                    let mut acc = 0.0;
                    for c in 0..r {
                        acc += rm[(i, c)] * self.s[(j, c)];
                    }
                    g -= acc;
                }
                chol[e] = g;
            }
            chol[diag] *= self.diag_sigmoid[i];
        }

        // dR = u (u^T R) - L S M^-1
        let mut lowrank = DMatrix::zeros(n, r);
        if r > 0 {
            let uvec = DVector::from_column_slice(&u);
            let utr = self.q.lowrank.tr_mul(&uvec);
            let sm = &self.s * &self.m_inv;
            for c in 0..r {
                let lsm = self.l.apply_l(sm.column(c).as_slice());
                for i in 0..n {
                    lowrank[(i, c)] = u[i] * utr[c] - lsm[i];
                }
            }
        }
        GaussianGrad {
            mean: u,
            chol,
            lowrank,
        }
    }

    /// Pathwise gradient of `g . Z(theta)` for a fixed noise draw.
    pub fn grad_sample_path(&self, noise: &NoiseDraw, g: &[f64]) -> GaussianGrad {
        let y = self.l.solve_lt(&noise.eps_l);
        let mut out = GaussianGrad::zeros_like(self.q);
        self.accumulate_sample_path(noise, &y, g, 1.0, &mut out);
        out
    }

    /// `out += weight * d(g . Z)/d theta`, given `y = L^{-T} eps_L` from
    /// [`Prepared::sample_with_latent`].
    pub fn accumulate_sample_path(
        &self,
        noise: &NoiseDraw,
        y: &[f64],
        g: &[f64],
        weight: f64,
        out: &mut GaussianGrad,
    ) {
        let pattern = self.q.pattern();
        for (o, &gi) in out.mean.iter_mut().zip(g) {
            *o += weight * gi;
        }
        for c in 0..self.q.rank() {
            let e = weight * noise.eps_r[c];
            if e == 0.0 {
                continue;
            }
            for (o, &gi) in out.lowrank.column_mut(c).iter_mut().zip(g) {
                *o += gi * e;
            }
        }
        // dZ/dL_ij . g = -y_i (L^-1 g)_j
        let h = self.l.solve_l(g);
        for i in 0..self.dim() {
            let yi = -weight * y[i];
            if yi == 0.0 {
                continue;
            }
            let range = pattern.row_range(i);
            let diag = range.end - 1;
            for e in range.start..diag {
                out.chol[e] += yi * h[pattern.col(e)];
            }
            out.chol[diag] += yi * h[i] * self.diag_sigmoid[i];
        }
    }
}

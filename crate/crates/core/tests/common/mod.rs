//! Random proposals and dense reference computations shared by the suites.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ssir::structured_gaussian::{CholeskyFactor, PatternSpec, SparsityPattern, StructuredGaussian};
use ssir::tensor_grid::Grid;

/// A random proposal with `D * N_v <= max_dim`, random pattern and rank `<= max_rank`.
pub fn random_gaussian(rng: &mut ChaCha8Rng, max_dim: usize, max_rank: usize) -> StructuredGaussian {
    loop {
        let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3)];
        let channels = rng.random_range(1..=3);
        let n = dims.iter().product::<usize>() * channels;
        if n > max_dim || n < 2 {
            continue;
        }
        let spec = PatternSpec {
            kernel_radius: rng.random_range(0..=1),
            cross_channel: rng.random_bool(0.5),
        };
        let rank = rng.random_range(0..=max_rank);
        return gaussian_on(rng, Grid::with_dims(dims).unwrap(), channels, spec, rank);
    }
}

pub fn gaussian_on(
    rng: &mut ChaCha8Rng,
    grid: Grid,
    channels: usize,
    spec: PatternSpec,
    rank: usize,
) -> StructuredGaussian {
    let pattern = Arc::new(SparsityPattern::from_spec(grid, channels, spec));
    let n = pattern.dim();
    let diag = pattern.diag_mask();
    let values = diag
        .iter()
        .map(|&d| if d { rng.random_range(-0.5..1.5) } else { rng.random_range(-0.3..0.3) })
        .collect();
    let chol = CholeskyFactor::from_raw(Arc::clone(&pattern), values).unwrap();
    let mean = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lowrank = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-0.5..0.5));
    StructuredGaussian::new(mean, chol, lowrank).unwrap()
}

/// `log(1 + e^u)`, written out independently of the library.
pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Lower-triangular `L` built from the pattern entries and raw values.
pub fn dense_l(q: &StructuredGaussian) -> DMatrix<f64> {
    let pattern = q.pattern();
    let n = pattern.dim();
    let mut l = DMatrix::zeros(n, n);
    for (e, (i, j)) in pattern.entries().enumerate() {
        let raw = q.chol().values()[e];
        l[(i, j)] = if i == j { softplus(raw) } else { raw };
    }
    l
}

/// `R R^T + (L L^T)^{-1}`.
pub fn dense_sigma(q: &StructuredGaussian) -> DMatrix<f64> {
    let l = dense_l(q);
    let precision = &l * l.transpose();
    let cov = precision.try_inverse().expect("precision is invertible");
    q.lowrank() * q.lowrank().transpose() + cov
}

/// Multivariate normal log density from a dense Cholesky of the covariance.
pub fn dense_log_density(mean: &[f64], sigma: &DMatrix<f64>, z: &[f64]) -> f64 {
    let n = mean.len();
    let chol = sigma.clone().cholesky().expect("covariance is positive definite");
    let x = DVector::from_iterator(n, z.iter().zip(mean).map(|(a, b)| a - b));
    let quad = x.dot(&chol.solve(&x));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest entrywise difference, relative to the largest reference magnitude.
pub fn max_rel_vec(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

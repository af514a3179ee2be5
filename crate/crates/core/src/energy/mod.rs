//! Unnormalised registration posterior: local-NCC Boltzmann likelihood and
//! diffusion prior.
//!
//! Similarity enters the log-likelihood with a positive sign, so better
//! alignment means a larger log-target. All normalising constants are dropped.

mod ncc;
mod target;

use serde::{Deserialize, Serialize};

use crate::tensor_grid::{
    spatial_forward_diff, warp_intensity, warp_with_derivative, DisplacementField, Volume,
};
use crate::{Error, Result};

pub use ncc::local_ncc;
use ncc::{ncc_stats, BoxFilter};
pub use target::{IsotropicGaussianTarget, LogTarget, RegistrationTarget};

/// How per-voxel correlations are pooled into the log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NccReduction {
    /// `mean_x cc^2(x) / sigma^2`, bounded by `1 / sigma^2`.
    Mean,
    /// `sum_x cc^2(x) / sigma^2`, on the same per-voxel footing as the prior.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// Likelihood scale.
    pub sigma: f64,
    /// Diffusion weight on sampled fields.
    pub lambda: f64,
    /// Diffusion weight on the proposal mean (training loss only).
    pub lambda_mu: f64,
    /// Odd NCC window edge length.
    pub ncc_window: usize,
    /// Added to both window variances.
    pub ncc_eps: f64,
    pub ncc_reduction: NccReduction,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            lambda: 1.0,
            lambda_mu: 2.5,
            ncc_window: 9,
            ncc_eps: 1e-5,
            ncc_reduction: NccReduction::Sum,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.lambda_mu >= 0.0) {
            return bad("prior weights must be non-negative");
        }
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return bad("ncc_window must be odd and at least 3");
        }
        if !(self.ncc_eps > 0.0) {
            return bad("ncc_eps must be positive");
        }
        Ok(())
    }

    fn pool(&self, sum_cc: f64, num_voxels: usize) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.ncc_reduction {
            NccReduction::Mean => sum_cc / num_voxels as f64 / s2,
            NccReduction::Sum => sum_cc / s2,
        }
    }

    fn pool_factor(&self, num_voxels: usize) -> f64 {
        self.pool(1.0, num_voxels)
    }
}

/// Similarity of the warped moving image to the fixed image, divided by `sigma^2`.
pub fn log_likelihood(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &EnergyConfig,
) -> Result<f64> {
    fixed.grid().ensure_same(moving.grid())?;
    let warped = warp_intensity(moving, field)?;
    let filter = BoxFilter::new(*fixed.grid(), cfg.ncc_window);
    let stats = ncc_stats(&filter, fixed.values(), warped.values(), cfg.ncc_eps);
    Ok(cfg.pool(stats.cc.iter().sum(), stats.cc.len()))
}

/// `-(weight / 2) * sum ||grad z||^2` over forward differences.
pub fn diffusion_log_prior(field: &DisplacementField, weight: f64) -> f64 {
    -0.5 * weight * spatial_forward_diff(field).sum_of_squares()
}

/// Gradient of [`diffusion_log_prior`], `weight` times a discrete Laplacian
/// with zero-flux boundaries.
pub fn diffusion_log_prior_grad(field: &DisplacementField, weight: f64) -> Vec<f64> {
    let grid = field.grid();
    let ch = field.channels();
    let strides = grid.strides();
    let diff = spatial_forward_diff(field);
    let mut grad = vec![0.0; field.as_slice().len()];
    for a in 0..3 {
        if grid.dims()[a] == 1 {
            continue;
        }
        let d = diff.axis(a);
        for v in 0..grid.num_voxels() {
            if grid.coords(v)[a] + 1 >= grid.dims()[a] {
                continue;
            }
            let w = v + strides[a];
            for k in 0..ch {
                let dk = weight * d[v * ch + k];
                grad[w * ch + k] -= dk;
                grad[v * ch + k] += dk;
            }
        }
    }
    grad
}

pub fn log_prior(field: &DisplacementField, cfg: &EnergyConfig) -> f64 {
    diffusion_log_prior(field, cfg.lambda)
}

/// The stronger smoothness term on the proposal mean, as a (non-positive) log-prior.
pub fn mu_penalty(mu: &DisplacementField, cfg: &EnergyConfig) -> f64 {
    diffusion_log_prior(mu, cfg.lambda_mu)
}

/// Unnormalised log joint `log p(I_f | I_m o Z) + log p(Z)`.
pub fn log_target(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &EnergyConfig,
) -> Result<f64> {
    Ok(log_likelihood(fixed, moving, field, cfg)? + log_prior(field, cfg))
}

/// Log target and its gradient with respect to the field.
pub fn log_target_and_grad(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &EnergyConfig,
) -> Result<(f64, DisplacementField)> {
    fixed.grid().ensure_same(moving.grid())?;
    let grid = *fixed.grid();
    let nv = grid.num_voxels();
    let (warped, spatial) = warp_with_derivative(moving, field)?;
    let filter = BoxFilter::new(grid, cfg.ncc_window);
    let stats = ncc_stats(&filter, fixed.values(), &warped, cfg.ncc_eps);
    let likelihood = cfg.pool(stats.cc.iter().sum(), nv);
    let dwarped = stats.grad_sum_wrt_warped(&filter, fixed.values(), &warped);
    let factor = cfg.pool_factor(nv);

    let ch = field.channels();
    let mut grad = diffusion_log_prior_grad(field, cfg.lambda);
    for v in 0..nv {
        let up = factor * dwarped[v];
        for c in 0..ch {
            grad[v * ch + c] += up * spatial[v][c];
        }
    }
    let value = likelihood + log_prior(field, cfg);
    Ok((value, DisplacementField::new(grid, ch, grad)?))
}

pub fn grad_log_target(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &EnergyConfig,
) -> Result<DisplacementField> {
    Ok(log_target_and_grad(fixed, moving, field, cfg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(grid: Grid, center: [f64; 3], width: f64) -> Volume {
        Volume::from_fn(grid, |c| {
            let d2: f64 = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum();
            (-d2 / (2.0 * width * width)).exp()
        })
    }

    fn mean_cfg() -> EnergyConfig {
        EnergyConfig {
            ncc_reduction: NccReduction::Mean,
            ..Default::default()
        }
    }

    #[test]
    fn identical_images_give_inverse_sigma_squared() {
        let g = Grid::cube(12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Volume::from_fn(g, |_| rng.random_range(0.0..1.0));
        let z = DisplacementField::zeros(g);
        let ll = log_likelihood(&img, &img, &z, &mean_cfg()).unwrap();
        assert!((ll - 4.0).abs() < 4e-3, "{ll}");
        let cfg2 = EnergyConfig {
            sigma: 1.0,
            ..mean_cfg()
        };
        let ll2 = log_likelihood(&img, &img, &z, &cfg2).unwrap();
        assert!((ll2 - ll / 4.0).abs() < 1e-12);
        let lt = log_target(&img, &img, &z, &mean_cfg()).unwrap();
        assert_eq!(lt, ll);
    }

    #[test]
    fn aligned_beats_misaligned() {
        let g = Grid::cube(16);
        let fixed = blob(g, [7.5, 7.5, 7.5], 2.5);
        let moving = blob(g, [9.5, 7.5, 7.5], 2.5);
        let cfg = EnergyConfig::default();
        let aligned = DisplacementField::from_fn(g, |_| [2.0, 0.0, 0.0]);
        let zero = DisplacementField::zeros(g);
        let a = log_likelihood(&fixed, &moving, &aligned, &cfg).unwrap();
        let m = log_likelihood(&fixed, &moving, &zero, &cfg).unwrap();
        assert!(a > m, "{a} vs {m}");
    }

    #[test]
    fn prior_examples() {
        let cfg = EnergyConfig::default();
        let g = Grid::with_dims([2, 1, 1]).unwrap();
        let f = DisplacementField::new(g, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(log_prior(&f, &cfg), -0.5);
        let c = DisplacementField::from_fn(Grid::cube(4), |_| [0.3, 0.1, -2.0]);
        assert_eq!(log_prior(&c, &cfg), 0.0);

        // slope s along x in one channel: n interior pairs
        let g = Grid::with_dims([6, 3, 2]).unwrap();
        let s = 0.4;
        let f = DisplacementField::from_fn(g, |[x, _, _]| [s * x as f64, 0.0, 0.0]);
        let pairs = 5 * 3 * 2;
        let expect = -0.5 * pairs as f64 * s * s;
        assert!((log_prior(&f, &cfg) - expect).abs() < 1e-12);
    }

    #[test]
    fn mu_penalty_ratio_and_scaling() {
        let cfg = EnergyConfig::default();
        let g = Grid::cube(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = DisplacementField::from_fn(g, |_| {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        });
        let ratio = mu_penalty(&f, &cfg) / log_prior(&f, &cfg);
        assert!((ratio - 2.5).abs() < 1e-12);
        let doubled = mu_penalty(&f.scaled(2.0), &cfg) / mu_penalty(&f, &cfg);
        assert!((doubled - 4.0).abs() < 1e-12);
        let c = DisplacementField::from_fn(g, |_| [1.0, 2.0, 3.0]);
        assert_eq!(mu_penalty(&c, &cfg), 0.0);
    }

    #[test]
    fn prior_properties() {
        let g = Grid::with_dims([5, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = DisplacementField::from_fn(g, |_| {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        });
        let cfg = EnergyConfig::default();
        assert!(log_prior(&f, &cfg) < 0.0);
        let shifted = DisplacementField::from_fn(g, |c| {
            let v = f.vector(g.index(c[0], c[1], c[2]));
            [v[0] + 1.0, v[1] - 2.0, v[2] + 0.5]
        });
        assert!((log_prior(&f, &cfg) - log_prior(&shifted, &cfg)).abs() < 1e-12);
        // gradient sums to zero per channel
        let grad = diffusion_log_prior_grad(&f, 1.0);
        for c in 0..3 {
            let s: f64 = grad.iter().skip(c).step_by(3).sum();
            assert!(s.abs() < 1e-12);
        }
        assert!(diffusion_log_prior_grad(&DisplacementField::from_fn(g, |_| [1.0; 3]), 1.0)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn prior_gradient_is_laplacian_inside() {
        let g = Grid::cube(6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DisplacementField::from_fn(g, |_| {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        });
        let lambda = 1.7;
        let grad = diffusion_log_prior_grad(&f, lambda);
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    let v = g.index(x, y, z);
                    for c in 0..3 {
                        let mut lap = -6.0 * f.at(v, c);
                        for &w in &[
                            g.index(x + 1, y, z),
                            g.index(x - 1, y, z),
                            g.index(x, y + 1, z),
                            g.index(x, y - 1, z),
                            g.index(x, y, z + 1),
                            g.index(x, y, z - 1),
                        ] {
                            lap += f.at(w, c);
                        }
                        assert!((grad[v * 3 + c] - lambda * lap).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let g = Grid::with_dims([6, 5, 4]).unwrap();
        let fixed = Volume::from_fn(g, |[x, y, z]| {
            (0.6 * x as f64).sin() + (0.5 * y as f64).cos() * (0.3 * z as f64 + 0.2).sin()
        });
        let moving = Volume::from_fn(g, |[x, y, z]| {
            (0.6 * x as f64 + 0.4).sin() + (0.45 * y as f64).cos() * (0.35 * z as f64).sin()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = DisplacementField::from_fn(g, |_| {
            let mut d = [0.0; 3];
            for v in &mut d {
                *v = rng.random_range(0.2..0.8) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            d
        });
        for reduction in [NccReduction::Sum, NccReduction::Mean] {
            let cfg = EnergyConfig {
                ncc_window: 3,
                ncc_reduction: reduction,
                ..Default::default()
            };
            let grad = grad_log_target(&fixed, &moving, &field, &cfg).unwrap();
            let h = 1e-6;
            let mut max_err = 0.0f64;
            let mut max_fd = 0.0f64;
            for i in (0..field.as_slice().len()).step_by(7) {
                let mut p = field.clone();
                p.as_mut_slice()[i] += h;
                let mut m = field.clone();
                m.as_mut_slice()[i] -= h;
                let fd = (log_target(&fixed, &moving, &p, &cfg).unwrap()
                    - log_target(&fixed, &moving, &m, &cfg).unwrap())
                    / (2.0 * h);
                max_err = max_err.max((fd - grad.as_slice()[i]).abs());
                max_fd = max_fd.max(fd.abs());
            }
            assert!(max_err / max_fd < 1e-5, "{reduction:?}: {max_err} / {max_fd}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(EnergyConfig::default().validate().is_ok());
        for bad in [
            EnergyConfig { sigma: 0.0, ..Default::default() },
            EnergyConfig { lambda: -1.0, ..Default::default() },
            EnergyConfig { ncc_window: 4, ..Default::default() },
            EnergyConfig { ncc_window: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

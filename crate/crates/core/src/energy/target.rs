use super::{log_target, log_target_and_grad, EnergyConfig};
use crate::energy::{diffusion_log_prior, diffusion_log_prior_grad};
use crate::tensor_grid::{DisplacementField, Grid, Volume};
use crate::{Error, Result};

/// An unnormalised log density over flattened fields, as seen by the fitting
/// and resampling code.
pub trait LogTarget {
    fn dim(&self) -> usize;

    /// `log p~(z)`. Non-finite inputs give a NaN value rather than an error.
    fn log_target(&self, z: &[f64]) -> Result<f64>;

    fn log_target_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Extra log-prior placed on the proposal mean during training.
    fn mu_log_prior(&self, _mu: &[f64]) -> f64 {
        0.0
    }

    fn mu_log_prior_grad(&self, mu: &[f64]) -> Vec<f64> {
        vec![0.0; mu.len()]
    }
}

/// The registration posterior for one image pair.
#[derive(Debug, Clone, Copy)]
pub struct RegistrationTarget<'a> {
    pub fixed: &'a Volume,
    pub moving: &'a Volume,
    pub cfg: &'a EnergyConfig,
    channels: usize,
}

impl<'a> RegistrationTarget<'a> {
    pub fn new(fixed: &'a Volume, moving: &'a Volume, cfg: &'a EnergyConfig) -> Result<Self> {
        fixed.grid().ensure_same(moving.grid())?;
        cfg.validate()?;
        Ok(Self {
            fixed,
            moving,
            cfg,
            channels: fixed.grid().ndim(),
        })
    }

    pub fn grid(&self) -> &Grid {
        self.fixed.grid()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn field(&self, z: &[f64]) -> Result<DisplacementField> {
        DisplacementField::new(*self.grid(), self.channels, z.to_vec())
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(())
    }
}

impl LogTarget for RegistrationTarget<'_> {
    fn dim(&self) -> usize {
        self.grid().num_voxels() * self.channels
    }

    fn log_target(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Ok(f64::NAN);
        }
        log_target(self.fixed, self.moving, &self.field(z)?, self.cfg)
    }

    fn log_target_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(z)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Ok((f64::NAN, vec![0.0; z.len()]));
        }
        let (v, g) = log_target_and_grad(self.fixed, self.moving, &self.field(z)?, self.cfg)?;
        Ok((v, g.into_vec()))
    }

    fn mu_log_prior(&self, mu: &[f64]) -> f64 {
        match self.field(mu) {
            Ok(f) => diffusion_log_prior(&f, self.cfg.lambda_mu),
            Err(_) => f64::NAN,
        }
    }

    fn mu_log_prior_grad(&self, mu: &[f64]) -> Vec<f64> {
        match self.field(mu) {
            Ok(f) => diffusion_log_prior_grad(&f, self.cfg.lambda_mu),
            Err(_) => vec![0.0; mu.len()],
        }
    }
}

/// `N(mean, s^2 I)` without normalisation, for testing estimators against
/// closed forms.
#[derive(Debug, Clone)]
pub struct IsotropicGaussianTarget {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl IsotropicGaussianTarget {
    pub fn new(mean: Vec<f64>, std: f64) -> Self {
        Self { mean, std }
    }
}

impl LogTarget for IsotropicGaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_target(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_target_and_grad(z)?.0)
    }

    fn log_target_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: z.len(),
            });
        }
        let s2 = self.std * self.std;
        let grad: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| -(a - m) / s2).collect();
        let v = -0.5 * z.iter().zip(&self.mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / s2;
        Ok((v, grad))
    }
}

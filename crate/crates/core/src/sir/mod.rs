//! Sampled importance resampling with a structured Gaussian proposal.
//!
//! A step draws `N_l` candidates without gradients, keeping only their noise
//! keys, weights them against the target, tempers and normalises the weights,
//! then resamples `N_k` survivors. The loss redraws the survivors from their
//! keys and differentiates the mean negative log-target through the sampling
//! path.

mod temperature;
mod weights;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::LogTarget;
use crate::structured_gaussian::{GaussianGrad, NoiseDraw, NoiseKey, Prepared, StructuredGaussian};
use crate::{Error, Result};

pub use temperature::{apply_temperature, finite_std, TemperatureMode, TemperatureState};
pub use weights::{
    effective_sample_size, iwae_bound, log_sum_exp, multinomial_resample, normalize_weights,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirConfig {
    /// Target temperature `T`.
    pub temperature: f64,
    /// EMA decay of the weight spread.
    pub gamma: f64,
    pub temperature_mode: TemperatureMode,
    /// L2 coefficient on off-diagonal factor entries, added to every training loss.
    pub offdiag_l2: f64,
    /// Candidates per weighting pass at inference.
    pub n_l: usize,
    /// Survivors per resampling at inference.
    pub n_k: usize,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            gamma: 0.9,
            temperature_mode: TemperatureMode::Log,
            offdiag_l2: 0.05,
            n_l: 1200,
            n_k: 80,
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        self.temperature_state()?;
        if !(self.offdiag_l2 >= 0.0) {
            return Err(Error::InvalidConfig("offdiag_l2 must be non-negative".into()));
        }
        if self.n_l == 0 || self.n_k == 0 {
            return Err(Error::InvalidConfig("n_l and n_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn temperature_state(&self) -> Result<TemperatureState> {
        let mut s = TemperatureState::new(self.temperature, self.gamma)?;
        s.mode = self.temperature_mode;
        Ok(s)
    }
}

/// Outcome of a weighting pass. Samples are not kept; each is regenerated
/// from its noise key on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    pub keys: Vec<NoiseKey>,
    pub log_target: Vec<f64>,
    pub log_q: Vec<f64>,
    /// `log_target - log_q`, with NaN replaced by `-inf`.
    pub log_alpha: Vec<f64>,
    pub scaled_log_alpha: Vec<f64>,
    pub weights: Vec<f64>,
    pub resampled: Vec<usize>,
    /// Candidates whose log-weight came out NaN.
    pub nan_count: usize,
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Re-scale the log-weights and renormalise.
    pub fn temper(&mut self, state: &mut TemperatureState, update: bool) -> Result<()> {
        self.scaled_log_alpha = state.apply(&self.log_alpha, update);
        self.weights = normalize_weights(&self.scaled_log_alpha)?;
        Ok(())
    }

    pub fn resample<R: Rng + ?Sized>(&mut self, n_k: usize, rng: &mut R) -> Result<&[usize]> {
        self.resampled = multinomial_resample(&self.weights, n_k, rng)?;
        Ok(&self.resampled)
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    pub fn noise(&self, i: usize, dim: usize, rank: usize) -> NoiseDraw {
        NoiseDraw::generate(self.keys[i], dim, rank)
    }

    /// Candidate `i`, bit-identical to the one weighted.
    pub fn sample(&self, prep: &Prepared<'_>, i: usize) -> Vec<f64> {
        prep.sample(&self.noise(i, prep.dim(), prep.gaussian().rank()))
    }

    /// The resampled candidates, in resampling order.
    pub fn resampled_samples(&self, prep: &Prepared<'_>) -> Vec<Vec<f64>> {
        self.resampled.iter().map(|&i| self.sample(prep, i)).collect()
    }
}

pub fn weighting_pass<T: LogTarget + ?Sized>(
    q: &StructuredGaussian,
    target: &T,
    n_l: usize,
    noise_seed: u64,
) -> Result<WeightedEnsemble> {
    weighting_pass_prepared(&q.prepare(), target, n_l, noise_seed)
}

/// Draw `n_l` candidates under keys `(noise_seed, 0..n_l)` and weight them by
/// `log p~(Z) - log q(Z)`. Weights are normalised but not tempered.
pub fn weighting_pass_prepared<T: LogTarget + ?Sized>(
    prep: &Prepared<'_>,
    target: &T,
    n_l: usize,
    noise_seed: u64,
) -> Result<WeightedEnsemble> {
    if n_l == 0 {
        return Err(Error::InvalidConfig("weighting pass needs at least one candidate".into()));
    }
    check_dims(prep, target)?;
    let n = prep.dim();
    let r = prep.gaussian().rank();
    let mut keys = Vec::with_capacity(n_l);
    let mut log_target = Vec::with_capacity(n_l);
    let mut log_q = Vec::with_capacity(n_l);
    let mut log_alpha = Vec::with_capacity(n_l);
    let mut nan_count = 0;
    for i in 0..n_l {
        let key = NoiseKey::new(noise_seed, i as u64);
        let noise = NoiseDraw::generate(key, n, r);
        let z = prep.sample(&noise);
        let lt = target.log_target(&z)?;
        let lq = prep.log_density_of_draw(&noise);
        let mut la = lt - lq;
        if la.is_nan() {
            nan_count += 1;
            la = f64::NEG_INFINITY;
        }
        keys.push(key);
        log_target.push(lt);
        log_q.push(lq);
        log_alpha.push(la);
    }
    let weights = normalize_weights(&log_alpha)?;
    Ok(WeightedEnsemble {
        keys,
        log_target,
        log_q,
        scaled_log_alpha: log_alpha.clone(),
        log_alpha,
        weights,
        resampled: Vec::new(),
        nan_count,
    })
}

fn check_dims<T: LogTarget + ?Sized>(prep: &Prepared<'_>, target: &T) -> Result<()> {
    if prep.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            actual: prep.dim(),
        });
    }
    Ok(())
}

/// Terms of a training loss. `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean of `-log p~(Z)` over the samples used.
    pub neg_log_target: f64,
    /// `-log p_mu(mu)`, the smoothness penalty on the mean (non-negative).
    pub mu_penalty: f64,
    /// `c * sum L_ij^2` over off-diagonal factor entries.
    pub offdiag_penalty: f64,
    /// Mean `log q(Z)`; present only for the variational loss.
    pub log_q: Option<f64>,
    pub total: f64,
}

fn offdiag_penalty(q: &StructuredGaussian, coef: f64, grad: &mut GaussianGrad) -> f64 {
    let pattern = q.pattern();
    let vals = q.chol().values();
    let mut sum = 0.0;
    for i in 0..pattern.dim() {
        let range = pattern.row_range(i);
        for e in range.start..range.end - 1 {
            sum += vals[e] * vals[e];
            grad.chol[e] += 2.0 * coef * vals[e];
        }
    }
    coef * sum
}

fn mu_terms<T: LogTarget + ?Sized>(q: &StructuredGaussian, target: &T, grad: &mut GaussianGrad) -> f64 {
    let g = target.mu_log_prior_grad(q.mean());
    for (o, v) in grad.mean.iter_mut().zip(&g) {
        *o -= v;
    }
    -target.mu_log_prior(q.mean())
}

/// Sample from stored noise and evaluate the target there.
struct Evaluated {
    noise: NoiseDraw,
    z: Vec<f64>,
    y: Vec<f64>,
    log_target: f64,
    grad: Vec<f64>,
}

fn evaluate<T: LogTarget + ?Sized>(prep: &Prepared<'_>, target: &T, noise: NoiseDraw) -> Result<Evaluated> {
    let (z, y) = prep.sample_with_latent(&noise);
    let (log_target, grad) = target.log_target_and_grad(&z)?;
    Ok(Evaluated {
        noise,
        z,
        y,
        log_target,
        grad,
    })
}

pub fn sir_loss<T: LogTarget + ?Sized>(
    q: &StructuredGaussian,
    target: &T,
    ensemble: &WeightedEnsemble,
    offdiag_l2: f64,
) -> Result<(LossBreakdown, GaussianGrad)> {
    sir_loss_prepared(&q.prepare(), target, ensemble, offdiag_l2)
}

/// `-(1/N_k) sum_k log p~(Z^k)` over the resampled candidates, plus the mean
/// and off-diagonal penalties, with gradients reduced in resampling order.
pub fn sir_loss_prepared<T: LogTarget + ?Sized>(
    prep: &Prepared<'_>,
    target: &T,
    ensemble: &WeightedEnsemble,
    offdiag_l2: f64,
) -> Result<(LossBreakdown, GaussianGrad)> {
    check_dims(prep, target)?;
    let q = prep.gaussian();
    let idx = &ensemble.resampled;
    if idx.is_empty() {
        return Err(Error::DegenerateEnsemble("no resampled candidates".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= ensemble.len()) {
        return Err(Error::DegenerateEnsemble(format!(
            "resampled index {bad} outside ensemble of {}",
            ensemble.len()
        )));
    }
    let n_k = idx.len() as f64;
    let mut grad = GaussianGrad::zeros_like(q);
    let mut sum_neg = 0.0;
    for &i in idx {
        let ev = evaluate(prep, target, ensemble.noise(i, q.dim(), q.rank()))?;
        sum_neg -= ev.log_target;
        prep.accumulate_sample_path(&ev.noise, &ev.y, &ev.grad, -1.0 / n_k, &mut grad);
    }
    let neg_log_target = sum_neg / n_k;
    let mu_penalty = mu_terms(q, target, &mut grad);
    let offdiag = offdiag_penalty(q, offdiag_l2, &mut grad);
    Ok((
        LossBreakdown {
            neg_log_target,
            mu_penalty,
            offdiag_penalty: offdiag,
            log_q: None,
            total: neg_log_target + mu_penalty + offdiag,
        },
        grad,
    ))
}

pub fn elbo_loss<T: LogTarget + ?Sized>(
    q: &StructuredGaussian,
    target: &T,
    draws: &[NoiseDraw],
    offdiag_l2: f64,
) -> Result<(LossBreakdown, GaussianGrad)> {
    elbo_loss_prepared(&q.prepare(), target, draws, offdiag_l2)
}

/// Negative ELBO averaged over `draws`, `-(log p~(Z) - log q(Z))`, plus the
/// same penalties as [`sir_loss`]. Gradients combine the pathwise term with the
/// direct parameter derivative of `log q`.
pub fn elbo_loss_prepared<T: LogTarget + ?Sized>(
    prep: &Prepared<'_>,
    target: &T,
    draws: &[NoiseDraw],
    offdiag_l2: f64,
) -> Result<(LossBreakdown, GaussianGrad)> {
    check_dims(prep, target)?;
    if draws.is_empty() {
        return Err(Error::InvalidConfig("variational loss needs at least one draw".into()));
    }
    let q = prep.gaussian();
    let k = draws.len() as f64;
    let mut grad = GaussianGrad::zeros_like(q);
    let mut sum_neg = 0.0;
    let mut sum_lq = 0.0;
    for noise in draws {
        let mut ev = evaluate(prep, target, noise.clone())?;
        sum_neg -= ev.log_target;
        sum_lq += prep.log_density(&ev.z);
        // d/dZ of (-log p~ + log q)
        let gq = prep.grad_log_density_x(&ev.z);
        for (g, h) in ev.grad.iter_mut().zip(&gq) {
            *g = h - *g;
        }
        prep.accumulate_sample_path(&ev.noise, &ev.y, &ev.grad, 1.0 / k, &mut grad);
        let mut direct = prep.grad_log_density_params(&ev.z);
        direct.scale(1.0 / k);
        grad.add_assign(&direct);
    }
    let neg_log_target = sum_neg / k;
    let log_q = sum_lq / k;
    let mu_penalty = mu_terms(q, target, &mut grad);
    let offdiag = offdiag_penalty(q, offdiag_l2, &mut grad);
    Ok((
        LossBreakdown {
            neg_log_target,
            mu_penalty,
            offdiag_penalty: offdiag,
            log_q: Some(log_q),
            total: neg_log_target + log_q + mu_penalty + offdiag,
        },
        grad,
    ))
}

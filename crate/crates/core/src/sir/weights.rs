use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::{Error, Result};

fn finite_max(values: &[f64]) -> f64 {
    values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `log sum exp`, ignoring `-inf` (and NaN) entries. `-inf` if nothing is finite.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = finite_max(values);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - m).exp())
        .sum();
    m + s.ln()
}

/// Self-normalised weights from log-weights. Non-finite entries get weight 0.
pub fn normalize_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let m = finite_max(log_weights);
    if !m.is_finite() {
        return Err(Error::DegenerateEnsemble(
            "no finite log-weight to normalise".into(),
        ));
    }
    let mut w: Vec<f64> = log_weights
        .iter()
        .map(|v| if v.is_finite() { (v - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// `N_k` independent categorical draws from `weights`.
pub fn multinomial_resample<R: Rng + ?Sized>(
    weights: &[f64],
    n_k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::DegenerateEnsemble(format!("cannot resample: {e}")))?;
    Ok((0..n_k).map(|_| dist.sample(rng)).collect())
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// `log((1/K) sum_i alpha_i)` of raw log-weights.
pub fn iwae_bound(log_alpha: &[f64]) -> f64 {
    log_sum_exp(log_alpha) - (log_alpha.len() as f64).ln()
}

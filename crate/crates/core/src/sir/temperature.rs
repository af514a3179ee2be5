use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SIGMA_FLOOR: f64 = 1e-8;

/// Whether tempering acts on log-weights or on raw weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    /// `w ∝ alpha^(T / sigma)` with `sigma` the spread of `log alpha`.
    #[default]
    Log,
    /// `alpha * T / sigma` with `sigma` the spread of `alpha` itself. A common
    /// factor cancels on normalisation, so this mode leaves weights unchanged;
    /// it exists for comparison.
    Linear,
}

/// Dynamic weight temperature: target `T`, EMA decay `gamma` and the running
/// spread `sigma_alpha` of the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureState {
    pub t: f64,
    pub gamma: f64,
    pub sigma_alpha: f64,
    pub initialized: bool,
    pub mode: TemperatureMode,
}

impl Default for TemperatureState {
    fn default() -> Self {
        Self {
            t: 3.0,
            gamma: 0.9,
            sigma_alpha: 1.0,
            initialized: false,
            mode: TemperatureMode::Log,
        }
    }
}

/// Unbiased standard deviation of the finite entries; `None` with fewer than two.
pub fn finite_std(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return None;
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let ss: f64 = finite.iter().map(|v| (v - mean).powi(2)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

/// `ln std(exp(log_alpha))`, computed without overflow.
fn log_linear_std(log_alpha: &[f64]) -> Option<f64> {
    let max = log_alpha
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let shifted: Vec<f64> = log_alpha.iter().map(|v| (v - max).exp()).collect();
    finite_std(&shifted).map(|s| max + s.max(f64::MIN_POSITIVE).ln())
}

impl TemperatureState {
    pub fn new(t: f64, gamma: f64) -> Result<Self> {
        let state = Self {
            t,
            gamma,
            ..Default::default()
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.t)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    /// Advance the EMA with a batch spread. The first batch sets it directly.
    pub fn observe(&mut self, batch_std: f64) {
        let s = if self.initialized {
            self.gamma * self.sigma_alpha + (1.0 - self.gamma) * batch_std
        } else {
            batch_std
        };
        self.sigma_alpha = s.max(SIGMA_FLOOR);
        self.initialized = true;
    }

    /// Scaled log-weights. With `update`, the EMA first absorbs this batch.
    /// An uninitialised state that is not updated leaves the weights as they are.
    pub fn apply(&mut self, log_alpha: &[f64], update: bool) -> Vec<f64> {
        match self.mode {
            TemperatureMode::Log => {
                if update {
                    if let Some(s) = finite_std(log_alpha) {
                        self.observe(s);
                    }
                }
                if !self.initialized {
                    return log_alpha.to_vec();
                }
                let factor = self.t / self.sigma_alpha;
                log_alpha.iter().map(|v| v * factor).collect()
            }
            TemperatureMode::Linear => {
                // raw weights overflow, so their spread is combined in log form
                if update {
                    if let Some(ls) = log_linear_std(log_alpha) {
                        if self.initialized {
                            let cur = self.sigma_alpha.ln();
                            let g = self.gamma;
                            let m = cur.max(ls);
                            let mixed = m + (g * (cur - m).exp() + (1.0 - g) * (ls - m).exp()).ln();
                            self.sigma_alpha = mixed.exp().clamp(SIGMA_FLOOR, f64::MAX);
                        } else {
                            self.sigma_alpha = ls.exp().clamp(SIGMA_FLOOR, f64::MAX);
                            self.initialized = true;
                        }
                    }
                }
                if !self.initialized {
                    return log_alpha.to_vec();
                }
                let shift = self.t.ln() - self.sigma_alpha.ln();
                log_alpha.iter().map(|v| v + shift).collect()
            }
        }
    }
}

/// Free-function form of [`TemperatureState::apply`].
pub fn apply_temperature(log_alpha: &[f64], state: &mut TemperatureState, update: bool) -> Vec<f64> {
    state.apply(log_alpha, update)
}

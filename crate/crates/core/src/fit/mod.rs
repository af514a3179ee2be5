//! Per-pair optimisation of a structured Gaussian proposal.

mod gradcheck;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyConfig, LogTarget, RegistrationTarget};
use crate::sir::{
    elbo_loss_prepared, sir_loss_prepared, weighting_pass_prepared, LossBreakdown, SirConfig,
    TemperatureState,
};
use crate::structured_gaussian::{
    component_rng, component_seed, CholeskyFactor, GaussianGrad, NoiseDraw, NoiseKey, PatternSpec,
    SparsityPattern, StructuredGaussian,
};
use crate::tensor_grid::{jacobian_fold_fraction, Grid, Volume};
use crate::{Error, Result};

pub use gradcheck::{
    check_gradients, tiny_registration_instance, BlockError, GradCheckReport, GradProblem,
    LossKind, LossProblem, TinyInstance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Variational,
    Sir,
}

impl std::str::FromStr for FitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "variational" => Ok(FitMode::Variational),
            "sir" => Ok(FitMode::Sir),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

/// Proposal family: diagonal or stencil factor, with or without the low-rank term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    D,
    LD,
    C,
    LC,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D" => Ok(Variant::D),
            "LD" => Ok(Variant::LD),
            "C" => Ok(Variant::C),
            "LC" => Ok(Variant::LC),
            _ => Err(Error::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

impl Variant {
    pub fn pattern_spec(self, kernel_radius: usize) -> PatternSpec {
        match self {
            Variant::D | Variant::LD => PatternSpec::DIAGONAL,
            Variant::C | Variant::LC => PatternSpec {
                kernel_radius,
                cross_channel: true,
            },
        }
    }

    pub fn rank(self, rank: usize) -> usize {
        match self {
            Variant::LD | Variant::LC => rank,
            Variant::D | Variant::C => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub mode: FitMode,
    pub variant: Variant,
    /// Low-rank width for the `L*` variants.
    pub rank: usize,
    /// Stencil radius for the `*C` variants.
    pub kernel_radius: usize,
    pub steps: usize,
    pub lr: f64,
    /// Cosine decay ends at `lr * lr_floor_ratio`.
    pub lr_floor_ratio: f64,
    /// Constant rate before this step, cosine decay after it.
    pub decay_start: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Candidates per SIR step.
    pub n_l: usize,
    /// Survivors per SIR step; also the draws per variational step.
    pub n_k: usize,
    /// Initial marginal standard deviation of the factor part.
    pub init_std: f64,
    /// Standard deviation of the random initial `R` entries.
    pub init_lowrank: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: FitMode::Sir,
            variant: Variant::LC,
            rank: 25,
            kernel_radius: 1,
            steps: 2000,
            lr: 1e-2,
            lr_floor_ratio: 0.1,
            decay_start: 0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1e3,
            n_l: 16,
            n_k: 4,
            init_std: 0.2,
            init_lowrank: 0.01,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio <= 1.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("adam_eps and clip_norm must be positive");
        }
        if self.n_l == 0 || self.n_k == 0 {
            return bad("n_l and n_k must be at least 1");
        }
        if !(self.init_std > 0.0) || !(self.init_lowrank >= 0.0) {
            return bad("initial scales must be positive");
        }
        Ok(())
    }

    /// Learning rate at `step`: flat until `decay_start`, then cosine to the floor.
    pub fn lr_at(&self, step: usize) -> f64 {
        let floor = self.lr * self.lr_floor_ratio;
        if step < self.decay_start {
            return self.lr;
        }
        let span = self.steps.saturating_sub(self.decay_start).max(1) as f64;
        let t = ((step - self.decay_start) as f64 / span).min(1.0);
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn pattern(&self, grid: Grid, channels: usize) -> SparsityPattern {
        SparsityPattern::from_spec(grid, channels, self.variant.pattern_spec(self.kernel_radius))
    }
}

/// Starting proposal: zero mean, isotropic factor part of std `init_std`, and
/// small random `R` drawn from the `"fit/init"` stream.
pub fn initial_proposal(grid: Grid, channels: usize, cfg: &FitConfig, seed: u64) -> StructuredGaussian {
    let pattern = Arc::new(cfg.pattern(grid, channels));
    let n = pattern.dim();
    let r = cfg.variant.rank(cfg.rank);
    let chol = CholeskyFactor::scaled_identity(Arc::clone(&pattern), 1.0 / cfg.init_std);
    let mut rng = component_rng(seed, "fit/init", 0);
    let lowrank = DMatrix::from_fn(n, r, |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        cfg.init_lowrank * e
    });
    StructuredGaussian::new(vec![0.0; n], chol, lowrank).expect("shapes agree by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub neg_log_target: f64,
    pub ess: f64,
    pub sigma_alpha: f64,
    pub max_weight: f64,
    pub fold_mu: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<StepRecord>,
    /// Temperature state after the last step, reused at inference.
    pub temperature: TemperatureState,
}

impl FitTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,neg_log_target,ess,sigma_alpha,max_weight,fold_mu,lr,grad_norm\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.loss, r.neg_log_target, r.ess, r.sigma_alpha, r.max_weight, r.fold_mu, r.lr, r.grad_norm
            ));
        }
        s
    }
}

/// First-order optimiser with per-parameter second-moment scaling.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descend along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

const MAX_BAD_STEPS: usize = 10;

fn fold_of_mean(q: &StructuredGaussian) -> f64 {
    jacobian_fold_fraction(&q.mean_field())
}

/// Optimise `q` against `target` in place.
///
/// Each SIR step weights `n_l` fresh candidates, updates the temperature EMA,
/// resamples `n_k` survivors and descends the SIR loss. Each variational step
/// descends the negative ELBO over `n_k` draws. Steps whose loss is not finite
/// are skipped; ten in a row abort the fit.
pub fn fit_proposal<T: LogTarget + ?Sized>(
    q: &mut StructuredGaussian,
    target: &T,
    cfg: &FitConfig,
    sir: &SirConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<FitTrace> {
    cfg.validate()?;
    sir.validate()?;
    let mut temp = sir.temperature_state()?;
    let mut params = q.params_flat();
    let mut adam = Adam::new(params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut bad_run = 0;
    let n = q.dim();
    let r = q.rank();

    for step in 0..cfg.steps {
        let noise_seed = component_seed(seed, &format!("fit/noise/{step}"));
        let attempt: Result<(LossBreakdown, GaussianGrad, f64, f64)> = (|| {
            let prep = q.prepare();
            match cfg.mode {
                FitMode::Sir => {
                    let mut ens = weighting_pass_prepared(&prep, target, cfg.n_l, noise_seed)?;
                    ens.temper(&mut temp, true)?;
                    let mut rng = component_rng(seed, "fit/resample", step as u64);
                    ens.resample(cfg.n_k, &mut rng)?;
                    let (loss, grad) = sir_loss_prepared(&prep, target, &ens, sir.offdiag_l2)?;
                    Ok((loss, grad, ens.ess(), ens.max_weight()))
                }
                FitMode::Variational => {
                    let draws: Vec<NoiseDraw> = (0..cfg.n_k)
                        .map(|i| NoiseDraw::generate(NoiseKey::new(noise_seed, i as u64), n, r))
                        .collect();
                    let (loss, grad) = elbo_loss_prepared(&prep, target, &draws, sir.offdiag_l2)?;
                    Ok((loss, grad, f64::NAN, f64::NAN))
                }
            }
        })();

        let lr = cfg.lr_at(step);
        let (record, grad) = match attempt {
            Ok((loss, grad, ess, max_w)) if loss.total.is_finite() => {
                let norm = grad.norm();
                (
                    StepRecord {
                        step,
                        loss: loss.total,
                        neg_log_target: loss.neg_log_target,
                        ess,
                        sigma_alpha: temp.sigma_alpha,
                        max_weight: max_w,
                        fold_mu: 0.0,
                        lr,
                        grad_norm: norm,
                    },
                    Some(grad),
                )
            }
            Ok(_) | Err(Error::DegenerateEnsemble(_)) => (
                StepRecord {
                    step,
                    loss: f64::NAN,
                    neg_log_target: f64::NAN,
                    ess: f64::NAN,
                    sigma_alpha: temp.sigma_alpha,
                    max_weight: f64::NAN,
                    fold_mu: 0.0,
                    lr,
                    grad_norm: f64::NAN,
                },
                None,
            ),
            Err(e) => return Err(e),
        };

        let mut record = record;
        match grad {
            Some(g) if record.grad_norm.is_finite() => {
                bad_run = 0;
                let mut flat = g.to_flat();
                if record.grad_norm > cfg.clip_norm {
                    let s = cfg.clip_norm / record.grad_norm;
                    flat.iter_mut().for_each(|v| *v *= s);
                }
                adam.step(&mut params, &flat, lr);
                q.set_params_flat(&params)?;
            }
            _ => {
                bad_run += 1;
                if bad_run >= MAX_BAD_STEPS {
                    return Err(Error::Diverged(format!(
                        "{MAX_BAD_STEPS} consecutive non-finite losses ending at step {step}"
                    )));
                }
            }
        }
        record.fold_mu = fold_of_mean(q);
        on_step(&record);
        records.push(record);
    }
    Ok(FitTrace {
        records,
        temperature: temp,
    })
}

/// Fit a fresh proposal to one image pair.
pub fn fit(
    fixed: &Volume,
    moving: &Volume,
    energy: &EnergyConfig,
    cfg: &FitConfig,
    sir: &SirConfig,
    seed: u64,
) -> Result<(StructuredGaussian, FitTrace)> {
    let target = RegistrationTarget::new(fixed, moving, energy)?;
    let mut q = initial_proposal(*fixed.grid(), target.channels(), cfg, seed);
    let trace = fit_proposal(&mut q, &target, cfg, sir, seed, |_| {})?;
    Ok((q, trace))
}

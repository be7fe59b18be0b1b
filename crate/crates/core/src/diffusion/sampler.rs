use serde::{Deserialize, Serialize};

use crate::model::{Condition, Model};
use crate::tensor::{SeededRng, Tensor};

use super::{DiffusionError, DiffusionSchedule, Result};

/// Respaced chain length used for ancestral sampling unless overridden.
pub const IDDPM_DEFAULT_STEPS: usize = 250;

/// Guidance scales of the standard sweep.
pub const CFG_SWEEP: [f64; 6] = [1.5, 2.0, 3.0, 4.0, 5.0, 6.0];

/// Anything that predicts ε from `(x_t, t, condition)`.
pub trait Denoiser {
    fn predict_eps(&self, x: &Tensor, t: f64, cond: &Condition) -> Result<Tensor>;
    fn null_condition(&self) -> Condition;
}

impl Denoiser for Model {
    fn predict_eps(&self, x: &Tensor, t: f64, cond: &Condition) -> Result<Tensor> {
        Ok(self.forward(x, t, cond)?)
    }

    fn null_condition(&self) -> Condition {
        Condition::null_for(self.config())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    IddpmAncestral,
    DpmSolver2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::dpm_solver(20)
    }
}

impl SamplerConfig {
    pub fn dpm_solver(steps: usize) -> Self {
        Self {
            kind: SamplerKind::DpmSolver2,
            steps,
            cfg_scale: 4.5,
            seed: 0,
        }
    }

    pub fn iddpm(steps: usize) -> Self {
        Self {
            kind: SamplerKind::IddpmAncestral,
            steps,
            cfg_scale: 4.5,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cfg(mut self, s: f64) -> Self {
        self.cfg_scale = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let min = match self.kind {
            SamplerKind::IddpmAncestral => 1,
            SamplerKind::DpmSolver2 => 2,
        };
        if self.steps < min {
            return Err(DiffusionError::Config(format!(
                "{:?} needs at least {min} steps, got {}",
                self.kind, self.steps
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(DiffusionError::Config(format!(
                "cfg scale must be finite and ≥ 0, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// `ε̂ = ε_uncond + s·(ε_cond − ε_uncond)`.
pub fn classifier_free_guidance(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(DiffusionError::Config(format!(
            "cfg scale must be finite and ≥ 0, got {s}"
        )));
    }
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(crate::tensor::TensorError::Shape {
            op: "classifier_free_guidance",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        }
        .into());
    }
    // The collapses are exact rather than rounded.
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))?)
}

/// Scale 1 evaluates the conditional branch only.
fn guided<D: Denoiser + ?Sized>(
    d: &D,
    x: &Tensor,
    t: f64,
    cond: &Condition,
    null: &Condition,
    s: f64,
) -> Result<Tensor> {
    let eps_cond = d.predict_eps(x, t, cond)?;
    if s == 1.0 {
        return Ok(eps_cond);
    }
    let eps_uncond = d.predict_eps(x, t, null)?;
    classifier_free_guidance(&eps_cond, &eps_uncond, s)
}

pub fn sample<D: Denoiser + ?Sized>(
    d: &D,
    shape: &[usize],
    cond: &Condition,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    match config.kind {
        SamplerKind::IddpmAncestral => iddpm_ancestral_sample(d, shape, cond, config, schedule),
        SamplerKind::DpmSolver2 => dpm_solver_2_sample(d, shape, cond, config, schedule),
    }
}

/// Evenly spaced integer timesteps, ascending, ending at `T−1`.
pub fn iddpm_timesteps(steps: usize, schedule: &DiffusionSchedule) -> Vec<usize> {
    let last = schedule.num_steps() - 1;
    if steps <= 1 {
        return vec![last];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|k| ((k * last) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Ancestral sampling over a respaced chain with the fixed posterior
/// variance `β̃`.
pub fn iddpm_ancestral_sample<D: Denoiser + ?Sized>(
    d: &D,
    shape: &[usize],
    cond: &Condition,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    config.validate()?;
    let null = d.null_condition();
    let mut rng = SeededRng::new(config.seed, 0);
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    let ts = iddpm_timesteps(config.steps, schedule);
    for k in (0..ts.len()).rev() {
        let ab = schedule.alpha_bar(ts[k])?;
        let ab_prev = if k == 0 {
            1.0
        } else {
            schedule.alpha_bar(ts[k - 1])?
        };
        let eps = guided(d, &x, ts[k] as f64, cond, &null, config.cfg_scale)?;
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mean = x.zip_map(&eps, |xv, e| c0 * (xv - sb * e) / sa + ct * xv)?;
        x = if k == 0 {
            mean
        } else {
            let sd = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let mut out = mean;
            for v in out.data_mut() {
                *v += sd * rng.normal();
            }
            out
        };
    }
    Ok(x)
}

/// Time grid for DPM-Solver: `steps + 1` points from `T−1` to 0, uniform in
/// log-SNR.
pub fn dpm_solver_grid(steps: usize, schedule: &DiffusionSchedule) -> Vec<f64> {
    let last = (schedule.num_steps() - 1) as f64;
    let (l0, l1) = (schedule.lambda_at(last), schedule.lambda_at(0.0));
    (0..=steps)
        .map(|i| match i {
            0 => last,
            i if i == steps => 0.0,
            i => schedule.t_for_lambda(l0 + (l1 - l0) * i as f64 / steps as f64),
        })
        .collect()
}

/// Second-order multistep DPM-Solver on the probability-flow ODE, in the
/// noise-prediction form. The first step is first order.
pub fn dpm_solver_2_sample<D: Denoiser + ?Sized>(
    d: &D,
    shape: &[usize],
    cond: &Condition,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    config.validate()?;
    let null = d.null_condition();
    let mut rng = SeededRng::new(config.seed, 0);
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    let grid = dpm_solver_grid(config.steps, schedule);
    let lambda: Vec<f64> = grid.iter().map(|&t| schedule.lambda_at(t)).collect();
    let mut prev: Option<(Tensor, f64)> = None;
    for i in 1..grid.len() {
        let eps = guided(d, &x, grid[i - 1], cond, &null, config.cfg_scale)?;
        let ab_from = schedule.alpha_bar_at(grid[i - 1]);
        let ab_to = schedule.alpha_bar_at(grid[i]);
        let ratio = (ab_to / ab_from).sqrt();
        let sigma = (1.0 - ab_to).sqrt();
        let h = lambda[i] - lambda[i - 1];
        let phi = sigma * h.exp_m1();
        x = match &prev {
            None => x.zip_map(&eps, |xv, e| ratio * xv - phi * e)?,
            Some((eps_prev, h_prev)) => {
                let r = h_prev / h;
                let d1 = eps.zip_map(eps_prev, |a, b| (a - b) / r)?;
                let step = eps.zip_map(&d1, |e, dd| e + 0.5 * dd)?;
                x.zip_map(&step, |xv, s| ratio * xv - phi * s)?
            }
        };
        prev = Some((eps, h));
    }
    Ok(x)
}

use crate::model::Condition;
use crate::tensor::Tensor;

use super::{Denoiser, DiffusionSchedule, Result};

/// Exact ε-predictor for data distributed as `N(mean, var·I)`.
///
/// With `x_t = √ᾱ·x0 + √(1−ᾱ)·ε`, `E[ε | x_t] = √(1−ᾱ)·(x_t − √ᾱ·μ) / (ᾱσ² + 1 − ᾱ)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussian {
    pub mean: f64,
    pub var: f64,
    pub schedule: DiffusionSchedule,
}

impl AnalyticGaussian {
    pub fn new(mean: f64, var: f64, schedule: DiffusionSchedule) -> Self {
        Self {
            mean,
            var,
            schedule,
        }
    }

    pub fn eps(&self, x: f64, t: f64) -> f64 {
        let ab = self.schedule.alpha_bar_at(t);
        (1.0 - ab).sqrt() * (x - ab.sqrt() * self.mean) / (ab * self.var + 1.0 - ab)
    }

    /// Marginal mean and standard deviation of `x_t`.
    pub fn marginal(&self, t: f64) -> (f64, f64) {
        let ab = self.schedule.alpha_bar_at(t);
        (ab.sqrt() * self.mean, (ab * self.var + 1.0 - ab).sqrt())
    }

    /// Exact probability-flow map carrying `x` at time `from` to time `to`.
    pub fn flow(&self, x: f64, from: f64, to: f64) -> f64 {
        let (m0, s0) = self.marginal(from);
        let (m1, s1) = self.marginal(to);
        m1 + s1 / s0 * (x - m0)
    }
}

impl Denoiser for AnalyticGaussian {
    fn predict_eps(&self, x: &Tensor, t: f64, _cond: &Condition) -> Result<Tensor> {
        Ok(x.map(|v| self.eps(v, t)))
    }

    fn null_condition(&self) -> Condition {
        Condition::Class(None)
    }
}

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{DiffusionError, Result};

pub const DEFAULT_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Discrete forward-process schedule. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(ScheduleKind::default(), DEFAULT_STEPS).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(DiffusionError::Config(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(DiffusionError::Config(format!(
                        "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
                    )));
                }
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
            ScheduleKind::Cosine { offset } => {
                if !(offset > 0.0 && offset.is_finite()) {
                    return Err(DiffusionError::Config(format!(
                        "cosine offset must be positive, got {offset}"
                    )));
                }
                let f = |t: f64| {
                    ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (0..steps)
                    .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let mut alphas_cumprod = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alphas_cumprod,
        })
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::default(), steps)
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine { offset: 0.008 }, steps)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(DiffusionError::Timestep {
                t,
                steps: self.num_steps(),
            })
    }

    /// ᾱ at real-valued `t ∈ [0, T−1]`, linear in log ᾱ between integers.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let last = (self.num_steps() - 1) as f64;
        let t = t.clamp(0.0, last);
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(self.num_steps() - 1);
        let w = t - lo as f64;
        let (a, b) = (self.alphas_cumprod[lo].ln(), self.alphas_cumprod[hi].ln());
        (a + w * (b - a)).exp()
    }

    /// Half log-SNR `λ = log(α/σ)` at real-valued `t`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        let ab = self.alpha_bar_at(t);
        0.5 * (ab.ln() - (-ab).ln_1p())
    }

    /// Inverse of [`Self::lambda_at`] on `[0, T−1]`, by bisection.
    pub fn t_for_lambda(&self, lambda: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, (self.num_steps() - 1) as f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.lambda_at(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + s * e)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn cumulative_product_is_consistent() {
        for s in [
            DiffusionSchedule::default(),
            DiffusionSchedule::cosine(1000).unwrap(),
        ] {
            let mut acc = 1.0;
            for t in 0..s.num_steps() {
                acc *= 1.0 - s.betas()[t];
                assert!((s.alphas_cumprod()[t] - acc).abs() <= 1e-12);
                assert!(s.betas()[t] > 0.0 && s.betas()[t] < 1.0);
                if t > 0 {
                    assert!(s.alphas_cumprod()[t] < s.alphas_cumprod()[t - 1]);
                }
            }
            assert!(s.alphas_cumprod()[0] > 0.99);
            assert!(*s.alphas_cumprod().last().unwrap() < 1e-3);
        }
        let lin = DiffusionSchedule::default();
        assert!(lin.betas().windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lin.betas()[0], 1e-4);
        assert!((lin.betas()[999] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn continuous_lookup_matches_integers_and_is_monotone() {
        let s = DiffusionSchedule::default();
        for t in [0usize, 1, 500, 999] {
            assert!((s.alpha_bar_at(t as f64) - s.alpha_bar(t).unwrap()).abs() < 1e-15);
        }
        for l in [-4.0, 0.0, 3.9] {
            assert!((s.lambda_at(s.t_for_lambda(l)) - l).abs() < 1e-9);
        }
        let mut prev = f64::INFINITY;
        for k in 0..=2000 {
            let l = s.lambda_at(k as f64 * 999.0 / 2000.0);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn q_sample_limits_and_range() {
        let s = DiffusionSchedule::default();
        let mut rng = SeededRng::new(0, 0);
        let x0 = Tensor::randn(&[32], 1.0, &mut rng);
        let eps = Tensor::randn(&[32], 1.0, &mut rng);
        assert!(
            q_sample(&x0, 0, &eps, &s)
                .unwrap()
                .max_abs_diff(&x0)
                .unwrap()
                < 0.02 * (1.0 + eps.max_abs())
        );
        assert!(
            q_sample(&x0, 999, &eps, &s)
                .unwrap()
                .max_abs_diff(&eps)
                .unwrap()
                < 0.01 * (1.0 + x0.max_abs())
        );
        assert!(matches!(
            q_sample(&x0, 1000, &eps, &s),
            Err(DiffusionError::Timestep { .. })
        ));
    }

    #[test]
    fn q_sample_first_moment() {
        let s = DiffusionSchedule::default();
        let t = 300;
        let x0 = Tensor::from_vec(vec![1.5]);
        let mut rng = SeededRng::new(11, 0);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| {
                q_sample(&x0, t, &Tensor::from_vec(vec![rng.normal()]), &s)
                    .unwrap()
                    .item()
            })
            .sum::<f64>()
            / n as f64;
        let ab = s.alpha_bar(t).unwrap();
        let sd = (1.0 - ab).sqrt();
        assert!((mean - ab.sqrt() * 1.5).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DiffusionSchedule::new(
            ScheduleKind::Linear {
                beta_start: 0.0,
                beta_end: 0.1
            },
            10
        )
        .is_err());
        assert!(DiffusionSchedule::new(ScheduleKind::default(), 1).is_err());
    }
}

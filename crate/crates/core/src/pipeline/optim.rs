use std::collections::BTreeMap;

use crate::reparam::OptimizerState;
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay and global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
        }
    }

    pub fn init_state(params: &BTreeMap<String, Tensor>) -> OptimizerState {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Update `params` in place. Returns the gradient norm before clipping.
    /// Parameters without a gradient are left untouched.
    pub fn step(
        &self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        state: &mut OptimizerState,
    ) -> f64 {
        let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        state.step += 1;
        let t = state.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (
                params.get_mut(name),
                state.m.get_mut(name),
                state.v.get_mut(name),
            ) else {
                continue;
            };
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((p, m), v), &g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
            }
        }
        norm
    }
}

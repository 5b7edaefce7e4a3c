//! AdamW with decoupled weight decay and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::ops::{lit, Real};
use crate::params::{fill, Tensors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to `*.weight` matrices only; biases, norms and the temperature
    /// are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<P> {
    pub step: u64,
    pub m: P,
    pub v: P,
}

impl<P: Clone> AdamWState<P> {
    pub fn new<T: Real>(params: &P) -> Self
    where
        P: Tensors<T>,
    {
        let mut m = params.clone();
        fill(&mut m, T::zero());
        AdamWState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn reset<T: Real>(&mut self)
    where
        P: Tensors<T>,
    {
        self.step = 0;
        fill(&mut self.m, T::zero());
        fill(&mut self.v, T::zero());
    }
}

pub fn adamw_step<T: Real, P: Tensors<T>>(
    params: &mut P,
    grad: &P,
    state: &mut AdamWState<P>,
    config: &AdamWConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = lit::<T>(config.beta1);
    let b2 = lit::<T>(config.beta2);
    let one = T::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let eps = lit::<T>(config.eps);
    let lr_t = lit::<T>(lr);
    let decay = lit::<T>(config.weight_decay);

    let grads = grad.named();
    let mut ms = state.m.named_mut();
    let mut vs = state.v.named_mut();
    for (i, (name, mut p)) in params.named_mut().into_iter().enumerate() {
        let g = &grads[i].1;
        let m = &mut ms[i].1;
        let v = &mut vs[i].1;
        let decayed = name.ends_with(".weight");
        ndarray::Zip::from(&mut p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            let mut update = m_hat / (v_hat.sqrt() + eps);
            if decayed {
                update += decay * *p;
            }
            *p -= lr_t * update;
        });
    }
}

/// `base_lr * factor^(number of decay points <= iteration)`.
pub fn step_decay_lr(base_lr: f64, decay_points: &[u64], factor: f64, iteration: u64) -> f64 {
    let passed = decay_points.iter().filter(|&&p| p <= iteration).count();
    base_lr * factor.powi(passed as i32)
}

//! Adam with an inverse-square-root learning-rate schedule and linear
//! warmup. One optimizer owns the moment state for every named parameter it
//! updates; steps count globally across parameters.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// lr(step) = base * min(step / warmup, sqrt(warmup / step)), peaking at
/// `base` when `step == warmup`. Steps are 1-based.
pub fn inverse_sqrt_lr(base_lr: f64, warmup_steps: usize, step: usize) -> f64 {
    debug_assert!(step >= 1);
    let s = step as f64;
    let w = warmup_steps.max(1) as f64;
    base_lr * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam keyed by an ordered parameter id; defaults follow the transformer
/// training convention (beta1 0.9, beta2 0.98, eps 1e-9).
#[derive(Debug, Clone)]
pub struct Adam<K: Ord + Clone> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    state: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone> Adam<K> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one Adam update to a parameter in place.
    pub fn update(&mut self, key: &K, param: &mut Tensor, grad: &[f64], lr: f64) {
        debug_assert!(self.step >= 1, "begin_step before update");
        debug_assert_eq!(param.numel(), grad.len());
        let n = grad.len();
        let moments = self.state.entry(key.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let data = param.data_mut();
        for i in 0..n {
            moments.m[i] = self.beta1 * moments.m[i] + (1.0 - self.beta1) * grad[i];
            moments.v[i] = self.beta2 * moments.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = moments.m[i] / bias1;
            let v_hat = moments.v[i] / bias2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

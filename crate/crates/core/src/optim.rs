//! AdamW with decoupled weight decay and a multi-step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for one parameter vector. Entries outside the trainable
/// mask are never touched and stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub hp: AdamWParams,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(len: usize, hp: AdamWParams) -> Self {
        AdamW {
            hp,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of `params` restricted to `trainable` (all, when `None`).
    pub fn step(&mut self, params: &mut [T], grads: &[T], trainable: Option<&[bool]>, lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (T::lit(self.hp.beta1), T::lit(self.hp.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(self.step);
        let bc2 = one - b2.powi(self.step);
        let lr_t = T::lit(lr);
        let eps = T::lit(self.hp.eps);
        let decay = one - lr_t * T::lit(self.hp.weight_decay);
        for i in 0..params.len() {
            if let Some(mask) = trainable {
                if !mask[i] {
                    continue;
                }
            }
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let p = &mut params[i];
            if self.hp.weight_decay != 0.0 {
                *p *= decay;
            }
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Phase schedule: base lr decayed by `lr_decay` at each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "half")]
    pub lr_decay: f64,
}

fn half() -> f64 {
    0.5
}

impl PhaseSchedule {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

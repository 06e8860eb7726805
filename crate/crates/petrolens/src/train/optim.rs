//! AdamW with decoupled weight decay, plus the two learning-rate
//! schedules: reduce-on-plateau and cosine annealing.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

use super::{Scheduler, TrainError};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Per-parameter first and second moment estimates, keyed by name so the
/// state survives parameter tensors being replaced each step.
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> AdamW {
        AdamW { lr, weight_decay, step: 0, state: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter present in `grads`. Parameters
    /// without a gradient are left untouched, state included, so frozen
    /// parameters stay bit-identical no matter how many steps run.
    ///
    /// The decay is decoupled: theta -= lr*wd*theta happens alongside the
    /// adaptive step, not through the gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), TrainError> {
        for (name, g) in grads {
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(TrainError::NanGradient { param: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);

        for (name, g) in grads {
            let theta = params
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("no parameter named {name}")))?;
            if theta.shape() != g.shape() {
                return Err(TrainError::Config(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let n = theta.numel();
            let state = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });

            let mut out = theta.data().to_vec();
            for ((w, &gi), (m, v)) in out
                .iter_mut()
                .zip(g.data())
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            let updated = Tensor::from_vec(theta.shape().to_vec(), out)?.requires_grad(true);
            params.insert(name.clone(), updated);
        }
        Ok(())
    }
}

/// lr(t) on the cosine schedule: starts at `lr0`, lands on `lr_final`
/// at t = total.
pub fn cosine_lr(lr0: f32, lr_final: f32, t: usize, total: usize) -> f32 {
    if total == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    let blend = (1.0 + phase.cos()) / 2.0;
    (lr_final as f64 + (lr0 as f64 - lr_final as f64) * blend) as f32
}

/// Tracks the learning rate across epochs. Cosine recomputes from the
/// epoch index; plateau reacts to the monitored quantity (lower is
/// better) fed in through `observe`.
pub struct LrScheduler {
    spec: Scheduler,
    lr0: f32,
    current: f32,
    best: f64,
    stale: usize,
}

impl LrScheduler {
    pub fn new(spec: Scheduler, lr0: f32) -> LrScheduler {
        LrScheduler { spec, lr0, current: lr0, best: f64::INFINITY, stale: 0 }
    }

    /// Learning rate to use for the given zero-based epoch.
    pub fn epoch_lr(&mut self, epoch: usize, total_epochs: usize) -> f32 {
        if let Scheduler::Cosine { final_fraction } = self.spec {
            self.current = cosine_lr(self.lr0, self.lr0 * final_fraction, epoch, total_epochs);
        }
        self.current
    }

    /// Feed the end-of-epoch monitored metric. Only plateau reacts: after
    /// `patience` consecutive epochs without an improvement of at least
    /// `min_delta`, the rate is multiplied by `factor`.
    pub fn observe(&mut self, monitored: f64) {
        let Scheduler::Plateau { factor, patience, min_delta } = self.spec else {
            return;
        };
        if monitored < self.best - min_delta {
            self.best = monitored;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= patience {
                self.current *= factor;
                self.stale = 0;
            }
        }
    }
}

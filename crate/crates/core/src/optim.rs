//! Optimizers and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// AdamW with decoupled weight decay.
    #[default]
    AdaptiveMoment,
    PlainSgd,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// In-place update of `params` from `grad` at learning rate `lr`.
    pub fn step<T: Float>(&mut self, params: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::invalid("optimizer", "parameter/gradient length mismatch"));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::PlainSgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p = T::from_f64_lossy(p.to_f64_lossy() - lr * g.to_f64_lossy());
                }
            }
            OptimizerKind::AdaptiveMoment => {
                if self.m.is_empty() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                } else if self.m.len() != params.len() {
                    return Err(Error::invalid("optimizer", "parameter count changed between steps"));
                }
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i].to_f64_lossy();
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    let mut p = params[i].to_f64_lossy();
                    p -= lr * self.weight_decay * p;
                    p -= lr * mhat / (vhat.sqrt() + self.eps);
                    params[i] = T::from_f64_lossy(p);
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based step `t` of `total`: linear warmup to `eta` over
/// `warmup` steps, then linear decay reaching 0 at step `total`.
pub fn lr_at(eta: f64, t: u64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && t <= warmup {
        eta * t as f64 / warmup as f64
    } else if total <= warmup {
        eta
    } else {
        eta * total.saturating_sub(t) as f64 / (total - warmup) as f64
    }
}

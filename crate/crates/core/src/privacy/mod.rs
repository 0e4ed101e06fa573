//! DP-SGD primitives and the privacy accountant.

mod accountant;
mod dp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use accountant::{
    calibrate, compute_noise_multiplier, default_orders, epsilon_spent, rdp_subsampled_gaussian,
    rdp_to_eps_delta, CalibrationRecord, RdpProfile, SIGMA_BRACKET, SIGMA_TOL,
};
pub use dp::{clip_per_sample, dp_sgd_step, noisy_aggregate, sgd_step, DpStepConfig, StepStats};

/// Privacy target of a run. Dataset size, batch size and step count come
/// from the corpus and the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    /// Skips calibration and uses this σ directly. Breaks the ε guarantee;
    /// for degeneracy checks only.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, clip_norm: f64) -> Self {
        Self {
            epsilon,
            delta,
            clip_norm,
            noise_multiplier: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(
                "privacy.epsilon",
                format!("must be a finite number > 0, got {}", self.epsilon),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(
                "privacy.delta",
                format!("must be in (0, 1), got {}", self.delta),
            ));
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::invalid(
                "privacy.clip_norm",
                format!("must be a finite number > 0, got {}", self.clip_norm),
            ));
        }
        if let Some(s) = self.noise_multiplier {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::invalid(
                    "privacy.noise_multiplier",
                    format!("must be a finite number >= 0, got {s}"),
                ));
            }
        }
        Ok(())
    }

    /// `δ ≥ 1/N` is allowed but flagged.
    pub fn delta_warning(&self, dataset_size: usize) -> Option<String> {
        (self.delta * dataset_size as f64 >= 1.0).then(|| {
            format!(
                "delta {} is not below 1/N = {}",
                self.delta,
                1.0 / dataset_size as f64
            )
        })
    }

    /// σ for this target: the override if set, else the calibrated value.
    pub fn resolve(&self, batch: usize, dataset_size: usize, steps: u64) -> Result<CalibrationRecord> {
        self.validate()?;
        let mut rec = match self.noise_multiplier {
            Some(sigma) => {
                let q = batch as f64 / dataset_size as f64;
                let (eps, order) = if sigma > 0.0 {
                    epsilon_spent(q, sigma, steps, self.delta)?
                } else {
                    (f64::INFINITY, f64::NAN)
                };
                CalibrationRecord {
                    epsilon: eps,
                    delta: self.delta,
                    q,
                    steps,
                    sigma,
                    minimizing_order: order,
                }
            }
            None => calibrate(self.epsilon, self.delta, batch, dataset_size, steps)?,
        };
        if !rec.minimizing_order.is_finite() {
            rec.minimizing_order = 0.0;
        }
        Ok(rec)
    }
}

#[cfg(test)]
mod tests;

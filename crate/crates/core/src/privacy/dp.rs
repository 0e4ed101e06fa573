//! Per-example clipping, noisy aggregation, and the composed DP-SGD step.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::TokenBlock;
use crate::error::{Error, Result};
use crate::model::{Model, ParamSubset};
use crate::optim::Optimizer;
use crate::tensor::Float;

fn l2_norm<T: Float>(g: &[T]) -> f64 {
    g.iter()
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales every example's whole gradient vector to ℓ₂ norm at most `clip`.
/// Returns the pre-clip norms.
pub fn clip_per_sample<T: Float>(grads: &mut [Vec<T>], clip: f64) -> Result<Vec<f64>> {
    if !(clip > 0.0) {
        return Err(Error::invalid("clip_norm", format!("must be > 0, got {clip}")));
    }
    let mut norms = Vec::with_capacity(grads.len());
    for (index, g) in grads.iter_mut().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        let norm = l2_norm(g);
        if norm > clip {
            let s = T::from_f64_lossy(clip / norm);
            g.iter_mut().for_each(|v| *v = *v * s);
        }
        norms.push(norm);
    }
    Ok(norms)
}

/// `(Σᵢ gᵢ + z) / batch_size` with `z ~ N(0, σ²C²·I)`, one draw per
/// coordinate in coordinate order. The sum runs in example order.
pub fn noisy_aggregate<T: Float, R: Rng + ?Sized>(
    clipped: &[Vec<T>],
    sigma: f64,
    clip: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma", format!("must be >= 0, got {sigma}")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    let dim = clipped.first().map_or(0, Vec::len);
    let mut sum = vec![0.0f64; dim];
    for g in clipped {
        if g.len() != dim {
            return Err(Error::invalid("gradients", "records of unequal length"));
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v.to_f64_lossy();
        }
    }
    if sigma > 0.0 {
        let scale = sigma * clip;
        for s in &mut sum {
            let z: f64 = StandardNormal.sample(rng);
            *s += scale * z;
        }
    }
    let inv = 1.0 / batch_size as f64;
    Ok(sum.into_iter().map(|s| T::from_f64_lossy(s * inv)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpStepConfig {
    pub sigma: f64,
    pub clip_norm: f64,
    /// Denominator of the noisy mean: the nominal batch size.
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-example loss before the update.
    pub loss: f64,
    /// Mean per-example gradient norm before clipping.
    pub grad_norm_preclip: f64,
}

/// Per-sample gradients of `subset`, clipped, noised, and applied through the
/// optimizer. Parameters outside `subset` are never written.
#[allow(clippy::too_many_arguments)]
pub fn dp_sgd_step<T: Float, R: Rng + ?Sized>(
    model: &mut Model<T>,
    subset: &ParamSubset,
    batch: &[TokenBlock],
    dp: &DpStepConfig,
    opt: &mut Optimizer,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    let mut g = model.per_sample_grads(subset, batch)?;
    let norms = clip_per_sample(&mut g.grads, dp.clip_norm)?;
    let noisy = noisy_aggregate(&g.grads, dp.sigma, dp.clip_norm, dp.batch_size, rng)?;
    let mut params = model.gather(&g.layout);
    opt.step(&mut params, &noisy, lr)?;
    model.scatter(&g.layout, &params);
    Ok(StepStats {
        loss: g.mean_loss(),
        grad_norm_preclip: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
    })
}

/// Ordinary mini-batch step on the mean gradient of `subset`.
pub fn sgd_step<T: Float>(
    model: &mut Model<T>,
    subset: &ParamSubset,
    batch: &[TokenBlock],
    opt: &mut Optimizer,
    lr: f64,
) -> Result<StepStats> {
    let g = model.per_sample_grads(subset, batch)?;
    for (index, rec) in g.grads.iter().enumerate() {
        if rec.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
    }
    let norm = g.grads.iter().map(|r| l2_norm(r)).sum::<f64>() / g.grads.len().max(1) as f64;
    let mean = g.mean();
    let mut params = model.gather(&g.layout);
    opt.step(&mut params, &mean, lr)?;
    model.scatter(&g.layout, &params);
    Ok(StepStats {
        loss: g.mean_loss(),
        grad_norm_preclip: norm,
    })
}

//! Rényi-DP accountant for the Poisson-subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Versioned order grid: 1.5, 1.75, 2..=64, 128, 256.
pub fn default_orders() -> Vec<f64> {
    let mut out = vec![1.5, 1.75];
    out.extend((2..=64).map(|a| a as f64));
    out.extend([128.0, 256.0]);
    out
}

pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e3);
pub const SIGMA_TOL: f64 = 1e-4;

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    debug_assert!(a >= b, "log_sub would go negative");
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, accurate far into the right tail.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    let r = 1.0 / (2.0 * x * x);
    let series = 1.0 - r + 3.0 * r * r - 15.0 * r.powi(3) + 105.0 * r.powi(4);
    -x * x - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let a = alpha as f64;
    let mut acc = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for i in 0..=alpha {
        let fi = i as f64;
        if i > 0 {
            log_binom += ((a - fi + 1.0) / fi).ln();
        }
        let term = log_binom + fi * lq + (a - fi) * l1q + (fi * fi - fi) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = 2.0 * sigma * sigma;
    let rt = std::f64::consts::SQRT_2 * sigma;
    // generalized binomial coefficient, updated by ratio
    let mut coef = 1.0f64;
    for i in 0..100_000u32 {
        let fi = i as f64;
        if i > 0 {
            coef *= (alpha - fi + 1.0) / fi;
        }
        let log_coef = coef.abs().ln();
        let j = alpha - fi;
        let t0 = log_coef + fi * lq + j * l1q;
        let t1 = log_coef + j * lq + fi * l1q;
        let e0 = 0.5f64.ln() + log_erfc((fi - z0) / rt);
        let e1 = 0.5f64.ln() + log_erfc((z0 - j) / rt);
        let s0 = t0 + (fi * fi - fi) / s2 + e0;
        let s1 = t1 + (j * j - j) / s2 + e1;
        if coef > 0.0 {
            a0 = log_add(a0, s0);
            a1 = log_add(a1, s1);
        } else {
            a0 = log_sub(a0, s0);
            a1 = log_sub(a1, s1);
        }
        if s0.max(s1) < -30.0 {
            return Ok(log_add(a0, a1));
        }
    }
    Err(Error::Calibration(format!(
        "RDP series at order {alpha} did not converge (q = {q}, sigma = {sigma})"
    )))
}

/// Per-step RDP `ε_α` of the Poisson-subsampled Gaussian with sampling rate
/// `q` and noise multiplier `sigma`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("order must be > 1, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("q", format!("sampling rate must be in [0, 1], got {q}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma", format!("must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= 1e6 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)?
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// Per-step RDP curve of one mechanism over a list of orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpProfile {
    pub orders: Vec<f64>,
    pub eps_per_step: Vec<f64>,
}

impl RdpProfile {
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<Self> {
        let eps_per_step = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<_>>()?;
        Ok(Self {
            orders: orders.to_vec(),
            eps_per_step,
        })
    }
}

/// `min_α [T·ε_α + ln(1/δ)/(α − 1)]` and the minimizing order.
pub fn rdp_to_eps_delta(profile: &RdpProfile, steps: u64, delta: f64) -> Result<(f64, f64)> {
    if profile.orders.is_empty() || profile.orders.len() != profile.eps_per_step.len() {
        return Err(Error::invalid("orders", "empty or mismatched order list"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must be in (0, 1), got {delta}")));
    }
    if steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, profile.orders[0]);
    for (&a, &e) in profile.orders.iter().zip(&profile.eps_per_step) {
        let eps = steps as f64 * e + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// `(ε, minimizing order)` spent after `steps` invocations.
pub fn epsilon_spent(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<(f64, f64)> {
    let profile = RdpProfile::subsampled_gaussian(q, sigma, &default_orders())?;
    rdp_to_eps_delta(&profile, steps, delta)
}

/// Output of the noise calibration, echoed into Stage-1 checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub epsilon: f64,
    pub delta: f64,
    pub q: f64,
    pub steps: u64,
    pub sigma: f64,
    pub minimizing_order: f64,
}

fn check_target(epsilon: f64, delta: f64, batch: usize, n: usize, steps: u64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("privacy.epsilon", format!("must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("privacy.delta", format!("must be in (0, 1), got {delta}")));
    }
    if n == 0 {
        return Err(Error::invalid("dataset_size", "must be at least 1"));
    }
    if batch == 0 || batch > n {
        return Err(Error::invalid(
            "batch_size",
            format!("must be in [1, {n}], got {batch}"),
        ));
    }
    if steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    Ok(())
}

/// Smallest σ in the bracket (to [`SIGMA_TOL`]) with `ε(σ) ≤ epsilon`.
pub fn compute_noise_multiplier(
    epsilon: f64,
    delta: f64,
    batch: usize,
    n: usize,
    steps: u64,
) -> Result<f64> {
    Ok(calibrate(epsilon, delta, batch, n, steps)?.sigma)
}

pub fn calibrate(
    epsilon: f64,
    delta: f64,
    batch: usize,
    n: usize,
    steps: u64,
) -> Result<CalibrationRecord> {
    check_target(epsilon, delta, batch, n, steps)?;
    let q = batch as f64 / n as f64;
    let eps_at = |s: f64| epsilon_spent(q, s, steps, delta).map(|r| r.0);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    if eps_at(hi)? > epsilon {
        return Err(Error::Calibration(format!(
            "epsilon {epsilon} not reachable with sigma <= {hi} (q = {q}, steps = {steps}, delta = {delta})"
        )));
    }
    if eps_at(lo)? <= epsilon {
        hi = lo;
    } else {
        while hi - lo > SIGMA_TOL {
            let mid = 0.5 * (lo + hi);
            if eps_at(mid)? <= epsilon {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let (_, order) = epsilon_spent(q, hi, steps, delta)?;
    Ok(CalibrationRecord {
        epsilon,
        delta,
        q,
        steps,
        sigma: hi,
        minimizing_order: order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_limit() {
        assert_eq!(rdp_subsampled_gaussian(1.0, 2.0, 4.0).unwrap(), 0.5);
        for a in [1.5, 2.0, 7.0, 256.0] {
            assert_eq!(rdp_subsampled_gaussian(0.0, 0.7, a).unwrap(), 0.0);
        }
        assert!(rdp_subsampled_gaussian(0.1, 1.0, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(0.1, 1.0, 0.5).is_err());
    }

    #[test]
    fn conversion_closed_form() {
        let p = RdpProfile {
            orders: vec![2.0],
            eps_per_step: vec![0.1],
        };
        let (eps, a) = rdp_to_eps_delta(&p, 1, (-1.0f64).exp()).unwrap();
        assert!((eps - 1.1).abs() < 1e-15);
        assert_eq!(a, 2.0);
        let empty = RdpProfile {
            orders: vec![],
            eps_per_step: vec![],
        };
        assert!(rdp_to_eps_delta(&empty, 1, 0.1).is_err());
    }

    #[test]
    fn log_erfc_is_continuous_at_switch() {
        let below = erfc(19.999_999).ln();
        let above = log_erfc(20.0);
        assert!((below - above).abs() < 1e-4);
        assert!((log_erfc(0.0) - 0.0).abs() < 1e-15);
        assert!((log_erfc(-30.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn integer_and_series_forms_agree_near_integers() {
        // the series form is valid for any real order
        for (q, s) in [(0.01, 1.0), (0.1, 2.0), (0.004, 0.9)] {
            for a in [2.0, 5.0, 12.0] {
                let int = log_a_int(q, s, a as u64);
                let frac = log_a_frac(q, s, a).unwrap();
                assert!(((int - frac) / int).abs() < 1e-9, "q {q} s {s} a {a}: {int} vs {frac}");
            }
        }
    }

    #[test]
    fn calibration_rejects_bad_targets() {
        assert!(matches!(
            calibrate(-1.0, 1e-4, 24, 2480, 100),
            Err(Error::Invalid { ref field, .. }) if field == "privacy.epsilon"
        ));
        assert!(calibrate(1.0, 1.5, 24, 2480, 100).is_err());
        assert!(calibrate(1.0, 1e-4, 3000, 2480, 100).is_err());
        assert!(matches!(
            calibrate(1e-9, 1e-4, 2480, 2480, 100_000),
            Err(Error::Calibration(_))
        ));
    }
}

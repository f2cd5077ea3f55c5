//! α-entmax by threshold bisection.
//!
//! For scores `z` and `α ∈ (1, 2]` the output is
//! `p_i = [(α-1) z_i - τ]_+^{1/(α-1)}` with `τ` chosen so that `Σ p_i = 1`.
//! `α → 1` recovers softmax and `α = 2` is sparsemax.

use crate::error::{MgcotError, Result};

/// Bisection steps on the threshold.
pub const DEFAULT_BISECT_ITERS: usize = 30;

/// Newton refinements after bisection.
const NEWTON_STEPS: usize = 3;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 1.0 && alpha <= 2.0 {
        Ok(())
    } else {
        Err(MgcotError::Config(format!(
            "entmax alpha must lie in (1, 2], got {alpha}"
        )))
    }
}

/// α-entmax over the unmasked entries of `scores`; masked entries are exactly 0.
pub fn entmax_bisect(
    scores: &[f64],
    mask: Option<&[bool]>,
    alpha: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let n_valid = (0..scores.len()).filter(|&i| valid(i)).count();
    if n_valid == 0 {
        return Err(MgcotError::EmptyAttention);
    }
    // Non-finite inputs give an all-NaN result.
    if alpha.is_nan() || (0..scores.len()).any(|i| valid(i) && !scores[i].is_finite()) {
        return Ok(vec![f64::NAN; scores.len()]);
    }
    check_alpha(alpha)?;

    let am1 = alpha - 1.0;
    let exponent = 1.0 / am1;
    let max = (0..scores.len())
        .filter(|&i| valid(i))
        .map(|i| scores[i] * am1)
        .fold(f64::NEG_INFINITY, f64::max);
    // Shifted by the max so the largest entry sits at 0.
    let x: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &z)| if valid(i) { z * am1 - max } else { f64::NEG_INFINITY })
        .collect();

    let mass = |tau: f64| -> f64 {
        x.iter()
            .map(|&xi| if xi > tau { (xi - tau).powf(exponent) } else { 0.0 })
            .sum::<f64>()
    };

    let mut tau_lo = -1.0;
    let tau_hi = -(1.0 / n_valid as f64).powf(am1);
    let mut width = tau_hi - tau_lo;
    for _ in 0..iters {
        width /= 2.0;
        let tau_mid = tau_lo + width;
        if mass(tau_mid) - 1.0 >= 0.0 {
            tau_lo = tau_mid;
        }
    }

    let mut tau = tau_lo;
    for _ in 0..NEWTON_STEPS {
        let mut f = -1.0;
        let mut df = 0.0;
        for &xi in &x {
            if xi > tau {
                let u = xi - tau;
                f += u.powf(exponent);
                df -= exponent * u.powf(exponent - 1.0);
            }
        }
        if df == 0.0 || f <= 0.0 {
            break;
        }
        let next = tau - f / df;
        if !(next > tau && next <= tau_hi) {
            break;
        }
        tau = next;
    }

    let mut p: Vec<f64> = x
        .iter()
        .map(|&xi| if xi > tau { (xi - tau).powf(exponent) } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// Vector-Jacobian product of α-entmax.
///
/// Returns the gradient with respect to the scores and with respect to α,
/// given the forward output `p` and upstream gradient `grad`.
pub fn entmax_backward(p: &[f64], scores: &[f64], alpha: f64, grad: &[f64]) -> (Vec<f64>, f64) {
    let mut s = vec![0.0; p.len()];
    let mut s_sum = 0.0;
    let mut sg = 0.0;
    let mut sz = 0.0;
    let mut entropy = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s[i] = p[i].powf(2.0 - alpha);
            s_sum += s[i];
            sg += s[i] * grad[i];
            sz += s[i] * scores[i];
            entropy -= p[i] * p[i].ln();
        }
    }
    let mean_g = sg / s_sum;
    let d_scores: Vec<f64> = (0..p.len()).map(|i| s[i] * (grad[i] - mean_g)).collect();

    let beta = 1.0 / (alpha - 1.0);
    let dtau = (sz + entropy) / s_sum;
    let d_alpha = (0..p.len())
        .filter(|&i| p[i] > 0.0)
        .map(|i| grad[i] * beta * (-p[i] * p[i].ln() + s[i] * (scores[i] - dtau)))
        .sum();
    (d_scores, d_alpha)
}

/// Plain softmax, used for the α → 1 reference and neighbor fusion.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

//! Pareto-smoothed importance sampling.
//!
//! Follows the reference implementation of the method: the `M` largest log
//! ratios, `M = ceil(min(0.2 S, 3 sqrt(S)))`, are replaced by expected order
//! statistics of a generalized Pareto distribution fitted to their excesses
//! over the next largest value; all weights are then truncated at the raw
//! maximum and normalized. The GPD is fitted by the Zhang-Stephens
//! profile-posterior estimator with the weakly informative shape prior.

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct PsisResult {
    /// Normalized log weights (`log_sum_exp` is zero).
    pub log_weights: Vec<f64>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Estimated Pareto shape; `-inf` for flat ratios, `+inf` when the tail
    /// is too short or degenerate to fit.
    pub khat: f64,
}

const MIN_TAIL: usize = 5;

/// Generalized Pareto fit to positive, ascending-sorted exceedances.
/// Returns `(k, sigma)`.
pub fn gpdfit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt().floor() as usize;
    let xstar = x[((n as f64 / 4.0 + 0.5).floor() as usize).max(1) - 1];
    let xmax = x[n - 1];
    if !(xstar > 0.0) || !(xmax > 0.0) {
        return (f64::INFINITY, f64::NAN);
    }
    let theta: Vec<f64> =
        (1..=m).map(|j| 1.0 / xmax + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar).collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let k = x.iter().map(|&v| (a * v).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let norm = linalg::log_sum_exp(&profile);
    let theta_hat: f64 = theta.iter().zip(&profile).map(|(t, l)| t * (l - norm).exp()).sum();
    let k = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    // Weakly informative prior shrinking k towards 0.5.
    let a = 10.0;
    let k = k * n as f64 / (n as f64 + a) + a * 0.5 / (n as f64 + a);
    if k.is_nan() {
        (f64::INFINITY, sigma)
    } else {
        (k, sigma)
    }
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-15 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Smooths raw log importance ratios.
pub fn psis_smooth(log_ratios: &[f64]) -> Result<PsisResult> {
    let s = log_ratios.len();
    if s < 5 {
        return Err(Error::InvalidArgument(format!("PSIS needs at least 5 draws, got {s}")));
    }
    if log_ratios.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("log importance ratios".into()));
    }
    let max = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let khat = if lw.iter().all(|&v| v == 0.0) { f64::NEG_INFINITY } else { smooth_tail(&mut lw) };
    for v in lw.iter_mut() {
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    let norm = linalg::log_sum_exp(&lw);
    let log_weights: Vec<f64> = lw.iter().map(|v| v - norm).collect();
    let weights = log_weights.iter().map(|v| v.exp()).collect();
    Ok(PsisResult { log_weights, weights, khat })
}

/// Replaces the tail of max-shifted log weights in place; returns k-hat.
fn smooth_tail(lw: &mut [f64]) -> f64 {
    let s = lw.len();
    let tail_len = (0.2 * s as f64).min(3.0 * (s as f64).sqrt()).ceil() as usize;
    if tail_len < MIN_TAIL || tail_len >= s {
        return f64::INFINITY;
    }
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]).then(a.cmp(&b)));
    let tail_ids = &idx[s - tail_len..];
    let tail: Vec<f64> = tail_ids.iter().map(|&i| lw[i]).collect();
    if (tail[tail_len - 1] - tail[0]).abs() < f64::EPSILON / 100.0 {
        return f64::INFINITY;
    }
    let cutoff = lw[idx[s - tail_len - 1]];
    let exp_cutoff = cutoff.exp();
    let excess: Vec<f64> = tail.iter().map(|v| v.exp() - exp_cutoff).collect();
    let (k, sigma) = gpdfit(&excess);
    if k.is_finite() && sigma > 0.0 {
        for (r, &i) in tail_ids.iter().enumerate() {
            let p = (r as f64 + 0.5) / tail_len as f64;
            lw[i] = (gpd_quantile(p, k, sigma) + exp_cutoff).ln();
        }
    }
    k
}

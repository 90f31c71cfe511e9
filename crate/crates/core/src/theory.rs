//! Numeric checks of the reference-model gain identities for least squares.
//!
//! With `P` the hat matrix of `X`, the least squares fit `beta_hat` to `y`
//! and the fit `beta_ref` to a reference fit `mu*` differ in expected loss on
//! fresh data at the same inputs by
//! `G = (|y - mu|_P^2 - |mu* - mu|_P^2) / n`. If `mu* - mu` has mean `b` and
//! covariance `K`, then `E[G] = (sigma^2 p - tr(P K) - |b|_P^2) / n`.
//! Quadratic forms `|v|_P^2` are computed as `|Q_1^T v|^2` from a thin QR.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, LeastSquares};
use crate::rng;

/// Minimum-eigenvalue tolerance for the PSD check on `K`.
pub const PSD_TOL: f64 = 1e-10;

/// Orthonormal basis of the column space of a full-rank design.
#[derive(Debug, Clone)]
pub struct Projector {
    q1: DMatrix<f64>,
}

impl Projector {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if p == 0 || p > n {
            return Err(Error::Singular(format!("{n} x {p} design cannot have full column rank")));
        }
        let qr = x.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if r.diagonal().iter().any(|v| v.abs() <= linalg::RANK_TOL * scale.max(1.0)) {
            return Err(Error::Singular("design is not of full column rank".into()));
        }
        Ok(Self { q1: qr.q() })
    }

    /// `v^T P v`.
    pub fn norm2(&self, v: &DVector<f64>) -> f64 {
        (self.q1.transpose() * v).norm_squared()
    }

    /// `tr(P K) = tr(Q_1^T K Q_1)`.
    pub fn trace_with(&self, k: &DMatrix<f64>) -> f64 {
        (self.q1.transpose() * k * &self.q1).trace()
    }

    /// `tr(P)`, which equals the column count for a full-rank design.
    pub fn trace(&self) -> f64 {
        self.q1.norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainInstance {
    pub x: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma2: f64,
    pub mu_star: DVector<f64>,
    pub y: DVector<f64>,
}

impl GainInstance {
    fn check(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.mu.len() != n || self.mu_star.len() != n || self.y.len() != n {
            return Err(Error::DimensionMismatch("instance vectors must have one entry per row".into()));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::InvalidArgument("sigma2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `E||X beta - y_new||^2 / n` for `y_new ~ N(mu, sigma2 I)`.
fn expected_loss(x: &DMatrix<f64>, beta: &DVector<f64>, mu: &DVector<f64>, sigma2: f64) -> f64 {
    (x * beta - mu).norm_squared() / x.nrows() as f64 + sigma2
}

/// Gain from the two explicit least squares fits.
pub fn gain_direct(inst: &GainInstance) -> Result<f64> {
    inst.check()?;
    let ls = LeastSquares::new(&inst.x)?;
    let beta_hat = ls.solve_vec(&inst.y)?;
    let beta_ref = ls.solve_vec(&inst.mu_star)?;
    Ok(expected_loss(&inst.x, &beta_hat, &inst.mu, inst.sigma2)
        - expected_loss(&inst.x, &beta_ref, &inst.mu, inst.sigma2))
}

/// Gain from the closed form in terms of `P`-norms.
pub fn gain_lemma(inst: &GainInstance) -> Result<f64> {
    inst.check()?;
    let proj = Projector::new(&inst.x)?;
    Ok(lemma_with(&proj, &(&inst.y - &inst.mu), &(&inst.mu_star - &inst.mu), inst.x.nrows()))
}

fn lemma_with(proj: &Projector, noise: &DVector<f64>, ref_error: &DVector<f64>, n: usize) -> f64 {
    (proj.norm2(noise) - proj.norm2(ref_error)) / n as f64
}

fn check_moments(x: &DMatrix<f64>, sigma2: f64, k: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
    let n = x.nrows();
    if k.shape() != (n, n) || b.len() != n {
        return Err(Error::DimensionMismatch("K must be n x n and b of length n".into()));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument("sigma2 must be nonnegative".into()));
    }
    if (k - k.transpose()).amax() > PSD_TOL * k.amax().max(1.0) {
        return Err(Error::InvalidArgument("K is not symmetric".into()));
    }
    let min_eig = k.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -PSD_TOL {
        return Err(Error::InvalidArgument(format!("K is not positive semidefinite (eigenvalue {min_eig})")));
    }
    Ok(())
}

/// `(p / n) (sigma2 - sigma2_ref - |b|_P^2 / p)` for reference errors that
/// are uncorrelated with common variance `sigma2_ref`.
pub fn corollary_gain(n: usize, p: usize, sigma2: f64, sigma2_ref: f64, b_norm2_p: f64) -> f64 {
    p as f64 / n as f64 * (sigma2 - sigma2_ref - b_norm2_p / p as f64)
}

pub fn expected_gain_formula(x: &DMatrix<f64>, sigma2: f64, k: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
    check_moments(x, sigma2, k, b)?;
    let (n, p) = x.shape();
    let proj = Projector::new(x)?;
    let b2 = proj.norm2(b);
    let value = (sigma2 * p as f64 - proj.trace_with(k) - b2) / n as f64;
    let s = k[(0, 0)];
    if (k - DMatrix::<f64>::identity(n, n) * s).amax() == 0.0 {
        let alt = corollary_gain(n, p, sigma2, s, b2);
        if (alt - value).abs() > 1e-10 * (1.0 + value.abs()) {
            return Err(Error::NonFinite(format!("gain formulas disagree: {value} vs {alt}")));
        }
    }
    Ok(value)
}

/// Monte Carlo mean and standard error of the gain with `y = mu + eps`,
/// `eps ~ N(0, sigma2 I)` and `mu* = mu + e`, `e ~ N(b, K)`.
pub fn expected_gain_mc(
    x: &DMatrix<f64>,
    sigma2: f64,
    k: &DMatrix<f64>,
    b: &DVector<f64>,
    mu: &DVector<f64>,
    replications: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_moments(x, sigma2, k, b)?;
    if replications < 100 {
        return Err(Error::InvalidArgument("need at least 100 replications".into()));
    }
    if mu.len() != x.nrows() {
        return Err(Error::DimensionMismatch("mu must have one entry per row".into()));
    }
    let n = x.nrows();
    let proj = Projector::new(x)?;
    let l = linalg::psd_sqrt(k);
    let sd = sigma2.sqrt();
    const CHUNK: usize = 1000;
    let chunks = replications.div_ceil(CHUNK);
    let gains: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut r = rng::stream(seed, c as u64);
            let reps = CHUNK.min(replications - c * CHUNK);
            let mut xi = DVector::zeros(n);
            let mut eps = DVector::zeros(n);
            let mut out = Vec::with_capacity(reps);
            for _ in 0..reps {
                for v in eps.iter_mut() {
                    *v = sd * r.sample::<f64, _>(StandardNormal);
                }
                for v in xi.iter_mut() {
                    *v = r.sample(StandardNormal);
                }
                let y = mu + &eps;
                let mu_star = mu + b + &l * &xi;
                out.push(lemma_with(&proj, &(y - mu), &(mu_star - mu), n));
            }
            out
        })
        .collect();
    Ok(linalg::mean_se(&gains))
}

/// Random full-rank instance with `n` rows and `p` columns.
pub fn random_instance<R: Rng>(r: &mut R, n: usize, p: usize) -> GainInstance {
    let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let mu = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    let sigma2 = 0.1 + r.random::<f64>() * 2.0;
    let sd = sigma2.sqrt();
    let y = DVector::from_fn(n, |i, _| mu[i] + sd * r.sample::<f64, _>(StandardNormal));
    let ref_sd = r.random::<f64>() * 1.5;
    let mu_star = DVector::from_fn(n, |i, _| mu[i] + ref_sd * r.sample::<f64, _>(StandardNormal));
    GainInstance { x, mu, sigma2, mu_star, y }
}

/// Random `(X, K, b)` moment instance; `K = A A^T / m` for a random `n x m` `A`.
pub fn random_moments<R: Rng>(r: &mut R, n: usize, p: usize) -> (DMatrix<f64>, f64, DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let sigma2 = 0.5 + r.random::<f64>();
    let m = 1 + r.random_range(0..n);
    let a = DMatrix::from_fn(n, m, |_, _| r.sample::<f64, _>(StandardNormal));
    let scale = r.random::<f64>();
    let k = &a * a.transpose() * (scale / m as f64);
    let b_scale = r.random::<f64>() * 0.5;
    let b = DVector::from_fn(n, |_, _| b_scale * r.sample::<f64, _>(StandardNormal));
    (x, sigma2, k, b)
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub identity: String,
    pub instances: usize,
    pub max_abs_discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub instances: usize,
    pub mc_instances: usize,
    pub mc_replications: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { instances: 1000, mc_instances: 20, mc_replications: 100_000, seed: 0 }
    }
}

/// Runs the exact identities on random instances and compares the expected
/// gain formula with Monte Carlo. The Monte Carlo row reports the largest
/// discrepancy in units of its standard error.
pub fn verify(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let exact: Vec<(f64, f64, f64)> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, i as u64);
            let n = r.random_range(5..=100);
            let p = r.random_range(1..n);
            let inst = random_instance(&mut r, n, p);
            let direct = gain_direct(&inst)?;
            let lemma = gain_lemma(&inst)?;
            let trace = Projector::new(&inst.x)?.trace();
            let mut scaled = inst.clone();
            scaled.x *= 3.7;
            let lemma_scaled = gain_lemma(&scaled)?;
            Ok(((direct - lemma).abs(), (trace - p as f64).abs(), (lemma_scaled - lemma).abs()))
        })
        .collect::<Result<_>>()?;
    let max = |f: fn(&(f64, f64, f64)) -> f64| exact.iter().map(f).fold(0.0, f64::max);
    let mut rows = vec![
        row("gain_direct == gain_lemma", cfg.instances, max(|t| t.0), 1e-10),
        row("trace(P) == p", cfg.instances, max(|t| t.1), 1e-10),
        row("gain_lemma invariant to scaling X", cfg.instances, max(|t| t.2), 1e-10),
    ];
    if cfg.mc_instances > 0 {
        let mut worst: f64 = 0.0;
        for i in 0..cfg.mc_instances {
            let mut r = rng::stream(cfg.seed ^ 0x7E0, i as u64);
            let n = r.random_range(5..=30);
            let p = r.random_range(1..n);
            let (x, sigma2, mut k, mut b) = random_moments(&mut r, n, p);
            if i == 0 {
                // Break-even case: unbiased reference with the noise variance.
                k = DMatrix::identity(n, n) * sigma2;
                b = DVector::zeros(n);
            }
            let mu = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
            let formula = expected_gain_formula(&x, sigma2, &k, &b)?;
            let (mean, se) =
                expected_gain_mc(&x, sigma2, &k, &b, &mu, cfg.mc_replications, cfg.seed.wrapping_add(i as u64))?;
            worst = worst.max((mean - formula).abs() / se);
        }
        rows.push(row("E[gain] formula vs Monte Carlo (in SE units)", cfg.mc_instances, worst, 3.0));
    }
    Ok(rows)
}

fn row(identity: &str, instances: usize, max_abs_discrepancy: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        identity: identity.to_string(),
        instances,
        max_abs_discrepancy,
        tolerance,
        passed: max_abs_discrepancy < tolerance,
    }
}

pub fn write_report_csv(path: &Path, rows: &[CheckRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["identity", "instances", "max_abs_discrepancy", "tolerance", "passed"])?;
    for r in rows {
        w.write_record([
            r.identity.clone(),
            r.instances.to_string(),
            crate::reference::io::format_f64(r.max_abs_discrepancy),
            crate::reference::io::format_f64(r.tolerance),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

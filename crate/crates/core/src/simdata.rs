//! Synthetic data with a block of features correlated through a latent
//! function, and the feature-ranking experiment built on it.
//!
//! Per observation: `f ~ N(0, 1)`, `y | f ~ N(f, 1)`, relevant features
//! `x_j | f ~ N(sqrt(rho) f, 1 - rho)` and irrelevant features `N(0, 1)`.
//! Relevant features then have unit variance and pairwise correlation `rho`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Family;
use crate::linalg;
use crate::reference::{fit_spc_reference, SpcConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn family(self) -> Family {
        match self {
            Task::Regression => Family::Gaussian,
            Task::Classification => Family::Bernoulli,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n: usize,
    pub p: usize,
    pub p_rel: usize,
    pub rho: f64,
    pub seed: u64,
    pub task: Task,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::InvalidArgument("n and p must be positive".into()));
        }
        if self.p_rel > self.p {
            return Err(Error::InvalidArgument(format!("p_rel = {} exceeds p = {}", self.p_rel, self.p)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Latent function values.
    pub f: Vec<f64>,
}

pub fn generate_toy(config: &ToyConfig) -> Result<ToyData> {
    config.validate()?;
    let ToyConfig { n, p, p_rel, rho, .. } = *config;
    let mut r = rng::seeded(config.seed);
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    let (load, noise) = (rho.sqrt(), (1.0 - rho).sqrt());
    for i in 0..n {
        let fi: f64 = r.sample(StandardNormal);
        let yi = fi + r.sample::<f64, _>(StandardNormal);
        for j in 0..p {
            let z: f64 = r.sample(StandardNormal);
            x[(i, j)] = if j < p_rel { load * fi + noise * z } else { z };
        }
        f.push(fi);
        y.push(match config.task {
            Task::Regression => yi,
            Task::Classification => f64::from(u8::from(yi > 0.0)),
        });
    }
    Ok(ToyData { x, y, f })
}

/// Mean 1-based rank of the first `p_rel` features when all features are
/// sorted by `|corr(x_j, target)|` descending (ties by index).
pub fn mean_relevant_rank(x: &DMatrix<f64>, target: &[f64], p_rel: usize) -> f64 {
    let scores: Vec<f64> = (0..x.ncols())
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            linalg::correlation(&col, target).map_or(0.0, f64::abs)
        })
        .collect();
    let ranks = linalg::descending_ranks(&scores);
    ranks[..p_rel].iter().sum::<usize>() as f64 / p_rel as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankVariant {
    /// Correlation with the observed response.
    Response,
    /// Correlation with the posterior mean fit of the reference model.
    Reference,
    /// Correlation with the true latent function.
    Latent,
}

impl RankVariant {
    pub const ALL: [RankVariant; 3] = [RankVariant::Response, RankVariant::Reference, RankVariant::Latent];

    pub fn name(self) -> &'static str {
        match self {
            RankVariant::Response => "y",
            RankVariant::Reference => "reference",
            RankVariant::Latent => "f",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankConfig {
    pub n: usize,
    pub p: usize,
    pub p_rel: usize,
    pub rhos: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub task: Task,
    pub spc: SpcConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rho: f64,
    pub variant: RankVariant,
    pub mean_rank: f64,
    pub se: f64,
    pub replications: usize,
    /// Replications whose reference fit failed.
    pub dropped: usize,
}

/// Oracle mean rank `(p_rel + 1) / 2`.
pub fn oracle_rank(p_rel: usize) -> f64 {
    (p_rel as f64 + 1.0) / 2.0
}

/// Mean ranks of one replication, ordered as [`RankVariant::ALL`].
fn rank_replication(cfg: &RankConfig, rho: f64, data_seed: u64, ref_seed: u64) -> Result<[f64; 3]> {
    let toy = ToyConfig { n: cfg.n, p: cfg.p, p_rel: cfg.p_rel, rho, seed: data_seed, task: cfg.task };
    let data = generate_toy(&toy)?;
    let spc = SpcConfig { seed: ref_seed, ..cfg.spc.clone() };
    let model = fit_spc_reference(&data.x, &data.y, cfg.task.family(), &spc)?;
    let fit = model.latent_mean();
    Ok([
        mean_relevant_rank(&data.x, &data.y, cfg.p_rel),
        mean_relevant_rank(&data.x, &fit, cfg.p_rel),
        mean_relevant_rank(&data.x, &data.f, cfg.p_rel),
    ])
}

/// Replication `r` at grid index `g` derives its seeds from
/// `stream(seed, g * 2^32 + r)`, so it can be rerun in isolation.
pub fn replication_seeds(seed: u64, g: usize, r: usize) -> (u64, u64) {
    let mut s = rng::stream(seed, ((g as u64) << 32) | r as u64);
    (s.random(), s.random())
}

pub fn rank_experiment(cfg: &RankConfig) -> Result<Vec<RankRow>> {
    if cfg.replications == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    if cfg.p_rel == 0 {
        return Err(Error::InvalidArgument("need at least one relevant feature".into()));
    }
    let mut rows = Vec::new();
    for (g, &rho) in cfg.rhos.iter().enumerate() {
        let results: Vec<Result<[f64; 3]>> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let (data_seed, ref_seed) = replication_seeds(cfg.seed, g, r);
                rank_replication(cfg, rho, data_seed, ref_seed)
            })
            .collect();
        let ok: Vec<[f64; 3]> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let dropped = results.len() - ok.len();
        if dropped > 0 {
            log::warn!("rho {rho}: {dropped} replication(s) dropped after reference failures");
        }
        if ok.is_empty() {
            return Err(Error::Singular(format!("every replication failed at rho {rho}")));
        }
        for (v, variant) in RankVariant::ALL.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|r| r[v]).collect();
            let (mean_rank, se) = linalg::mean_se(&vals);
            rows.push(RankRow { rho, variant: *variant, mean_rank, se, replications: ok.len(), dropped });
        }
    }
    Ok(rows)
}

/// Writes `rho,variant,mean_rank,se` rows.
pub fn write_rank_csv(path: &Path, rows: &[RankRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rho", "variant", "mean_rank", "se"])?;
    for row in rows {
        w.write_record([
            crate::reference::io::format_f64(row.rho),
            row.variant.name().to_string(),
            crate::reference::io::format_f64(row.mean_rank),
            crate::reference::io::format_f64(row.se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(n: usize, p: usize, p_rel: usize, rho: f64, seed: u64) -> ToyConfig {
        ToyConfig { n, p, p_rel, rho, seed, task: Task::Regression }
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(generate_toy(&cfg(10, 5, 6, 0.5, 0)).is_err());
        assert!(generate_toy(&cfg(10, 5, 2, 1.0, 0)).is_err());
        assert!(generate_toy(&cfg(10, 5, 2, -0.1, 0)).is_err());
    }

    #[test]
    fn deterministic() {
        let a = generate_toy(&cfg(20, 7, 3, 0.4, 9)).unwrap();
        let b = generate_toy(&cfg(20, 7, 3, 0.4, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn large_sample_moments() {
        let d = generate_toy(&cfg(100_000, 4, 3, 0.8, 1)).unwrap();
        let col = |j: usize| -> Vec<f64> { d.x.column(j).iter().copied().collect() };
        for j in 0..4 {
            let c = col(j);
            let m = linalg::mean(&c);
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
            assert_abs_diff_eq!(var, 1.0, epsilon = 0.02);
        }
        assert_abs_diff_eq!(linalg::correlation(&col(0), &col(1)).unwrap(), 0.8, epsilon = 0.02);
        assert_abs_diff_eq!(linalg::correlation(&col(1), &col(2)).unwrap(), 0.8, epsilon = 0.02);
        assert_abs_diff_eq!(linalg::correlation(&col(0), &d.y).unwrap(), 0.4f64.sqrt(), epsilon = 0.02);
        assert!(linalg::correlation(&col(3), &d.f).unwrap().abs() < 0.02);
    }

    #[test]
    fn classification_labels_are_balanced() {
        let d = generate_toy(&ToyConfig { task: Task::Classification, ..cfg(2000, 2, 1, 0.5, 4) }).unwrap();
        assert!(d.y.iter().all(|v| *v == 0.0 || *v == 1.0));
        let frac = d.y.iter().sum::<f64>() / 2000.0;
        assert!((frac - 0.5).abs() < 3.0 / 2000f64.sqrt());
    }

    #[test]
    fn oracle_rank_value() {
        assert_eq!(oracle_rank(150), 75.5);
        let d = generate_toy(&cfg(50, 6, 2, 0.5, 2)).unwrap();
        // Ranking against a target equal to the relevant block's sum is
        // close to perfect.
        let target: Vec<f64> = (0..50).map(|i| d.x[(i, 0)] + d.x[(i, 1)]).collect();
        assert_eq!(mean_relevant_rank(&d.x, &target, 2), 1.5);
    }
}

//! Simulation studies on the correlated-feature data: penalized versus
//! relaxed L1 orderings on test data, and selection once versus inside every
//! LOO fold.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Family;
use crate::linalg;
use crate::projection::{self, cluster_draws, ReferenceFit};
use crate::reference::{fit_linear_reference, fit_spc_reference, LinearConfig, SpcConfig};
use crate::rng;
use crate::search::{self, SearchConfig, SearchMethod};
use crate::simdata::{generate_toy, Task, ToyConfig};
use crate::validation::{cv_varsel, eval_test, CvOptions, RefSource, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxConfig {
    pub n: usize,
    pub p: usize,
    pub p_rel: usize,
    pub rho: f64,
    pub n_test: usize,
    pub replications: usize,
    pub max_size: usize,
    pub seed: u64,
    pub spc: SpcConfig,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            n: 50,
            p: 500,
            p_rel: 50,
            rho: 0.5,
            n_test: 1000,
            replications: 50,
            max_size: 25,
            seed: 0,
            spc: SpcConfig::default(),
        }
    }
}

/// Per-size results of one data realization. Deltas are test MLPD minus the
/// reference model's test MLPD.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxReplication {
    pub delta_relaxed: Vec<f64>,
    pub delta_penalized: Vec<f64>,
    /// Noise sd of least squares refits on the lasso ordering, with the
    /// residual sum of squares divided by `n - k`.
    pub lasso_sigma: Vec<f64>,
    pub projected_sigma: Vec<f64>,
    /// Square root of the reference's mean predictive variance.
    pub ref_sigma: f64,
}

/// Mean and standard error across replications, per size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl Curve {
    fn across(rows: &[&[f64]]) -> Self {
        let sizes = rows.iter().map(|r| r.len()).min().unwrap_or(0);
        let (mean, se) = (0..sizes).map(|k| linalg::mean_se(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).unzip();
        Self { mean, se }
    }

    /// Smallest size whose mean is within one standard error of zero or above.
    pub fn first_within_one_se(&self) -> Option<usize> {
        (0..self.mean.len()).find(|&k| self.mean[k] + self.se[k] >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxSummary {
    pub relaxed: Curve,
    pub penalized: Curve,
    pub lasso_sigma: Curve,
    pub projected_sigma: Curve,
    pub replications: Vec<RelaxReplication>,
    pub dropped: usize,
}

fn relax_replication(cfg: &RelaxConfig, r: usize) -> Result<RelaxReplication> {
    let mut seeds = rng::stream(cfg.seed, r as u64);
    let data_seed: u64 = rand::Rng::random(&mut seeds);
    let ref_seed: u64 = rand::Rng::random(&mut seeds);
    let toy = ToyConfig {
        n: cfg.n + cfg.n_test,
        p: cfg.p,
        p_rel: cfg.p_rel,
        rho: cfg.rho,
        seed: data_seed,
        task: Task::Regression,
    };
    let data = generate_toy(&toy)?;
    let x = data.x.rows(0, cfg.n).into_owned();
    let y = &data.y[..cfg.n];
    let x_test = data.x.rows(cfg.n, cfg.n_test).into_owned();
    let y_test = &data.y[cfg.n..];

    let model = fit_spc_reference(&x, y, Family::Gaussian, &SpcConfig { seed: ref_seed, ..cfg.spc.clone() })?;
    let fit = cluster_draws(&model.draws, Family::Gaussian, 1, ref_seed)?;
    let search = SearchConfig { method: SearchMethod::L1, max_size: cfg.max_size, ..SearchConfig::default() };
    let relaxed = search::build_path(&x, &fit, &fit, &SearchConfig { relax: true, ..search.clone() })?;
    let penalized = search::build_path(&x, &fit, &fit, &SearchConfig { relax: false, ..search.clone() })?;
    let delta_relaxed = eval_test(&relaxed, &model, &x_test, y_test)?.delta_mlpd;
    let delta_penalized = eval_test(&penalized, &model, &x_test, y_test)?.delta_mlpd;
    let projected_sigma =
        relaxed.submodels.iter().map(|s| s.dispersions.as_ref().map_or(f64::NAN, |d| d[0].sqrt())).collect();
    let vars = fit.cluster_vars(0).expect("gaussian fits carry variances");
    let ref_sigma = vars.mean().sqrt();
    let lasso_sigma = relaxed_lasso_sigma(&x, y, &search)?;
    Ok(RelaxReplication { delta_relaxed, delta_penalized, lasso_sigma, projected_sigma, ref_sigma })
}

/// Lasso ordering on the observed responses, then an unpenalized least
/// squares refit per size with noise sd `sqrt(RSS / (n - k))`.
pub fn relaxed_lasso_sigma(x: &DMatrix<f64>, y: &[f64], config: &SearchConfig) -> Result<Vec<f64>> {
    let n = x.nrows();
    let data = ReferenceFit::point(Family::Gaussian, y.to_vec(), Some(vec![0.0; n]))?;
    let path = search::l1_path(x, &data, &SearchConfig { method: SearchMethod::L1, ..config.clone() })?;
    let max_size = config.effective_max_size(n, x.ncols()).min(path.order.len());
    (0..=max_size)
        .map(|k| {
            let sub = projection::project(x, &path.order[..k], &data, 0.0)?;
            let fitted = sub.predictive_means(x)?;
            let rss: f64 = fitted.iter().zip(y).map(|(f, y)| (f - y).powi(2)).sum();
            Ok((rss / (n - k) as f64).sqrt())
        })
        .collect()
}

pub fn relax_experiment(cfg: &RelaxConfig) -> Result<RelaxSummary> {
    if cfg.replications == 0 || cfg.n_test < 2 {
        return Err(Error::InvalidArgument("need replications and at least two test points".into()));
    }
    let results: Vec<Result<RelaxReplication>> =
        (0..cfg.replications).into_par_iter().map(|r| relax_replication(cfg, r)).collect();
    let dropped = results.iter().filter(|r| r.is_err()).count();
    for e in results.iter().filter_map(|r| r.as_ref().err()) {
        log::warn!("replication dropped: {e}");
    }
    let reps: Vec<RelaxReplication> = results.into_iter().filter_map(Result::ok).collect();
    if reps.is_empty() {
        return Err(Error::Singular("every replication failed".into()));
    }
    let curve = |f: fn(&RelaxReplication) -> &[f64]| Curve::across(&reps.iter().map(f).collect::<Vec<_>>());
    Ok(RelaxSummary {
        relaxed: curve(|r| &r.delta_relaxed),
        penalized: curve(|r| &r.delta_penalized),
        lasso_sigma: curve(|r| &r.lasso_sigma),
        projected_sigma: curve(|r| &r.projected_sigma),
        replications: reps,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub n: usize,
    pub p: usize,
    pub p_rel: usize,
    pub rho: f64,
    pub replications: usize,
    pub seed: u64,
    pub search: SearchConfig,
    pub clusters_predict: usize,
    pub n_draws: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            n: 50,
            p: 50,
            p_rel: 25,
            rho: 0.8,
            replications: 20,
            seed: 0,
            search: SearchConfig { max_size: 10, ..SearchConfig::default() },
            clusters_predict: 20,
            n_draws: 4000,
        }
    }
}

/// LOO relative MLPD per size with the search repeated inside every fold and
/// with the full-data ordering reused in every fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReplication {
    pub per_fold: Vec<f64>,
    pub once: Vec<f64>,
}

impl BiasReplication {
    /// Mean of `once - per_fold` over sizes `1..=max`.
    pub fn gap(&self, max: usize) -> f64 {
        let top = max.min(self.once.len().min(self.per_fold.len()) - 1);
        (1..=top).map(|k| self.once[k] - self.per_fold[k]).sum::<f64>() / top as f64
    }
}

fn bias_replication(cfg: &BiasConfig, r: usize) -> Result<BiasReplication> {
    let mut seeds = rng::stream(cfg.seed, r as u64);
    let data_seed: u64 = rand::Rng::random(&mut seeds);
    let ref_seed: u64 = rand::Rng::random(&mut seeds);
    let toy = ToyConfig { n: cfg.n, p: cfg.p, p_rel: cfg.p_rel, rho: cfg.rho, seed: data_seed, task: Task::Regression };
    let data = generate_toy(&toy)?;
    let model = fit_linear_reference(
        &data.x,
        &data.y,
        Family::Gaussian,
        &LinearConfig { n_draws: cfg.n_draws, seed: ref_seed, ..LinearConfig::default() },
    )?;
    let run = |per_fold: bool| {
        let opts = CvOptions {
            scheme: Scheme::Loo,
            search: cfg.search.clone(),
            clusters_select: 1,
            clusters_predict: cfg.clusters_predict,
            seed: ref_seed,
            search_per_fold: per_fold,
        };
        cv_varsel(&data.x, &data.y, Family::Gaussian, RefSource::Model(&model), &opts).map(|r| r.summary.delta_mean)
    };
    Ok(BiasReplication { per_fold: run(true)?, once: run(false)? })
}

pub fn selection_bias_experiment(cfg: &BiasConfig) -> Result<Vec<BiasReplication>> {
    if cfg.replications == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    (0..cfg.replications).into_par_iter().map(|r| bias_replication(cfg, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_relax_run_has_consistent_shapes() {
        let cfg = RelaxConfig {
            n: 30,
            p: 40,
            p_rel: 5,
            n_test: 50,
            replications: 2,
            max_size: 5,
            spc: SpcConfig { n_draws: 200, ..SpcConfig::default() },
            ..RelaxConfig::default()
        };
        let s = relax_experiment(&cfg).unwrap();
        assert_eq!(s.replications.len(), 2);
        assert_eq!(s.relaxed.mean.len(), 6);
        for rep in &s.replications {
            assert!(
                (rep.delta_relaxed[0] - rep.delta_penalized[0]).abs() < 1e-9,
                "{} {}",
                rep.delta_relaxed[0],
                rep.delta_penalized[0]
            );
            for sd in &rep.projected_sigma {
                assert!(*sd >= rep.ref_sigma * (1.0 - 1e-12), "{sd} vs {}", rep.ref_sigma);
            }
        }
    }

    #[test]
    fn lasso_sigma_at_size_zero_is_sample_sd() {
        let toy = ToyConfig { n: 40, p: 10, p_rel: 3, rho: 0.5, seed: 3, task: Task::Regression };
        let d = generate_toy(&toy).unwrap();
        let s = relaxed_lasso_sigma(&d.x, &d.y, &SearchConfig { max_size: 3, ..SearchConfig::default() }).unwrap();
        let m = linalg::mean(&d.y);
        let sd = (d.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 40.0).sqrt();
        assert!((s[0] - sd).abs() < 1e-12);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn gap_averages_over_sizes() {
        let rep = BiasReplication { per_fold: vec![0.0, -1.0, -0.5], once: vec![0.0, -0.5, -0.5] };
        assert_eq!(rep.gap(5), 0.25);
    }
}

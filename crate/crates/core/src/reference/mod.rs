//! Reference models: a supervised principal components model with a Bayesian
//! linear head, a Bayesian linear model on the raw features, or posterior
//! draws produced elsewhere and ingested from files.

mod conjugate;
pub mod io;
mod spc;

pub use conjugate::{default_tau_base, student_t_log_density, tau_grid, BayesHead, TauPrior, TAU_GRID_POINTS};
pub use spc::{abs_correlations, gamma_grid, screen, supervised_pcs, Spc};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, DesignMatrix, Family};
use crate::linalg;
use crate::projection::PosteriorDraws;
use crate::rng;
use crate::validation::fold_ids;

/// How the reference design is derived from raw features.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceKind {
    Spc {
        spc: Spc,
        gamma: f64,
        gamma_grid: Vec<f64>,
        /// Cross-validated MLPD per grid value; `-inf` where a fold failed.
        cv_mlpd: Vec<f64>,
    },
    /// Intercept plus all raw features.
    Linear,
    /// Draws over an externally supplied design.
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub family: Family,
    pub draws: PosteriorDraws,
    pub kind: ReferenceKind,
}

impl ReferenceModel {
    /// Reference design rows for new raw-feature rows.
    pub fn design_for(&self, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = match &self.kind {
            ReferenceKind::Spc { spc, .. } => spc.scores(x_new),
            ReferenceKind::Linear => x_new.clone(),
            ReferenceKind::Ingested => {
                return Err(Error::InvalidArgument(
                    "ingested references cannot map new raw features; supply their reference design".into(),
                ))
            }
        };
        Ok(DesignMatrix::with_intercept(&z)?.into_values())
    }

    /// `log (1/S) sum_s p(y_i | theta_s)` at new reference-design rows.
    pub fn log_predictive_at(&self, z_new: &DMatrix<f64>, y_new: &[f64]) -> Result<Vec<f64>> {
        if z_new.nrows() != y_new.len() {
            return Err(Error::DimensionMismatch("new design and responses differ in length".into()));
        }
        for &v in y_new {
            self.family.validate_response(v)?;
        }
        let eta = self.draws.latent_at(z_new)?;
        let disp = self.draws.dispersions();
        let s_count = eta.nrows();
        let log_s = (s_count as f64).ln();
        let mut terms = vec![0.0; s_count];
        Ok((0..z_new.nrows())
            .map(|i| {
                for s in 0..s_count {
                    let d = disp.as_ref().map_or(1.0, |d| d[s]);
                    terms[s] = glm::log_lik_unchecked(self.family, y_new[i], eta[(s, i)], d);
                }
                linalg::log_sum_exp(&terms) - log_s
            })
            .collect())
    }

    /// Log predictive densities at new raw-feature rows.
    pub fn log_predictive(&self, x_new: &DMatrix<f64>, y_new: &[f64]) -> Result<Vec<f64>> {
        self.log_predictive_at(&self.design_for(x_new)?, y_new)
    }

    /// Posterior predictive mean at new raw-feature rows.
    pub fn predictive_mean(&self, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
        let eta = self.draws.latent_at(&self.design_for(x_new)?)?;
        Ok((0..eta.ncols())
            .map(|i| eta.column(i).iter().map(|&e| self.family.inverse_link(e)).sum::<f64>() / eta.nrows() as f64)
            .collect())
    }

    /// Posterior mean of the linear predictor at the training points.
    pub fn latent_mean(&self) -> Vec<f64> {
        let eta = self.draws.latent();
        (0..eta.ncols()).map(|i| eta.column(i).mean()).collect()
    }
}

/// Anything that can fit a reference model to training data, e.g. inside
/// cross-validation folds.
pub trait ReferenceBuilder: Sync {
    fn build(&self, x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<ReferenceModel>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcConfig {
    pub n_components: usize,
    pub n_gamma: usize,
    pub cv_folds: usize,
    pub n_draws: usize,
    pub seed: u64,
    pub tau: TauPrior,
}

impl Default for SpcConfig {
    fn default() -> Self {
        Self { n_components: 3, n_gamma: 7, cv_folds: 5, n_draws: 4000, seed: 0, tau: TauPrior::default() }
    }
}

impl ReferenceBuilder for SpcConfig {
    fn build(&self, x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<ReferenceModel> {
        fit_spc_reference(x, y, family, self)
    }
}

/// Bayesian linear regression on the intercept plus all raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub tau: TauPrior,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { tau: TauPrior::default(), n_draws: 4000, seed: 0 }
    }
}

impl ReferenceBuilder for LinearConfig {
    fn build(&self, x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<ReferenceModel> {
        fit_linear_reference(x, y, family, self)
    }
}

fn sample_draws(head: &BayesHead, design: DesignMatrix, n_draws: usize, seed: u64) -> Result<PosteriorDraws> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one posterior draw".into()));
    }
    let mut r = rng::stream(seed, 1);
    let (betas, sigmas) = head.sample(n_draws, &mut r)?;
    PosteriorDraws::new(betas, sigmas, design)
}

pub fn fit_linear_reference(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    config: &LinearConfig,
) -> Result<ReferenceModel> {
    let design = DesignMatrix::with_intercept(x)?;
    let head = BayesHead::fit(family, &design, y, config.tau)?;
    let draws = sample_draws(&head, design, config.n_draws, config.seed)?;
    Ok(ReferenceModel { family, draws, kind: ReferenceKind::Linear })
}

/// Held-out log predictive density sum of the SPC head for one fold.
fn spc_fold_score(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    gamma: f64,
    train: &[usize],
    test: &[usize],
    config: &SpcConfig,
) -> Result<f64> {
    let x_train = x.select_rows(train);
    let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let r = abs_correlations(&x_train, &y_train);
    let mask = match spc::screen_with(&r, gamma) {
        Ok(m) => m,
        // Keep the single most correlated feature rather than failing.
        Err(Error::EmptyScreen(_)) => {
            let best = r
                .iter()
                .enumerate()
                .filter_map(|(j, v)| v.map(|v| (j, v)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .ok_or_else(|| Error::InvalidArgument("no usable feature in fold".into()))?;
            vec![best.0]
        }
        Err(e) => return Err(e),
    };
    let spc = Spc::fit(&x_train, mask, config.n_components)?;
    let z_train = DesignMatrix::with_intercept(&spc.scores(&x_train))?;
    let head = BayesHead::fit(family, &z_train, &y_train, config.tau)?;
    let x_test = x.select_rows(test);
    let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let z_test = DesignMatrix::with_intercept(&spc.scores(&x_test))?;
    Ok(head.log_predictive(z_test.values(), &y_test)?.iter().sum())
}

/// Fits the supervised principal components reference model, choosing the
/// screening threshold by K-fold cross-validated MLPD of the head model.
pub fn fit_spc_reference(x: &DMatrix<f64>, y: &[f64], family: Family, config: &SpcConfig) -> Result<ReferenceModel> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} responses for {n} rows", y.len())));
    }
    if config.n_components == 0 || config.n_gamma < 2 || config.cv_folds < 2 {
        return Err(Error::InvalidArgument("need n_components >= 1, n_gamma >= 2 and cv_folds >= 2".into()));
    }
    if n < config.cv_folds {
        return Err(Error::InvalidArgument(format!("{n} observations for {} folds", config.cv_folds)));
    }
    for &v in y {
        family.validate_response(v)?;
    }
    let r = abs_correlations(x, y);
    let grid = gamma_grid(&r, config.n_gamma)?;
    let folds = fold_ids(y, family, config.cv_folds, config.seed)?;
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..config.cv_folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] == f);
            (train, test)
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..config.cv_folds).map(move |f| (g, f))).collect();
    let scores: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(g, f)| {
            let (train, test) = &fold_rows[f];
            match spc_fold_score(x, y, family, grid[g], train, test, config) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("gamma {} fold {f} failed: {e}", grid[g]);
                    None
                }
            }
        })
        .collect();
    let cv_mlpd: Vec<f64> = (0..grid.len())
        .map(|g| {
            let s = &scores[g * config.cv_folds..(g + 1) * config.cv_folds];
            if s.iter().all(Option::is_some) {
                s.iter().flatten().sum::<f64>() / n as f64
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let best = (0..grid.len())
        .filter(|&g| cv_mlpd[g].is_finite())
        // Ties go to the larger threshold, i.e. the sparser screen.
        .max_by(|&a, &b| cv_mlpd[a].total_cmp(&cv_mlpd[b]).then(a.cmp(&b)))
        .ok_or_else(|| Error::Singular("cross-validation failed for every screening threshold".into()))?;
    let gamma = grid[best];
    let mask = spc::screen_with(&r, gamma)?;
    let spc = Spc::fit(x, mask, config.n_components)?;
    let design = DesignMatrix::with_intercept(&spc.scores(x))?;
    let head = BayesHead::fit(family, &design, y, config.tau)?;
    let draws = sample_draws(&head, design, config.n_draws, config.seed)?;
    Ok(ReferenceModel { family, draws, kind: ReferenceKind::Spc { spc, gamma, gamma_grid: grid, cv_mlpd } })
}

/// Global shrinkage scale `p0 / (p - p0) * sigma / sqrt(n)` for an expected
/// number `p0` of relevant features.
pub fn tau0(p0: f64, p: f64, sigma: f64, n: f64) -> Result<f64> {
    if !(p0 > 0.0 && p0 < p) {
        return Err(Error::InvalidArgument(format!("need 0 < p0 < p, got p0 = {p0}, p = {p}")));
    }
    if !(sigma > 0.0) || !(n >= 1.0) {
        return Err(Error::InvalidArgument("need sigma > 0 and n >= 1".into()));
    }
    Ok(p0 / (p - p0) * sigma / n.sqrt())
}

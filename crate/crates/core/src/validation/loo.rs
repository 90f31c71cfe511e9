//! PSIS leave-one-out reference fits.
//!
//! Draws are reweighted by smoothed `1 / p(y_i | theta_s)` and summarized
//! over the full-data cluster assignment, so no reference refit and no
//! re-clustering is needed per point.

use nalgebra::DMatrix;

use super::psis::{psis_smooth, PsisResult};
use crate::error::{Error, Result};
use crate::glm::{self, Family};
use crate::linalg;
use crate::projection::{cluster_assignment, PosteriorDraws, ReferenceFit};

/// `log p(y_i | theta_s)` as an S x n matrix.
pub fn pointwise_log_lik(draws: &PosteriorDraws, family: Family, y: &[f64]) -> Result<DMatrix<f64>> {
    draws.check_family(family)?;
    if y.len() != draws.n_obs() {
        return Err(Error::DimensionMismatch(format!("{} responses for {} observations", y.len(), draws.n_obs())));
    }
    for &v in y {
        family.validate_response(v)?;
    }
    let latent = draws.latent();
    let disp = draws.dispersions();
    Ok(DMatrix::from_fn(latent.nrows(), latent.ncols(), |s, i| {
        glm::log_lik_unchecked(family, y[i], latent[(s, i)], disp.as_ref().map_or(1.0, |d| d[s]))
    }))
}

/// Leave-one-out reference summaries for a single point.
#[derive(Debug, Clone)]
pub struct LooPoint {
    pub index: usize,
    pub khat: f64,
    /// `log sum_s w_s p(y_i | theta_s)`.
    pub u_ref: f64,
    /// Normalized smoothed draw weights.
    pub weights: Vec<f64>,
    /// Selection and prediction fits over the other `n - 1` points.
    pub fit_select: ReferenceFit,
    pub fit_predict: ReferenceFit,
}

/// Shared state for computing many leave-one-out fits.
#[derive(Debug, Clone)]
pub struct LooContext {
    family: Family,
    latent: DMatrix<f64>,
    dispersions: Option<Vec<f64>>,
    log_lik: DMatrix<f64>,
    select: Vec<Vec<usize>>,
    predict: Vec<Vec<usize>>,
}

impl LooContext {
    pub fn new(
        draws: &PosteriorDraws,
        family: Family,
        y: &[f64],
        clusters_select: usize,
        clusters_predict: usize,
        seed: u64,
    ) -> Result<Self> {
        let log_lik = pointwise_log_lik(draws, family, y)?;
        let latent = draws.latent();
        let select = cluster_assignment(&latent, clusters_select, seed)?;
        let predict = if clusters_predict == clusters_select {
            select.clone()
        } else {
            cluster_assignment(&latent, clusters_predict, seed)?
        };
        Ok(Self { family, latent, dispersions: draws.dispersions(), log_lik, select, predict })
    }

    pub fn n_obs(&self) -> usize {
        self.latent.ncols()
    }

    pub fn log_lik(&self) -> &DMatrix<f64> {
        &self.log_lik
    }

    /// Smoothed weights for leaving out point `i`.
    pub fn psis(&self, i: usize) -> Result<PsisResult> {
        let raw: Vec<f64> = self.log_lik.column(i).iter().map(|v| -v).collect();
        psis_smooth(&raw)
    }

    /// Pareto k-hat of every point.
    pub fn khats(&self) -> Result<Vec<f64>> {
        (0..self.n_obs()).map(|i| self.psis(i).map(|r| r.khat)).collect()
    }

    fn fit(&self, latent: &DMatrix<f64>, assignment: &[Vec<usize>], weights: &[f64]) -> Result<ReferenceFit> {
        ReferenceFit::from_latent(self.family, latent, self.dispersions.as_deref(), assignment.to_vec(), Some(weights))
    }

    /// Unweighted full-data fit on the selection or prediction partition;
    /// equal to [`crate::projection::cluster_draws`] with the same seed.
    pub fn reference_fit(&self, predict: bool) -> Result<ReferenceFit> {
        let assignment = if predict { &self.predict } else { &self.select };
        ReferenceFit::from_latent(self.family, &self.latent, self.dispersions.as_deref(), assignment.clone(), None)
    }

    /// Reweighted fit over all `n` observations with the given cluster count
    /// (either the selection or prediction partition).
    pub fn full_fit(&self, i: usize, predict: bool) -> Result<(ReferenceFit, f64)> {
        let ps = self.psis(i)?;
        let weights = floor_weights(&ps.weights);
        let assignment = if predict { &self.predict } else { &self.select };
        Ok((self.fit(&self.latent, assignment, &weights)?, ps.khat))
    }

    pub fn point(&self, i: usize) -> Result<LooPoint> {
        if i >= self.n_obs() {
            return Err(Error::InvalidArgument(format!("point {i} out of range")));
        }
        let ps = self.psis(i)?;
        let u_ref = linalg::log_sum_exp(
            &ps.log_weights.iter().zip(self.log_lik.column(i).iter()).map(|(w, l)| w + l).collect::<Vec<_>>(),
        );
        let weights = floor_weights(&ps.weights);
        let latent = self.latent.clone().remove_column(i);
        let fit_select = self.fit(&latent, &self.select, &weights)?;
        let fit_predict = if self.predict.len() == self.select.len() {
            fit_select.clone()
        } else {
            self.fit(&latent, &self.predict, &weights)?
        };
        Ok(LooPoint { index: i, khat: ps.khat, u_ref, weights: ps.weights, fit_select, fit_predict })
    }
}

/// Keeps every draw at a positive weight so no cluster vanishes through
/// underflow.
fn floor_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| v.max(f64::MIN_POSITIVE)).collect()
}

/// PSIS-LOO reference fit for point `i` over all observations, using `c`
/// clusters of the full-data assignment. Returns the fit and k-hat.
pub fn loo_reference_fit(
    draws: &PosteriorDraws,
    family: Family,
    y: &[f64],
    i: usize,
    c: usize,
    seed: u64,
) -> Result<(ReferenceFit, f64)> {
    if i >= y.len() {
        return Err(Error::InvalidArgument(format!("point {i} out of range")));
    }
    LooContext::new(draws, family, y, c, c, seed)?.full_fit(i, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::DesignMatrix;
    use crate::projection::cluster_draws;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn identical_draws_leave_fit_unchanged() {
        let mut rng = crate::rng::seeded(1);
        let x = DMatrix::from_fn(10, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let design = DesignMatrix::with_intercept(&x).unwrap();
        let betas = DMatrix::from_fn(20, 3, |_, j| [0.2, 1.0, -0.5][j]);
        let draws = PosteriorDraws::new(betas, Some(vec![0.8; 20]), design).unwrap();
        let y: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let full = cluster_draws(&draws, Family::Gaussian, 1, 0).unwrap();
        let (loo, khat) = loo_reference_fit(&draws, Family::Gaussian, &y, 3, 1, 0).unwrap();
        assert_eq!(khat, f64::NEG_INFINITY);
        for i in 0..10 {
            assert_abs_diff_eq!(loo.means()[(0, i)], full.means()[(0, i)], epsilon = 1e-12);
            assert_abs_diff_eq!(loo.vars().unwrap()[(0, i)], full.vars().unwrap()[(0, i)], epsilon = 1e-12);
        }
    }

    #[test]
    fn point_fit_drops_the_left_out_row() {
        let mut rng = crate::rng::seeded(2);
        let x = DMatrix::from_fn(12, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let design = DesignMatrix::with_intercept(&x).unwrap();
        let betas = DMatrix::from_fn(50, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draws = PosteriorDraws::new(betas, None, design).unwrap();
        let y: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let ctx = LooContext::new(&draws, Family::Bernoulli, &y, 1, 5, 3).unwrap();
        let pt = ctx.point(4).unwrap();
        assert_eq!(pt.fit_select.n_obs(), 11);
        assert_eq!(pt.fit_predict.n_clusters(), 5);
        assert_abs_diff_eq!(pt.fit_predict.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(pt.u_ref.is_finite() && pt.u_ref < 0.0);
    }
}

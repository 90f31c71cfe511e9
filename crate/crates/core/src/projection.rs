//! KL projection of a reference posterior onto feature subsets.
//!
//! The reference is summarized per cluster of posterior draws by its
//! predictive means `mu*` (and, for the Gaussian family, predictive variances
//! `V`). Projecting one cluster is a GLM fit with `mu*` as pseudo-targets.
//! Single-point projection is the one-cluster case and draw-by-draw
//! projection the one-draw-per-cluster case.
//!
//! Losses are per-observation KL divergences from the reference predictive
//! to the projected one. Within a cluster the Bernoulli reference predictive
//! is exactly `Bernoulli(mu*)`. For Poisson the within-cluster mixture is
//! approximated by `Poisson(mu*)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{self, DesignMatrix, Family, IrlsOptions};
use crate::kmeans::{self, KMeansOptions};
use crate::linalg::{self, LeastSquares};

/// Joint posterior draws of a reference GLM over its own design `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    betas: DMatrix<f64>,
    sigmas: Option<Vec<f64>>,
    design: DesignMatrix,
}

impl PosteriorDraws {
    /// `betas` is S x q, `sigmas` holds the noise standard deviation of each
    /// draw (Gaussian only) and `design` is n x q.
    pub fn new(betas: DMatrix<f64>, sigmas: Option<Vec<f64>>, design: DesignMatrix) -> Result<Self> {
        if betas.nrows() == 0 {
            return Err(Error::InvalidArgument("need at least one posterior draw".into()));
        }
        if betas.ncols() != design.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "draws have {} coefficients, design has {} columns",
                betas.ncols(),
                design.ncols()
            )));
        }
        if betas.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior coefficients".into()));
        }
        if let Some(s) = &sigmas {
            if s.len() != betas.nrows() {
                return Err(Error::DimensionMismatch(format!("{} sigmas for {} draws", s.len(), betas.nrows())));
            }
            if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("noise sd draws must be positive and finite".into()));
            }
        }
        Ok(Self { betas, sigmas, design })
    }

    pub fn n_draws(&self) -> usize {
        self.betas.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn betas(&self) -> &DMatrix<f64> {
        &self.betas
    }

    pub fn sigmas(&self) -> Option<&[f64]> {
        self.sigmas.as_deref()
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    /// Noise variances `sigma_s^2`, the Gaussian dispersion of each draw.
    pub fn dispersions(&self) -> Option<Vec<f64>> {
        self.sigmas.as_ref().map(|s| s.iter().map(|v| v * v).collect())
    }

    /// Latent fits `Z beta_s`, one row per draw (S x n).
    pub fn latent(&self) -> DMatrix<f64> {
        &self.betas * self.design.values().transpose()
    }

    /// Latent fits at new design rows (S x m).
    pub fn latent_at(&self, design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if design.ncols() != self.betas.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "new design has {} columns, draws have {}",
                design.ncols(),
                self.betas.ncols()
            )));
        }
        Ok(&self.betas * design.transpose())
    }

    pub fn check_family(&self, family: Family) -> Result<()> {
        match (family.has_dispersion(), self.sigmas.is_some()) {
            (true, false) => Err(Error::InvalidArgument("gaussian draws need sigma values".into())),
            (false, true) => {
                Err(Error::InvalidArgument(format!("{} draws must not carry sigma values", family.name())))
            }
            _ => Ok(()),
        }
    }
}

/// Per-cluster predictive summary of the reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFit {
    family: Family,
    means: DMatrix<f64>,
    vars: Option<DMatrix<f64>>,
    weights: Vec<f64>,
    assignment: Vec<Vec<usize>>,
}

impl ReferenceFit {
    /// Summarizes latent draws (S x n) over the given partition of draw
    /// indices. `draw_weights` (uniform when `None`) are normalized within
    /// each cluster for the means and variances; cluster weights are their
    /// normalized per-cluster sums.
    pub fn from_latent(
        family: Family,
        latent: &DMatrix<f64>,
        dispersions: Option<&[f64]>,
        assignment: Vec<Vec<usize>>,
        draw_weights: Option<&[f64]>,
    ) -> Result<Self> {
        let (s_total, n) = latent.shape();
        if family.has_dispersion() != dispersions.is_some() {
            return Err(Error::InvalidArgument(
                "dispersion draws must be given iff the family has a dispersion".into(),
            ));
        }
        let mut seen = vec![false; s_total];
        for cluster in &assignment {
            if cluster.is_empty() {
                return Err(Error::InvalidArgument("empty cluster".into()));
            }
            for &s in cluster {
                if s >= s_total || seen[s] {
                    return Err(Error::InvalidArgument("clusters must partition the draws".into()));
                }
                seen[s] = true;
            }
        }
        if seen.iter().any(|v| !v) {
            return Err(Error::InvalidArgument("clusters must partition the draws".into()));
        }
        let uniform;
        let w = match draw_weights {
            Some(w) => {
                if w.len() != s_total || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidArgument("draw weights must be nonnegative, one per draw".into()));
                }
                w
            }
            None => {
                uniform = vec![1.0; s_total];
                &uniform[..]
            }
        };
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("draw weights sum to zero".into()));
        }
        let c_count = assignment.len();
        let mut means = DMatrix::zeros(c_count, n);
        let mut vars = family.has_dispersion().then(|| DMatrix::zeros(c_count, n));
        let mut weights = Vec::with_capacity(c_count);
        let mut column = Vec::new();
        let mut cw = Vec::new();
        for (c, cluster) in assignment.iter().enumerate() {
            cw.clear();
            cw.extend(cluster.iter().map(|&s| w[s]));
            let wsum: f64 = cw.iter().sum();
            if !(wsum > 0.0) {
                return Err(Error::InvalidArgument(format!("cluster {c} has zero total weight")));
            }
            weights.push(wsum / total);
            let disp_mean = dispersions.map(|d| cluster.iter().zip(&cw).map(|(&s, &ws)| ws * d[s]).sum::<f64>() / wsum);
            for i in 0..n {
                column.clear();
                column.extend(cluster.iter().map(|&s| latent[(s, i)]));
                means[(c, i)] = column.iter().zip(&cw).map(|(&f, &ws)| ws * family.inverse_link(f)).sum::<f64>() / wsum;
                if let (Some(v), Some(dm)) = (vars.as_mut(), disp_mean) {
                    let (_, spread) = linalg::weighted_mean_var(&column, &cw);
                    v[(c, i)] = dm + spread;
                }
            }
        }
        Ok(Self { family, means, vars, weights, assignment })
    }

    /// A single-cluster fit from plain predictive means (and variances).
    pub fn point(family: Family, mu: Vec<f64>, vars: Option<Vec<f64>>) -> Result<Self> {
        let n = mu.len();
        if family.has_dispersion() != vars.is_some() {
            return Err(Error::InvalidArgument(
                "predictive variances must be given iff the family has a dispersion".into(),
            ));
        }
        for &m in &mu {
            family.validate_target(m)?;
        }
        let vars = match vars {
            Some(v) if v.len() != n => {
                return Err(Error::DimensionMismatch(format!("{} variances for {n} means", v.len())))
            }
            Some(v) if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) => {
                return Err(Error::InvalidArgument("predictive variances must be >= 0".into()))
            }
            Some(v) => Some(DMatrix::from_row_slice(1, n, &v)),
            None => None,
        };
        Ok(Self {
            family,
            means: DMatrix::from_row_slice(1, n, &mu),
            vars,
            weights: vec![1.0],
            assignment: vec![vec![0]],
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_clusters(&self) -> usize {
        self.means.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.means.ncols()
    }

    /// C x n matrix whose row `c` is `mu*^c`.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// C x n matrix whose row `c` is `(V_1^c, ..., V_n^c)`.
    pub fn vars(&self) -> Option<&DMatrix<f64>> {
        self.vars.as_ref()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn cluster_mean(&self, c: usize) -> DVector<f64> {
        self.means.row(c).transpose()
    }

    pub fn cluster_vars(&self, c: usize) -> Option<DVector<f64>> {
        self.vars.as_ref().map(|v| v.row(c).transpose())
    }
}

/// Partitions draws into `c` clusters by k-means on their latent fits and
/// summarizes each cluster. `c == 1` pools all draws, `c == S` keeps every
/// draw as its own cluster.
pub fn cluster_draws(draws: &PosteriorDraws, family: Family, c: usize, seed: u64) -> Result<ReferenceFit> {
    let s_total = draws.n_draws();
    if c == 0 || c > s_total {
        return Err(Error::InvalidArgument(format!("cluster count {c} outside 1..={s_total}")));
    }
    draws.check_family(family)?;
    let latent = draws.latent();
    let assignment = cluster_assignment(&latent, c, seed)?;
    let disp = draws.dispersions();
    ReferenceFit::from_latent(family, &latent, disp.as_deref(), assignment, None)
}

/// Draw partition used by [`cluster_draws`], exposed so that reweighted
/// fits (e.g. leave-one-out) can reuse the full-data clustering.
pub fn cluster_assignment(latent: &DMatrix<f64>, c: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let s_total = latent.nrows();
    if c == 0 || c > s_total {
        return Err(Error::InvalidArgument(format!("cluster count {c} outside 1..={s_total}")));
    }
    if c == 1 {
        return Ok(vec![(0..s_total).collect()]);
    }
    if c == s_total {
        return Ok((0..s_total).map(|s| vec![s]).collect());
    }
    let res = kmeans::kmeans(latent, c, seed, KMeansOptions::default())?;
    let mut groups = vec![Vec::new(); c];
    for (s, &g) in res.assignment.iter().enumerate() {
        groups[g].push(s);
    }
    Ok(groups)
}

/// `(X^T X)^{-1} X^T mu*`, computed by QR.
pub fn project_gaussian_coeffs(x_sub: &DesignMatrix, mu_star: &DVector<f64>) -> Result<DVector<f64>> {
    if mu_star.len() != x_sub.nrows() {
        return Err(Error::DimensionMismatch(format!("{} targets for {} rows", mu_star.len(), x_sub.nrows())));
    }
    LeastSquares::new(x_sub.values())?.solve_vec(mu_star)
}

/// Mean reference predictive variance plus mean squared mismatch.
pub fn project_gaussian_dispersion(
    x_sub: &DesignMatrix,
    beta: &DVector<f64>,
    mu_star: &DVector<f64>,
    vars: &DVector<f64>,
) -> Result<f64> {
    let n = x_sub.nrows();
    if mu_star.len() != n || vars.len() != n || beta.len() != x_sub.ncols() {
        return Err(Error::DimensionMismatch("dispersion projection inputs".into()));
    }
    if vars.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("predictive variances must be >= 0".into()));
    }
    let fit = x_sub.linear_predictor(beta);
    let mismatch = (fit - mu_star).norm_squared() / n as f64;
    Ok(vars.mean() + mismatch)
}

/// Projects cluster `c` of `reference` onto the columns of `x_sub`.
pub fn project_cluster(
    x_sub: &DesignMatrix,
    reference: &ReferenceFit,
    c: usize,
    ridge: f64,
) -> Result<(DVector<f64>, Option<f64>)> {
    if c >= reference.n_clusters() {
        return Err(Error::InvalidArgument(format!("cluster {c} out of range")));
    }
    if x_sub.nrows() != reference.n_obs() {
        return Err(Error::DimensionMismatch(format!(
            "submodel design has {} rows, reference has {} observations",
            x_sub.nrows(),
            reference.n_obs()
        )));
    }
    let mu = reference.cluster_mean(c);
    match reference.family() {
        Family::Gaussian => {
            let rhs = DMatrix::from_column_slice(mu.len(), 1, mu.as_slice());
            let beta =
                linalg::ridge_solve(x_sub.values(), &rhs, ridge, &x_sub.penalized_columns())?.column(0).into_owned();
            let vars = reference.cluster_vars(c).expect("gaussian fits carry variances");
            let disp = project_gaussian_dispersion(x_sub, &beta, &mu, &vars)?;
            Ok((beta, Some(disp)))
        }
        family => {
            let fit = glm::irls_fit(family, x_sub, mu.as_slice(), IrlsOptions::with_ridge(ridge))?;
            if !fit.converged {
                log::warn!("IRLS did not converge for cluster {c} after {} iterations", fit.iterations);
            }
            Ok((fit.beta, None))
        }
    }
}

/// A reference posterior projected onto one feature subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSubmodel {
    pub family: Family,
    /// Indices into the candidate feature columns; the intercept is implicit.
    pub feature_set: Vec<usize>,
    /// C x (k + 1), intercept first.
    pub coeffs: DMatrix<f64>,
    /// Projected noise variance per cluster (Gaussian only).
    pub dispersions: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub loss: f64,
}

impl ProjectedSubmodel {
    pub fn size(&self) -> usize {
        self.feature_set.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Linear predictors at candidate-space rows, one row per cluster (C x m).
    pub fn latent(&self, x_cand: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x_sub = DesignMatrix::submodel(x_cand, &self.feature_set)?;
        Ok(&self.coeffs * x_sub.values().transpose())
    }

    /// Mixture predictive means at candidate-space rows.
    pub fn predictive_means(&self, x_cand: &DMatrix<f64>) -> Result<Vec<f64>> {
        let eta = self.latent(x_cand)?;
        Ok((0..eta.ncols())
            .map(|i| (0..eta.nrows()).map(|c| self.weights[c] * self.family.inverse_link(eta[(c, i)])).sum())
            .collect())
    }
}

/// Projects every cluster of `reference` onto the intercept plus the listed
/// candidate columns of `x_cand` (raw features, n x p).
pub fn project(
    x_cand: &DMatrix<f64>,
    feature_set: &[usize],
    reference: &ReferenceFit,
    ridge: f64,
) -> Result<ProjectedSubmodel> {
    let mut seen = feature_set.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != feature_set.len() {
        return Err(Error::InvalidArgument("feature set has duplicates".into()));
    }
    let x_sub = DesignMatrix::submodel(x_cand, feature_set)?;
    if x_sub.nrows() != reference.n_obs() {
        return Err(Error::DimensionMismatch(format!(
            "candidate design has {} rows, reference has {} observations",
            x_sub.nrows(),
            reference.n_obs()
        )));
    }
    let c_count = reference.n_clusters();
    let k = x_sub.ncols();
    let family = reference.family();
    let (coeffs, dispersions) = match family {
        Family::Gaussian => {
            // One factorization shared by all clusters.
            let rhs = reference.means().transpose();
            let betas = linalg::ridge_solve(x_sub.values(), &rhs, ridge, &x_sub.penalized_columns())?;
            let fits = x_sub.values() * &betas;
            let vars = reference.vars().expect("gaussian fits carry variances");
            let n = x_sub.nrows() as f64;
            let disp: Vec<f64> = (0..c_count)
                .map(|c| {
                    let mismatch =
                        (0..x_sub.nrows()).map(|i| (fits[(i, c)] - reference.means()[(c, i)]).powi(2)).sum::<f64>() / n;
                    vars.row(c).mean() + mismatch
                })
                .collect();
            (betas.transpose(), Some(disp))
        }
        _ => {
            let rows: Vec<DVector<f64>> = (0..c_count)
                .into_par_iter()
                .map(|c| project_cluster(&x_sub, reference, c, ridge).map(|(b, _)| b))
                .collect::<Result<_>>()?;
            let mut coeffs = DMatrix::zeros(c_count, k);
            for (c, b) in rows.iter().enumerate() {
                coeffs.set_row(c, &b.transpose());
            }
            (coeffs, None)
        }
    };
    let mut sub = ProjectedSubmodel {
        family,
        feature_set: feature_set.to_vec(),
        coeffs,
        dispersions,
        weights: reference.weights().to_vec(),
        loss: 0.0,
    };
    sub.loss = projection_loss(reference, &sub, &x_sub)?;
    Ok(sub)
}

/// `p log(p/q) + (1-p) log((1-p)/(1-q))` with `q = logistic(eta)`.
pub fn kl_bernoulli(p: f64, eta: f64) -> f64 {
    let log_q = -glm::softplus(-eta);
    let log_1mq = -glm::softplus(eta);
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (p.ln() - log_q);
    }
    if p < 1.0 {
        kl += (1.0 - p) * ((1.0 - p).ln() - log_1mq);
    }
    kl
}

/// `KL(N(mu1, var1) || N(mu2, var2))`; infinite when `var1 == 0`.
pub fn kl_gaussian(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    0.5 * (var2 / var1).ln() + (var1 + (mu1 - mu2).powi(2)) / (2.0 * var2) - 0.5
}

/// `KL(Poisson(lambda1) || Poisson(exp(eta)))`.
pub fn kl_poisson(lambda1: f64, eta: f64) -> f64 {
    let lambda2 = eta.exp();
    if lambda1 == 0.0 {
        return lambda2;
    }
    lambda1 * (lambda1.ln() - eta) - lambda1 + lambda2
}

/// Weighted mean over clusters of the average per-observation KL divergence
/// from the reference predictive to the projected predictive.
pub fn projection_loss(reference: &ReferenceFit, sub: &ProjectedSubmodel, x_sub: &DesignMatrix) -> Result<f64> {
    if sub.n_clusters() != reference.n_clusters() || x_sub.ncols() != sub.coeffs.ncols() {
        return Err(Error::DimensionMismatch("submodel does not match reference".into()));
    }
    let n = reference.n_obs();
    let eta = x_sub.values() * sub.coeffs.transpose();
    let means = reference.means();
    let mut total = 0.0;
    for c in 0..reference.n_clusters() {
        let mut acc = 0.0;
        for i in 0..n {
            let mu1 = means[(c, i)];
            acc += match reference.family() {
                Family::Gaussian => {
                    let var1 = reference.vars().expect("gaussian fits carry variances")[(c, i)];
                    let var2 = sub.dispersions.as_ref().expect("gaussian submodels carry dispersions")[c];
                    kl_gaussian(mu1, var1, eta[(i, c)], var2)
                }
                Family::Bernoulli => kl_bernoulli(mu1, eta[(i, c)]),
                Family::Poisson => kl_poisson(mu1, eta[(i, c)]),
            };
        }
        total += reference.weights()[c] * acc / n as f64;
    }
    Ok(total.max(0.0))
}

/// `log sum_c w_c p(y | theta_c)` at one candidate-space row.
pub fn predictive_log_density(sub: &ProjectedSubmodel, x_row: &[f64], y: f64) -> Result<f64> {
    sub.family.validate_response(y)?;
    let mut terms = Vec::with_capacity(sub.n_clusters());
    for c in 0..sub.n_clusters() {
        let mut eta = sub.coeffs[(c, 0)];
        for (k, &j) in sub.feature_set.iter().enumerate() {
            let xj = *x_row
                .get(j)
                .ok_or_else(|| Error::DimensionMismatch(format!("row has {} features, need index {j}", x_row.len())))?;
            eta += sub.coeffs[(c, k + 1)] * xj;
        }
        let disp = sub.dispersions.as_ref().map_or(1.0, |d| d[c]);
        terms.push(sub.weights[c].ln() + glm::log_lik_unchecked(sub.family, y, eta, disp));
    }
    Ok(linalg::log_sum_exp(&terms))
}

/// [`predictive_log_density`] for every row of `x_cand`.
pub fn predictive_log_densities(sub: &ProjectedSubmodel, x_cand: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != x_cand.nrows() {
        return Err(Error::DimensionMismatch(format!("{} responses for {} rows", y.len(), x_cand.nrows())));
    }
    for &v in y {
        sub.family.validate_response(v)?;
    }
    let eta = sub.latent(x_cand)?;
    let log_w: Vec<f64> = sub.weights.iter().map(|w| w.ln()).collect();
    let mut terms = vec![0.0; sub.n_clusters()];
    Ok((0..x_cand.nrows())
        .map(|i| {
            for c in 0..sub.n_clusters() {
                let disp = sub.dispersions.as_ref().map_or(1.0, |d| d[c]);
                terms[c] = log_w[c] + glm::log_lik_unchecked(sub.family, y[i], eta[(c, i)], disp);
            }
            linalg::log_sum_exp(&terms)
        })
        .collect())
}

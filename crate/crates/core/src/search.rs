//! Feature ordering by forward search or by an elastic-net penalized
//! single-point projection, followed by projection onto each prefix of the
//! ordering.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{DesignMatrix, Family};
use crate::projection::{self, ProjectedSubmodel, ReferenceFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Forward,
    L1,
}

impl std::str::FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(SearchMethod::Forward),
            "l1" | "lasso" => Ok(SearchMethod::L1),
            other => Err(Error::InvalidArgument(format!("unknown search method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    /// Elastic-net mixing; 1 is the lasso.
    pub alpha: f64,
    pub nlambda: usize,
    /// `None` picks 1e-3 when n > p and 1e-2 otherwise.
    pub lambda_min_ratio: Option<f64>,
    pub penalty_factors: Option<Vec<f64>>,
    pub max_size: usize,
    pub relax: bool,
    pub relax_ridge: f64,
    /// Coordinate-descent tolerance on `max_j w_j * delta_j^2`.
    pub cd_tol: f64,
    pub max_outer: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: SearchMethod::L1,
            alpha: 1.0,
            nlambda: 100,
            lambda_min_ratio: None,
            penalty_factors: None,
            max_size: 20,
            relax: true,
            relax_ridge: 0.0,
            cd_tol: 1e-7,
            max_outer: 100,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.nlambda < 2 {
            return Err(Error::InvalidArgument("nlambda must be at least 2".into()));
        }
        if let Some(r) = self.lambda_min_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidArgument(format!("lambda_min_ratio must lie in (0, 1), got {r}")));
            }
        }
        if let Some(g) = &self.penalty_factors {
            if g.len() != p {
                return Err(Error::DimensionMismatch(format!("{} penalty factors for {p} features", g.len())));
            }
            if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("penalty factors must be finite and >= 0".into()));
            }
            if !g.iter().any(|v| *v > 0.0) {
                return Err(Error::InvalidArgument("at least one penalty factor must be positive".into()));
            }
        }
        if !(self.relax_ridge >= 0.0) || !(self.cd_tol > 0.0) || self.max_outer == 0 {
            return Err(Error::InvalidArgument("invalid ridge, tolerance or iteration limit".into()));
        }
        Ok(())
    }

    /// Largest size that can be projected without a ridge on `n` points.
    pub fn effective_max_size(&self, n: usize, p: usize) -> usize {
        let mut m = self.max_size.min(p);
        if self.relax_ridge == 0.0 {
            m = m.min(n.saturating_sub(2));
        }
        m
    }
}

/// Feature ranking plus the projected submodel of every prefix.
#[derive(Debug, Clone)]
pub struct SelectionPath {
    pub order: Vec<usize>,
    /// `submodels[k]` uses the first `k` features of `order`.
    pub submodels: Vec<ProjectedSubmodel>,
    pub losses: Vec<f64>,
}

impl SelectionPath {
    pub fn max_size(&self) -> usize {
        self.submodels.len() - 1
    }
}

/// Greedy forward selection on single-point projections.
pub fn forward_search(
    x_cand: &DMatrix<f64>,
    reference: &ReferenceFit,
    max_size: usize,
    ridge: f64,
) -> Result<SelectionPath> {
    let p = x_cand.ncols();
    let max_size = max_size.min(p);
    let mut chosen: Vec<usize> = Vec::new();
    let first = projection::project(x_cand, &[], reference, ridge)?;
    let mut losses = vec![first.loss];
    let mut submodels = vec![first];
    while chosen.len() < max_size {
        let remaining: Vec<usize> = (0..p).filter(|j| !chosen.contains(j)).collect();
        let trials: Vec<Option<ProjectedSubmodel>> = remaining
            .par_iter()
            .map(|&j| {
                let mut set = chosen.clone();
                set.push(j);
                projection::project(x_cand, &set, reference, ridge).ok()
            })
            .collect();
        // Strict comparison keeps the lowest index on ties.
        let mut best: Option<(usize, ProjectedSubmodel)> = None;
        for (&j, trial) in remaining.iter().zip(trials) {
            if let Some(sub) = trial {
                if !sub.loss.is_finite() {
                    continue;
                }
                if best.as_ref().is_none_or(|(_, b)| sub.loss < b.loss) {
                    best = Some((j, sub));
                }
            }
        }
        let Some((j, sub)) = best else {
            log::warn!("forward search stopped at size {}: no projectable candidate", chosen.len());
            break;
        };
        chosen.push(j);
        losses.push(sub.loss);
        submodels.push(sub);
    }
    Ok(SelectionPath { order: chosen, submodels, losses })
}

/// Solution path of the penalized single-point projection.
#[derive(Debug, Clone)]
pub struct ElasticNetPath {
    pub lambdas: Vec<f64>,
    /// Intercept on the original feature scale, per computed lambda.
    pub intercepts: Vec<f64>,
    /// Coefficients on the original feature scale, per computed lambda.
    pub coefs: Vec<DVector<f64>>,
    /// First lambda index at which each feature became nonzero.
    pub entry: Vec<Option<usize>>,
    /// All features, most relevant first.
    pub order: Vec<usize>,
}

impl ElasticNetPath {
    /// Lambda index whose solution represents the size-`k` model: the last
    /// one before the `(k+1)`-th ordered feature enters.
    pub fn index_for_size(&self, k: usize) -> usize {
        let last = self.coefs.len() - 1;
        match self.order.get(k).and_then(|&j| self.entry[j]) {
            Some(e) => e.saturating_sub(1).min(last),
            None => last,
        }
    }
}

struct Standardized {
    x: DMatrix<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Columns with zero variance never enter.
    usable: Vec<bool>,
}

fn standardize(x: &DMatrix<f64>) -> Standardized {
    let (n, p) = x.shape();
    let mut xs = x.clone();
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    let mut usable = vec![true; p];
    for j in 0..p {
        let col = x.column(j);
        let m = col.mean();
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        center[j] = m;
        if sd > 0.0 && sd.is_finite() {
            scale[j] = sd;
        } else {
            usable[j] = false;
        }
        for i in 0..n {
            xs[(i, j)] = if usable[j] { (x[(i, j)] - m) / scale[j] } else { 0.0 };
        }
    }
    Standardized { x: xs, center, scale, usable }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate-descent state for one elastic-net problem on standardized
/// features with mean-space targets.
struct Solver<'a> {
    family: Family,
    x: &'a DMatrix<f64>,
    targets: &'a [f64],
    gamma: Vec<f64>,
    alpha: f64,
    usable: &'a [bool],
    tol: f64,
    max_outer: usize,
    b0: f64,
    b: Vec<f64>,
    eta: Vec<f64>,
}

const MAX_SWEEPS: usize = 100_000;
const MIN_WEIGHT: f64 = 1e-5;

impl Solver<'_> {
    fn n(&self) -> usize {
        self.targets.len()
    }

    fn refresh_eta(&mut self) {
        let n = self.n();
        for i in 0..n {
            self.eta[i] = self.b0;
        }
        for (j, &bj) in self.b.iter().enumerate() {
            if bj != 0.0 {
                for i in 0..n {
                    self.eta[i] += bj * self.x[(i, j)];
                }
            }
        }
    }

    /// Gradient of the data term at the current state, `(1/n) x_j^T (t - mu)`.
    fn gradient(&self) -> Vec<f64> {
        let n = self.n();
        let resid: Vec<f64> = (0..n).map(|i| self.targets[i] - self.family.inverse_link(self.eta[i])).collect();
        (0..self.b.len())
            .map(|j| {
                if !self.usable[j] {
                    return 0.0;
                }
                (0..n).map(|i| self.x[(i, j)] * resid[i]).sum::<f64>() / n as f64
            })
            .collect()
    }

    /// Minimizes the penalized objective at `lambda`, warm-started.
    /// Returns false if coordinate descent hit its sweep limit.
    fn solve(&mut self, lambda: f64) -> bool {
        let n = self.n();
        let p = self.b.len();
        let nf = n as f64;
        let thresholds: Vec<f64> =
            self.gamma.iter().map(|&g| if g == 0.0 { 0.0 } else { lambda * g * self.alpha }).collect();
        let ridges: Vec<f64> = self
            .gamma
            .iter()
            .map(|&g| if g == 0.0 || self.alpha == 1.0 { 0.0 } else { lambda * g * (1.0 - self.alpha) })
            .collect();
        let gaussian = self.family == Family::Gaussian;
        let mut w = vec![1.0; n];
        let mut r = vec![0.0; n];
        let mut xw2 = vec![1.0; p];
        for _outer in 0..self.max_outer {
            let start_b0 = self.b0;
            let start_b = self.b.clone();
            for i in 0..n {
                let mu = self.family.inverse_link(self.eta[i]);
                w[i] = if gaussian { 1.0 } else { self.family.variance(mu).max(MIN_WEIGHT) };
                r[i] = (self.targets[i] - mu) / w[i];
            }
            let wsum: f64 = w.iter().sum();
            for j in 0..p {
                xw2[j] = if !self.usable[j] {
                    0.0
                } else if gaussian {
                    (0..n).map(|i| self.x[(i, j)].powi(2)).sum::<f64>() / nf
                } else {
                    (0..n).map(|i| w[i] * self.x[(i, j)].powi(2)).sum::<f64>() / nf
                };
            }
            let mut sweeps = 0;
            let mut full = true;
            loop {
                sweeps += 1;
                if sweeps > MAX_SWEEPS {
                    return false;
                }
                let mut max_change: f64 = 0.0;
                for j in 0..p {
                    if !self.usable[j] || (!full && self.b[j] == 0.0) {
                        continue;
                    }
                    let xj = self.x.column(j);
                    let mut g = 0.0;
                    for i in 0..n {
                        g += w[i] * xj[i] * r[i];
                    }
                    g = g / nf + xw2[j] * self.b[j];
                    let new = soft_threshold(g, thresholds[j]) / (xw2[j] + ridges[j]);
                    let delta = new - self.b[j];
                    if delta != 0.0 {
                        for i in 0..n {
                            r[i] -= delta * xj[i];
                        }
                        self.b[j] = new;
                        max_change = max_change.max(xw2[j] * delta * delta);
                    }
                }
                let d0 = (0..n).map(|i| w[i] * r[i]).sum::<f64>() / wsum;
                if d0 != 0.0 {
                    for ri in r.iter_mut() {
                        *ri -= d0;
                    }
                    self.b0 += d0;
                    max_change = max_change.max(wsum / nf * d0 * d0);
                }
                if max_change < self.tol {
                    if full {
                        break;
                    }
                    // Confirm the active set with a sweep over all features.
                    full = true;
                } else {
                    full = false;
                }
            }
            self.refresh_eta();
            if gaussian {
                return true;
            }
            let mut outer_change = (self.b0 - start_b0).powi(2);
            for j in 0..p {
                outer_change = outer_change.max(xw2[j] * (self.b[j] - start_b[j]).powi(2));
            }
            if outer_change < self.tol {
                return true;
            }
        }
        false
    }
}

/// Elastic-net path of the single-point projection of `reference` (which
/// must have one cluster) onto the candidate features.
pub fn l1_path(x_cand: &DMatrix<f64>, reference: &ReferenceFit, config: &SearchConfig) -> Result<ElasticNetPath> {
    let (n, p) = x_cand.shape();
    config.validate(p)?;
    if reference.n_clusters() != 1 {
        return Err(Error::InvalidArgument("l1 search needs a single-cluster reference".into()));
    }
    if reference.n_obs() != n {
        return Err(Error::DimensionMismatch(format!(
            "candidate design has {n} rows, reference has {} observations",
            reference.n_obs()
        )));
    }
    let family = reference.family();
    let targets: Vec<f64> = reference.means().row(0).iter().map(|&t| family.clamp_target(t)).collect();
    let std = standardize(x_cand);
    let gamma = config.penalty_factors.clone().unwrap_or_else(|| vec![1.0; p]);
    let mut solver = Solver {
        family,
        x: &std.x,
        targets: &targets,
        gamma: gamma.clone(),
        alpha: config.alpha,
        usable: &std.usable,
        tol: config.cd_tol,
        max_outer: config.max_outer,
        b0: 0.0,
        b: vec![0.0; p],
        eta: vec![0.0; n],
    };
    let mean_t = targets.iter().sum::<f64>() / n as f64;
    solver.b0 = match family {
        Family::Gaussian => mean_t,
        Family::Bernoulli => family.link(mean_t.clamp(1e-9, 1.0 - 1e-9)),
        Family::Poisson => family.link(mean_t.max(1e-9)),
    };
    solver.refresh_eta();
    // Null model: penalized coefficients held at zero.
    if !solver.solve(f64::INFINITY) {
        return Err(Error::NotConverged { lambda_index: 0, partial_order: Vec::new() });
    }
    let grad = solver.gradient();
    let lambda_max = (0..p)
        .filter(|&j| std.usable[j] && gamma[j] > 0.0)
        .map(|j| grad[j].abs() / (config.alpha * gamma[j]))
        .fold(0.0, f64::max)
        * (1.0 + 1e-12);
    let ratio = config.lambda_min_ratio.unwrap_or(if n > p { 1e-3 } else { 1e-2 });
    let lambdas: Vec<f64> = if lambda_max > 0.0 {
        (0..config.nlambda).map(|l| lambda_max * ratio.powf(l as f64 / (config.nlambda - 1) as f64)).collect()
    } else {
        vec![0.0]
    };
    // Sizes beyond the last entered feature need the whole grid.
    let target_entries = if config.max_size < p { config.max_size + 1 } else { usize::MAX };
    let mut entry: Vec<Option<usize>> = vec![None; p];
    let mut entered = 0;
    let mut intercepts = Vec::new();
    let mut coefs = Vec::new();
    let mut entry_coef = vec![0.0; p];
    let mut failure = None;
    for (l, &lambda) in lambdas.iter().enumerate() {
        if !solver.solve(lambda) {
            failure = Some(l);
            break;
        }
        for j in 0..p {
            if entry[j].is_none() && solver.b[j] != 0.0 {
                entry[j] = Some(l);
                entry_coef[j] = solver.b[j].abs();
                entered += 1;
            }
        }
        let mut b = DVector::zeros(p);
        let mut b0 = solver.b0;
        for j in 0..p {
            if std.usable[j] {
                b[j] = solver.b[j] / std.scale[j];
                b0 -= b[j] * std.center[j];
            }
        }
        intercepts.push(b0);
        coefs.push(b);
        if entered >= target_entries {
            break;
        }
    }
    // Entered features by entry index, then larger standardized |coef|,
    // then index. The rest by the size of their final gradient.
    let final_grad = solver.gradient();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| match (entry[a], entry[b]) {
        (Some(ea), Some(eb)) => ea.cmp(&eb).then(entry_coef[b].total_cmp(&entry_coef[a])).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => {
            let key = |j: usize| {
                if !std.usable[j] {
                    -1.0
                } else if gamma[j] > 0.0 {
                    final_grad[j].abs() / gamma[j]
                } else {
                    f64::INFINITY
                }
            };
            key(b).total_cmp(&key(a)).then(a.cmp(&b))
        }
    });
    if let Some(l) = failure {
        let partial: Vec<usize> = order.iter().copied().filter(|&j| entry[j].is_some()).collect();
        return Err(Error::NotConverged { lambda_index: l, partial_order: partial });
    }
    Ok(ElasticNetPath { lambdas, intercepts, coefs, entry, order })
}

/// Orders features with `ref_select` and projects `ref_predict` onto every
/// prefix of the ordering up to the configured maximum size.
pub fn build_path(
    x_cand: &DMatrix<f64>,
    ref_select: &ReferenceFit,
    ref_predict: &ReferenceFit,
    config: &SearchConfig,
) -> Result<SelectionPath> {
    let (n, p) = x_cand.shape();
    config.validate(p)?;
    if ref_select.family() != ref_predict.family() {
        return Err(Error::InvalidArgument("selection and prediction references differ in family".into()));
    }
    if ref_select.n_obs() != n || ref_predict.n_obs() != n {
        return Err(Error::DimensionMismatch("reference fits do not match the candidate design".into()));
    }
    let max_size = config.effective_max_size(n, p);
    let (order, l1) = match config.method {
        SearchMethod::Forward => {
            let path = forward_search(x_cand, ref_select, max_size, config.relax_ridge)?;
            (path.order, None)
        }
        SearchMethod::L1 => {
            let path = l1_path(x_cand, ref_select, config)?;
            (path.order.clone(), Some(path))
        }
    };
    let max_size = max_size.min(order.len());
    let submodels: Vec<ProjectedSubmodel> = match (&l1, config.relax) {
        (Some(path), false) => (0..=max_size)
            .into_par_iter()
            .map(|k| penalized_submodel(x_cand, ref_select, path, &order[..k]))
            .collect::<Result<_>>()?,
        _ => (0..=max_size)
            .into_par_iter()
            .map(|k| projection::project(x_cand, &order[..k], ref_predict, config.relax_ridge))
            .collect::<Result<_>>()?,
    };
    let losses = submodels.iter().map(|s| s.loss).collect();
    Ok(SelectionPath { order, submodels, losses })
}

/// Single-point submodel that keeps the penalized path coefficients.
fn penalized_submodel(
    x_cand: &DMatrix<f64>,
    reference: &ReferenceFit,
    path: &ElasticNetPath,
    features: &[usize],
) -> Result<ProjectedSubmodel> {
    let l = path.index_for_size(features.len());
    let k = features.len();
    let mut coeffs = DMatrix::zeros(1, k + 1);
    coeffs[(0, 0)] = path.intercepts[l];
    for (m, &j) in features.iter().enumerate() {
        coeffs[(0, m + 1)] = path.coefs[l][j];
    }
    let x_sub = DesignMatrix::submodel(x_cand, features)?;
    let dispersions = match reference.family() {
        Family::Gaussian => {
            let beta = coeffs.row(0).transpose();
            let mu = reference.cluster_mean(0);
            let vars = reference.cluster_vars(0).expect("gaussian fits carry variances");
            Some(vec![projection::project_gaussian_dispersion(&x_sub, &beta, &mu, &vars)?])
        }
        _ => None,
    };
    let mut sub = ProjectedSubmodel {
        family: reference.family(),
        feature_set: features.to_vec(),
        coeffs,
        dispersions,
        weights: vec![1.0],
        loss: 0.0,
    };
    sub.loss = projection::projection_loss(reference, &sub, &x_sub)?;
    Ok(sub)
}

//! Bayesian linear heads used by the reference builders.
//!
//! Gaussian: `beta_pen | sigma^2, tau ~ N(0, sigma^2 tau^2)`, flat intercept,
//! `p(sigma^2) ∝ 1/sigma^2`. The posterior is normal-inverse-gamma and the
//! predictive is Student-t, so both draws and predictive densities are exact
//! given `tau`.
//!
//! Bernoulli: `beta_pen | tau ~ N(0, tau^2)`, flat intercept, with a Laplace
//! approximation around the posterior mode.
//!
//! When `tau` is not fixed it is marginalized over a 30-point log grid
//! spanning `[1e-3, 1e3] * base` weighted by the (approximate) marginal
//! likelihood times a half-Student-t(4) hyperprior with scale `base`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::glm::{self, DesignMatrix, Family, IrlsOptions};
use crate::linalg;

pub const TAU_GRID_POINTS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauPrior {
    Fixed(f64),
    /// Grid marginalization; `None` derives the base scale from the design
    /// as the inverse squared largest column standard deviation.
    Grid(Option<f64>),
}

impl Default for TauPrior {
    fn default() -> Self {
        TauPrior::Grid(None)
    }
}

#[derive(Debug, Clone)]
enum Component {
    Gaussian {
        mean: DVector<f64>,
        a_inv: DMatrix<f64>,
        /// `L^{-T}` with `A = L L^T`.
        root: DMatrix<f64>,
        shape: f64,
        rate: f64,
    },
    Laplace {
        mode: DVector<f64>,
        cov: DMatrix<f64>,
        root: DMatrix<f64>,
    },
}

/// Posterior of a Bayesian linear head, a mixture over `tau` values.
#[derive(Debug, Clone)]
pub struct BayesHead {
    family: Family,
    taus: Vec<f64>,
    weights: Vec<f64>,
    components: Vec<Component>,
}

/// Log density of half-Student-t with 4 degrees of freedom, up to a constant.
fn log_half_t4(tau: f64, scale: f64) -> f64 {
    let z = tau / scale;
    -2.5 * (1.0 + z * z / 4.0).ln()
}

/// Base scale `1 / s_max^2` over the penalized columns.
pub fn default_tau_base(z: &DesignMatrix) -> f64 {
    let n = z.nrows() as f64;
    let pen = z.penalized_columns();
    let mut s_max: f64 = 0.0;
    for (j, &is_pen) in pen.iter().enumerate() {
        if is_pen {
            let col = z.values().column(j);
            let m = col.mean();
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            s_max = s_max.max(var.sqrt());
        }
    }
    if s_max > 0.0 {
        1.0 / (s_max * s_max)
    } else {
        1.0
    }
}

pub fn tau_grid(base: f64) -> Vec<f64> {
    let lo = (1e-3 * base).ln();
    let hi = (1e3 * base).ln();
    (0..TAU_GRID_POINTS).map(|i| (lo + (hi - lo) * i as f64 / (TAU_GRID_POINTS - 1) as f64).exp()).collect()
}

fn upper_root_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol =
        a.clone().cholesky().ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?;
    let l = chol.l();
    let q = a.nrows();
    let lt = l.transpose();
    lt.solve_upper_triangular(&DMatrix::identity(q, q))
        .ok_or_else(|| Error::Singular("posterior precision factor".into()))
}

fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a.clone().cholesky().ok_or_else(|| Error::Singular("matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn precision_diag(z: &DesignMatrix, inv_var: f64) -> DMatrix<f64> {
    let pen = z.penalized_columns();
    DMatrix::from_diagonal(&DVector::from_iterator(pen.len(), pen.iter().map(|&p| if p { inv_var } else { 0.0 })))
}

fn gaussian_component(z: &DesignMatrix, y: &DVector<f64>, tau: f64) -> Result<(Component, f64)> {
    let zv = z.values();
    let n = z.nrows() as f64;
    let pen = z.penalized_columns();
    let q_pen = pen.iter().filter(|p| **p).count() as f64;
    let q_flat = pen.len() as f64 - q_pen;
    let shape = (n - q_flat) / 2.0;
    if !(shape > 0.0) {
        return Err(Error::InvalidArgument("too few observations for the gaussian head".into()));
    }
    let a = zv.transpose() * zv + precision_diag(z, 1.0 / (tau * tau));
    let penalized = pen.clone();
    let rhs = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let mean = linalg::ridge_solve(zv, &rhs, 1.0 / (tau * tau), &penalized)?.column(0).into_owned();
    let resid = y - zv * &mean;
    let pen_norm: f64 = mean.iter().zip(&pen).filter(|(_, p)| **p).map(|(b, _)| b * b).sum();
    let sse = resid.norm_squared() + pen_norm / (tau * tau);
    if !(sse > 0.0) {
        return Err(Error::Singular("zero residual sum of squares".into()));
    }
    let rate = sse / 2.0;
    let log_ml = -q_pen * tau.ln() - 0.5 * log_det_spd(&a)? + ln_gamma(shape) - shape * rate.ln();
    let root = upper_root_inverse(&a)?;
    let a_inv = &root * root.transpose();
    Ok((Component::Gaussian { mean, a_inv, root, shape, rate }, log_ml))
}

fn laplace_component(family: Family, z: &DesignMatrix, y: &[f64], tau: f64) -> Result<(Component, f64)> {
    let zv = z.values();
    let ridge = 1.0 / (tau * tau);
    let fit = glm::irls_fit(family, z, y, IrlsOptions::with_ridge(ridge))?;
    let mode = fit.beta;
    let eta = zv * &mode;
    let mut h = precision_diag(z, ridge);
    let mut loglik = 0.0;
    for i in 0..z.nrows() {
        let mu = family.inverse_link(eta[i]);
        let w = family.variance(mu);
        let row = zv.row(i);
        h += w * row.transpose() * row;
        loglik += glm::log_lik_unchecked(family, y[i], eta[i], 1.0);
    }
    let pen = z.penalized_columns();
    let q_pen = pen.iter().filter(|p| **p).count() as f64;
    let pen_norm: f64 = mode.iter().zip(&pen).filter(|(_, p)| **p).map(|(b, _)| b * b).sum();
    let log_ev = loglik - 0.5 * pen_norm * ridge - q_pen * tau.ln() - 0.5 * log_det_spd(&h)?;
    let root = upper_root_inverse(&h)?;
    let cov = &root * root.transpose();
    Ok((Component::Laplace { mode, cov, root }, log_ev))
}

impl BayesHead {
    pub fn fit(family: Family, z: &DesignMatrix, y: &[f64], tau: TauPrior) -> Result<Self> {
        if y.len() != z.nrows() {
            return Err(Error::DimensionMismatch(format!("{} responses for {} rows", y.len(), z.nrows())));
        }
        for &v in y {
            family.validate_response(v)?;
        }
        let (taus, log_prior): (Vec<f64>, Vec<f64>) = match tau {
            TauPrior::Fixed(t) => {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::InvalidArgument(format!("tau must be positive, got {t}")));
                }
                (vec![t], vec![0.0])
            }
            TauPrior::Grid(base) => {
                let base = base.unwrap_or_else(|| default_tau_base(z));
                let grid = tau_grid(base);
                // Density on the log grid carries the Jacobian tau.
                let lp = grid.iter().map(|&t| log_half_t4(t, base) + t.ln()).collect();
                (grid, lp)
            }
        };
        let yv = DVector::from_column_slice(y);
        let mut components = Vec::with_capacity(taus.len());
        let mut log_w = Vec::with_capacity(taus.len());
        for (&t, &lp) in taus.iter().zip(&log_prior) {
            let fitted = match family {
                Family::Gaussian => gaussian_component(z, &yv, t),
                Family::Bernoulli => laplace_component(family, z, y, t),
                Family::Poisson => {
                    return Err(Error::InvalidArgument("no Bayesian head for the poisson family".into()))
                }
            };
            match fitted {
                Ok((comp, log_ml)) if log_ml.is_finite() => {
                    components.push(Some(comp));
                    log_w.push(log_ml + lp);
                }
                Ok(_) | Err(_) if taus.len() > 1 => {
                    components.push(None);
                    log_w.push(f64::NEG_INFINITY);
                }
                Ok(_) => return Err(Error::NonFinite("head marginal likelihood".into())),
                Err(e) => return Err(e),
            }
        }
        let norm = linalg::log_sum_exp(&log_w);
        if !norm.is_finite() {
            return Err(Error::Singular("no tau value gave a valid head fit".into()));
        }
        let mut kept_taus = Vec::new();
        let mut weights = Vec::new();
        let mut kept = Vec::new();
        for ((t, lw), comp) in taus.into_iter().zip(log_w).zip(components) {
            let w = (lw - norm).exp();
            if let (Some(c), true) = (comp, w > 0.0) {
                kept_taus.push(t);
                weights.push(w);
                kept.push(c);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { family, taus: kept_taus, weights, components: kept })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn tau_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        let mut out: Option<DVector<f64>> = None;
        for (w, c) in self.weights.iter().zip(&self.components) {
            let m = match c {
                Component::Gaussian { mean, .. } => mean,
                Component::Laplace { mode, .. } => mode,
            };
            out = Some(match out {
                Some(acc) => acc + m * *w,
                None => m * *w,
            });
        }
        out.expect("at least one component")
    }

    /// Exact (Gaussian) or probit-approximated (Bernoulli) log predictive
    /// density at new design rows.
    pub fn log_predictive(&self, z_new: &DMatrix<f64>, y_new: &[f64]) -> Result<Vec<f64>> {
        if z_new.nrows() != y_new.len() {
            return Err(Error::DimensionMismatch("new design and responses differ in length".into()));
        }
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut out = Vec::with_capacity(y_new.len());
        let mut terms = vec![0.0; self.components.len()];
        for i in 0..z_new.nrows() {
            let zi = z_new.row(i).transpose();
            self.family.validate_response(y_new[i])?;
            for (c, comp) in self.components.iter().enumerate() {
                terms[c] = log_w[c]
                    + match comp {
                        Component::Gaussian { mean, a_inv, shape, rate, .. } => {
                            let nu = 2.0 * shape;
                            let loc = zi.dot(mean);
                            let scale2 = rate / shape * (1.0 + (zi.transpose() * a_inv * &zi)[(0, 0)]);
                            student_t_log_density(y_new[i], nu, loc, scale2)
                        }
                        Component::Laplace { mode, cov, .. } => {
                            let m = zi.dot(mode);
                            let v = (zi.transpose() * cov * &zi)[(0, 0)];
                            let eta = m / (1.0 + std::f64::consts::PI * v / 8.0).sqrt();
                            glm::log_lik_unchecked(self.family, y_new[i], eta, 1.0)
                        }
                    };
            }
            out.push(linalg::log_sum_exp(&terms));
        }
        Ok(out)
    }

    /// Draws `(betas S x q, sigmas)` from the posterior.
    pub fn sample<R: Rng>(&self, n_draws: usize, rng: &mut R) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
        let q = match &self.components[0] {
            Component::Gaussian { mean, .. } => mean.len(),
            Component::Laplace { mode, .. } => mode.len(),
        };
        let mut betas = DMatrix::zeros(n_draws, q);
        let mut sigmas = (self.family == Family::Gaussian).then(|| Vec::with_capacity(n_draws));
        let cumulative: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let mut xi = DVector::zeros(q);
        for s in 0..n_draws {
            let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
            let c = cumulative.iter().position(|&cw| u < cw).unwrap_or(cumulative.len() - 1);
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            match &self.components[c] {
                Component::Gaussian { mean, root, shape, rate, .. } => {
                    let g: f64 =
                        Gamma::new(*shape, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng);
                    let sigma = (rate / g).sqrt();
                    let beta = mean + root * &xi * sigma;
                    betas.set_row(s, &beta.transpose());
                    sigmas.as_mut().expect("gaussian").push(sigma);
                }
                Component::Laplace { mode, root, .. } => {
                    let beta = mode + root * &xi;
                    betas.set_row(s, &beta.transpose());
                }
            }
        }
        Ok((betas, sigmas))
    }
}

pub fn student_t_log_density(y: f64, nu: f64, loc: f64, scale2: f64) -> f64 {
    let z2 = (y - loc).powi(2) / (nu * scale2);
    ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
        - (nu + 1.0) / 2.0 * z2.ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn problem(seed: u64, n: usize, p: usize) -> (DesignMatrix, Vec<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n).map(|i| 1.0 + x[(i, 0)] - 0.5 * x[(i, 1)] + rng.sample::<f64, _>(StandardNormal)).collect();
        (DesignMatrix::with_intercept(&x).unwrap(), y)
    }

    #[test]
    fn fixed_tau_draws_match_analytic_mean() {
        let (z, y) = problem(1, 40, 3);
        let head = BayesHead::fit(Family::Gaussian, &z, &y, TauPrior::Fixed(0.7)).unwrap();
        // Analytic posterior mean from the normal equations.
        let mut a = z.values().transpose() * z.values();
        for j in 1..4 {
            a[(j, j)] += 1.0 / 0.49;
        }
        let m = a.clone().try_inverse().unwrap() * z.values().transpose() * DVector::from_vec(y.clone());
        let mut rng = crate::rng::seeded(2);
        let (betas, sigmas) = head.sample(10_000, &mut rng).unwrap();
        assert_eq!(sigmas.unwrap().len(), 10_000);
        for j in 0..4 {
            let col: Vec<f64> = betas.column(j).iter().copied().collect();
            let (mean, se) = linalg::mean_se(&col);
            assert!((mean - m[j]).abs() < 3.0 * se, "coef {j}: {mean} vs {}", m[j]);
        }
    }

    #[test]
    fn student_t_matches_statrs() {
        use statrs::distribution::{Continuous, StudentsT};
        let d = StudentsT::new(0.3, 1.7, 5.0).unwrap();
        assert_abs_diff_eq!(student_t_log_density(1.1, 5.0, 0.3, 1.7 * 1.7), d.ln_pdf(1.1), epsilon = 1e-12);
    }

    #[test]
    fn grid_weights_normalize() {
        let (z, y) = problem(3, 30, 2);
        let head = BayesHead::fit(Family::Gaussian, &z, &y, TauPrior::Grid(None)).unwrap();
        assert_abs_diff_eq!(head.tau_weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(head.taus().len() <= TAU_GRID_POINTS);
    }

    #[test]
    fn bernoulli_head_predicts_probabilities() {
        let mut rng = crate::rng::seeded(4);
        let x = DMatrix::from_fn(80, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..80)
            .map(|i| if x[(i, 0)] + 0.3 * rng.sample::<f64, _>(StandardNormal) > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let z = DesignMatrix::with_intercept(&x).unwrap();
        let head = BayesHead::fit(Family::Bernoulli, &z, &y, TauPrior::Grid(None)).unwrap();
        assert!(head.posterior_mean()[1] > 1.0);
        let lp = head.log_predictive(z.values(), &y).unwrap();
        let mlpd = lp.iter().sum::<f64>() / 80.0;
        assert!(mlpd > 0.5f64.ln());
    }
}

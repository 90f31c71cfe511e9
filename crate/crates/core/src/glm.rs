//! Exponential-family observation models with canonical links, and the IRLS
//! solver used for every non-Gaussian projection.
//!
//! With a canonical link the natural parameter equals the linear predictor,
//! so the per-observation log-likelihood is `y * eta - B(eta) + H(y, phi)`
//! scaled by the dispersion. Fitting "to the fit" replaces `y` by reference
//! predictive means `mu*`, which only changes the data term.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;

/// Bernoulli mean-space targets are clamped into `[EPS, 1 - EPS]`.
pub const BERNOULLI_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    pub fn link_name(self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Bernoulli => "logit",
            Family::Poisson => "log",
        }
    }

    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Mean `B'(eta)`.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Bernoulli => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Family::Poisson => eta.exp(),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Bernoulli => (mu / (1.0 - mu)).ln(),
            Family::Poisson => mu.ln(),
        }
    }

    /// Cumulant function `B(eta)`.
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * eta * eta,
            Family::Bernoulli => softplus(eta),
            Family::Poisson => eta.exp(),
        }
    }

    /// Variance function `B''(eta)` expressed through the mean.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    /// Moves a mean-space target into the region where IRLS stays finite.
    pub fn clamp_target(self, mu: f64) -> f64 {
        match self {
            Family::Bernoulli => mu.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP),
            _ => mu,
        }
    }

    pub fn validate_response(self, y: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => y.is_finite(),
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidResponse { family: self.name(), value: y })
        }
    }

    pub fn validate_target(self, mu: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => mu.is_finite(),
            Family::Bernoulli => (0.0..=1.0).contains(&mu),
            Family::Poisson => mu >= 0.0 && mu.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("target {mu} outside the mean space of the {} family", self.name())))
        }
    }

    fn check_dispersion(self, dispersion: Option<f64>) -> Result<()> {
        match (self.has_dispersion(), dispersion) {
            (true, Some(d)) if d > 0.0 && d.is_finite() => Ok(()),
            (true, Some(d)) => Err(Error::InvalidArgument(format!("dispersion must be > 0, got {d}"))),
            (true, None) => Err(Error::InvalidArgument("gaussian family requires a dispersion".into())),
            (false, Some(_)) => Err(Error::InvalidArgument(format!("{} family takes no dispersion", self.name()))),
            (false, None) => Ok(()),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli" | "binomial" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown family '{other}'"))),
        }
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-likelihood of one observation under the canonical parametrization.
///
/// For the Gaussian family `dispersion` is the noise variance.
pub fn log_lik(family: Family, y: f64, eta: f64, dispersion: Option<f64>) -> Result<f64> {
    family.validate_response(y)?;
    family.check_dispersion(dispersion)?;
    Ok(log_lik_unchecked(family, y, eta, dispersion.unwrap_or(1.0)))
}

/// [`log_lik`] without validation, for hot loops over already-checked data.
#[inline]
pub fn log_lik_unchecked(family: Family, y: f64, eta: f64, dispersion: f64) -> f64 {
    match family {
        Family::Gaussian => {
            let r = y - eta;
            -0.5 * (2.0 * PI * dispersion).ln() - 0.5 * r * r / dispersion
        }
        Family::Bernoulli => y * eta - softplus(eta),
        Family::Poisson => y * eta - eta.exp() - ln_gamma(y + 1.0),
    }
}

/// Real design matrix, optionally with a leading all-ones intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    intercept: bool,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, intercept: bool) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidArgument("design needs at least one row".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        if intercept && (values.ncols() == 0 || values.column(0).iter().any(|&v| v != 1.0)) {
            return Err(Error::InvalidArgument("intercept flag set but first column is not all ones".into()));
        }
        Ok(Self { values, intercept })
    }

    /// Prepends an all-ones column to raw features.
    pub fn with_intercept(features: &DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        let mut values = DMatrix::from_element(n, features.ncols() + 1, 1.0);
        values.view_mut((0, 1), (n, features.ncols())).copy_from(features);
        Self::new(values, true)
    }

    /// Intercept column plus the listed feature columns of `features`.
    pub fn submodel(features: &DMatrix<f64>, columns: &[usize]) -> Result<Self> {
        let n = features.nrows();
        let mut values = DMatrix::from_element(n, columns.len() + 1, 1.0);
        for (k, &j) in columns.iter().enumerate() {
            if j >= features.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "feature index {j} out of range ({} candidates)",
                    features.ncols()
                )));
            }
            values.set_column(k + 1, &features.column(j));
        }
        Self::new(values, true)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Mask of columns subject to ridge penalties (all but the intercept).
    pub fn penalized_columns(&self) -> Vec<bool> {
        (0..self.ncols()).map(|j| !(self.intercept && j == 0)).collect()
    }

    pub fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.values * beta
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { ridge: 0.0, tol: 1e-9, max_iter: 100 }
    }
}

impl IrlsOptions {
    pub fn with_ridge(ridge: f64) -> Self {
        Self { ridge, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// Filled by the projection module for families with dispersion.
    pub dispersion: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized objective at `beta`.
    pub objective: f64,
}

const MAX_HALVINGS: usize = 10;

/// Penalized expected log-likelihood `sum(mu* eta - B(eta)) - ridge/2 |beta_pen|^2`.
pub fn penalized_objective(family: Family, x: &DesignMatrix, targets: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x.linear_predictor(beta);
    let data: f64 = eta.iter().zip(targets).map(|(&e, &t)| t * e - family.cumulant(e)).sum();
    let pen: f64 = x.penalized_columns().iter().zip(beta.iter()).filter(|(p, _)| **p).map(|(_, b)| b * b).sum();
    data - 0.5 * ridge * pen
}

/// Maximizes the penalized expected log-likelihood with `targets` as
/// pseudo-observations.
pub fn irls_fit(family: Family, x: &DesignMatrix, targets: &[f64], opts: IrlsOptions) -> Result<FitResult> {
    irls_trace(family, x, targets, opts).map(|(fit, _)| fit)
}

/// [`irls_fit`] that also returns the objective value after every iteration
/// (the first entry is the starting point).
pub fn irls_trace(
    family: Family,
    x: &DesignMatrix,
    targets: &[f64],
    opts: IrlsOptions,
) -> Result<(FitResult, Vec<f64>)> {
    let n = x.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch(format!("{} targets for {n} design rows", targets.len())));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidArgument("tol must be > 0 and max_iter >= 1".into()));
    }
    for &t in targets {
        family.validate_target(t)?;
    }
    let targets: Vec<f64> = targets.iter().map(|&t| family.clamp_target(t)).collect();
    let penalized = x.penalized_columns();
    let xv = x.values();
    let k = x.ncols();

    if family == Family::Gaussian {
        let rhs = DMatrix::from_column_slice(n, 1, &targets);
        let beta = linalg::ridge_solve(xv, &rhs, opts.ridge, &penalized)?.column(0).into_owned();
        let objective = penalized_objective(family, x, &targets, &beta, opts.ridge);
        let fit = FitResult { beta, dispersion: None, converged: true, iterations: 1, objective };
        return Ok((fit, vec![objective]));
    }

    // Start from a least-squares fit of the linked targets.
    let start: Vec<f64> = targets
        .iter()
        .map(|&t| match family {
            Family::Poisson => family.link(t.max(1e-8)),
            _ => family.link(t),
        })
        .collect();
    let rhs = DMatrix::from_column_slice(n, 1, &start);
    let mut beta = linalg::ridge_solve(xv, &rhs, opts.ridge, &penalized)?.column(0).into_owned();
    let mut objective = penalized_objective(family, x, &targets, &beta, opts.ridge);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let eta = xv * &beta;
        let mut wx = DMatrix::zeros(n, k);
        let mut wz = DMatrix::zeros(n, 1);
        for i in 0..n {
            let mu = family.inverse_link(eta[i]);
            let w = family.variance(mu).max(1e-12);
            let z = eta[i] + (targets[i] - mu) / w;
            let sw = w.sqrt();
            for j in 0..k {
                wx[(i, j)] = sw * xv[(i, j)];
            }
            wz[(i, 0)] = sw * z;
        }
        let proposal = linalg::ridge_solve(&wx, &wz, opts.ridge, &penalized)?.column(0).into_owned();
        let step = &proposal - &beta;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            let value = penalized_objective(family, x, &targets, &candidate, opts.ridge);
            if value.is_finite() && value >= objective - 1e-12 * objective.abs().max(1.0) {
                accepted = Some((candidate, value));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, value)) = accepted else {
            break;
        };
        let change = (&candidate - &beta).amax();
        beta = candidate;
        objective = value;
        trace.push(objective);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("IRLS coefficients".into()));
    }
    let fit = FitResult { beta, dispersion: None, converged, iterations, objective };
    Ok((fit, trace))
}

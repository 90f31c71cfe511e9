//! Out-of-sample utility estimates for every size along a selection path,
//! relative to the reference model, plus model-size decision rules.

mod cv;
mod loo;
mod psis;

pub use cv::{
    cv_varsel, eval_test, eval_test_with_design, fold_ids, subsample_weights, CvOptions, CvResult, Fold, RefSource,
    Scheme, TestEvaluation, MAX_FAILED_FRACTION,
};
pub use loo::{loo_reference_fit, pointwise_log_lik, LooContext, LooPoint};
pub use psis::{gpdfit, psis_smooth, PsisResult};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Per-point log predictive densities of each submodel and the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseUtilities {
    /// sizes x n.
    pub u_sub: DMatrix<f64>,
    pub u_ref: Vec<f64>,
    /// Nonnegative point weights summing to one.
    pub weights: Vec<f64>,
    pub khat: Option<Vec<f64>>,
}

impl PointwiseUtilities {
    pub fn new(u_sub: DMatrix<f64>, u_ref: Vec<f64>, weights: Vec<f64>, khat: Option<Vec<f64>>) -> Result<Self> {
        let n = u_ref.len();
        if u_sub.ncols() != n || weights.len() != n || khat.as_ref().is_some_and(|k| k.len() != n) {
            return Err(Error::DimensionMismatch("pointwise utilities have inconsistent lengths".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("point weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("point weights sum to {total}, expected 1")));
        }
        for i in (0..n).filter(|&i| weights[i] > 0.0) {
            if !u_ref[i].is_finite() || u_sub.column(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("utilities at point {i}")));
            }
        }
        Ok(Self { u_sub, u_ref, weights, khat })
    }

    /// Uniform weights over all points.
    pub fn uniform(u_sub: DMatrix<f64>, u_ref: Vec<f64>, khat: Option<Vec<f64>>) -> Result<Self> {
        let n = u_ref.len();
        Self::new(u_sub, u_ref, vec![1.0 / n as f64; n], khat)
    }

    pub fn n_sizes(&self) -> usize {
        self.u_sub.nrows()
    }

    /// Appends the reference itself as a final row, which compares to the
    /// reference with difference zero at every point.
    pub fn with_reference_row(&self) -> Self {
        let (sizes, n) = self.u_sub.shape();
        let mut u_sub = self.u_sub.clone().insert_row(sizes, 0.0);
        for i in 0..n {
            u_sub[(sizes, i)] = self.u_ref[i];
        }
        Self { u_sub, ..self.clone() }
    }

    /// Number of points with positive weight.
    pub fn n_used(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }
}

/// Relative and absolute utility estimates per path size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySummary {
    pub delta_mean: Vec<f64>,
    pub delta_se: Vec<f64>,
    pub abs_mean: Vec<f64>,
    pub abs_se: Vec<f64>,
    pub ref_mean: f64,
    pub ref_se: f64,
    /// Size with the largest `delta_mean` (smallest size on ties).
    pub best_size: usize,
    /// Utility relative to the best submodel.
    pub best_delta_mean: Vec<f64>,
    pub best_delta_se: Vec<f64>,
}

impl UtilitySummary {
    /// Summary from relative estimates alone. Lacking pointwise values, the
    /// standard error relative to the best submodel is approximated by `s_k`.
    pub fn from_estimates(delta_mean: Vec<f64>, delta_se: Vec<f64>) -> Result<Self> {
        if delta_mean.is_empty() || delta_mean.len() != delta_se.len() {
            return Err(Error::InvalidArgument("need matching, nonempty estimate vectors".into()));
        }
        let best = argmax(&delta_mean);
        let best_delta_mean = delta_mean.iter().map(|d| d - delta_mean[best]).collect();
        let mut best_delta_se = delta_se.clone();
        best_delta_se[best] = 0.0;
        Ok(Self {
            abs_mean: vec![f64::NAN; delta_mean.len()],
            abs_se: vec![f64::NAN; delta_mean.len()],
            ref_mean: f64::NAN,
            ref_se: f64::NAN,
            best_size: best,
            best_delta_mean,
            best_delta_se,
            delta_mean,
            delta_se,
        })
    }

    pub fn n_sizes(&self) -> usize {
        self.delta_mean.len()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Weighted mean of `values` and `sqrt(weighted variance / m)`, with `m`
/// the number of positively weighted points.
fn weighted_estimate(values: &[f64], weights: &[f64], m: usize) -> (f64, f64) {
    let (mean, var) = linalg::weighted_mean_var(values, weights);
    (mean, (var / m as f64).sqrt())
}

pub fn relative_utility(pw: &PointwiseUtilities) -> Result<UtilitySummary> {
    let m = pw.n_used();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two weighted points for a standard error, have {m}"
        )));
    }
    let n = pw.u_ref.len();
    let sizes = pw.n_sizes();
    // Zero-weight points may carry placeholder values; keep them out.
    let used: Vec<usize> = (0..n).filter(|&i| pw.weights[i] > 0.0).collect();
    let w: Vec<f64> = used.iter().map(|&i| pw.weights[i]).collect();
    let row = |k: usize| -> Vec<f64> { used.iter().map(|&i| pw.u_sub[(k, i)]).collect() };
    let u_ref: Vec<f64> = used.iter().map(|&i| pw.u_ref[i]).collect();
    let (ref_mean, ref_se) = weighted_estimate(&u_ref, &w, m);
    let mut delta_mean = Vec::with_capacity(sizes);
    let mut delta_se = Vec::with_capacity(sizes);
    let mut abs_mean = Vec::with_capacity(sizes);
    let mut abs_se = Vec::with_capacity(sizes);
    for k in 0..sizes {
        let u = row(k);
        let d: Vec<f64> = u.iter().zip(&u_ref).map(|(a, b)| a - b).collect();
        let (dm, ds) = weighted_estimate(&d, &w, m);
        delta_mean.push(dm);
        delta_se.push(ds);
        let (am, as_) = weighted_estimate(&u, &w, m);
        abs_mean.push(am);
        abs_se.push(as_);
    }
    let best = argmax(&delta_mean);
    let u_best = row(best);
    let mut best_delta_mean = Vec::with_capacity(sizes);
    let mut best_delta_se = Vec::with_capacity(sizes);
    for k in 0..sizes {
        let d: Vec<f64> = row(k).iter().zip(&u_best).map(|(a, b)| a - b).collect();
        let (dm, ds) = weighted_estimate(&d, &w, m);
        best_delta_mean.push(dm);
        best_delta_se.push(ds);
    }
    Ok(UtilitySummary {
        delta_mean,
        delta_se,
        abs_mean,
        abs_se,
        ref_mean,
        ref_se,
        best_size: best,
        best_delta_mean,
        best_delta_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeRule {
    /// Smallest size within one standard error of the reference model.
    #[serde(rename = "ref-1se")]
    Ref1se,
    /// Smallest size within one standard error of the best submodel.
    #[serde(rename = "best-1se")]
    Best1se,
}

impl std::str::FromStr for SizeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ref-1se" => Ok(SizeRule::Ref1se),
            "best-1se" => Ok(SizeRule::Best1se),
            other => Err(Error::InvalidArgument(format!("unknown size rule '{other}'"))),
        }
    }
}

/// Absolute slack in the one-standard-error comparison.
pub const SELECT_ROUNDOFF: f64 = 1e-12;

/// Chosen size (number of features). `Ref1se` falls back to `Best1se` when
/// no submodel comes within one standard error of the reference.
pub fn select_size(summary: &UtilitySummary, rule: SizeRule) -> usize {
    // Sizes whose utilities differ from the target only by rounding count as within.
    let within = |mean: &[f64], se: &[f64]| (0..mean.len()).find(|&k| mean[k] + se[k] >= -SELECT_ROUNDOFF);
    let best = || within(&summary.best_delta_mean, &summary.best_delta_se).unwrap_or(summary.best_size);
    match rule {
        SizeRule::Ref1se => within(&summary.delta_mean, &summary.delta_se).unwrap_or_else(best),
        SizeRule::Best1se => best(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_utilities_give_zero() {
        let u = DMatrix::from_row_slice(1, 3, &[-1.0, -2.0, -0.5]);
        let pw = PointwiseUtilities::uniform(u, vec![-1.0, -2.0, -0.5], None).unwrap();
        let s = relative_utility(&pw).unwrap();
        assert_eq!(s.delta_mean[0], 0.0);
        assert_eq!(s.delta_se[0], 0.0);
    }

    #[test]
    fn reference_row_is_exactly_zero() {
        let u = DMatrix::from_row_slice(1, 3, &[-1.3, 0.2, -0.5]);
        let pw = PointwiseUtilities::uniform(u, vec![-1.0, -2.1, -0.45], None).unwrap().with_reference_row();
        assert_eq!(pw.n_sizes(), 2);
        let s = relative_utility(&pw).unwrap();
        assert_eq!(s.delta_mean[1], 0.0);
        assert_eq!(s.delta_se[1], 0.0);
        assert_eq!(s.abs_mean[1], s.ref_mean);
    }

    #[test]
    fn two_point_example() {
        let u = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let pw = PointwiseUtilities::uniform(u, vec![0.0, 0.0], None).unwrap();
        let s = relative_utility(&pw).unwrap();
        assert_abs_diff_eq!(s.delta_mean[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.delta_se[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_weight_point_is_dropped() {
        let u = DMatrix::from_row_slice(2, 4, &[0.3, -1.2, 0.7, 9.0, 0.1, 0.4, -0.6, -9.0]);
        let u_ref = vec![0.0, -0.5, 0.2, 4.0];
        let weighted = PointwiseUtilities::new(u.clone(), u_ref.clone(), vec![0.5, 0.25, 0.25, 0.0], None).unwrap();
        let dropped =
            PointwiseUtilities::new(u.columns(0, 3).into_owned(), u_ref[..3].to_vec(), vec![0.5, 0.25, 0.25], None)
                .unwrap();
        let a = relative_utility(&weighted).unwrap();
        let b = relative_utility(&dropped).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(a.delta_mean[k], b.delta_mean[k], epsilon = 1e-15);
            assert_abs_diff_eq!(a.delta_se[k], b.delta_se[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pw = PointwiseUtilities::new(DMatrix::zeros(1, 2), vec![0.0, 0.0], vec![1.0, 0.0], None).unwrap();
        assert!(relative_utility(&pw).is_err());
    }

    #[test]
    fn rule_examples() {
        let s = UtilitySummary::from_estimates(vec![-1.0, -0.1, 0.0], vec![0.2; 3]).unwrap();
        assert_eq!(select_size(&s, SizeRule::Ref1se), 1);
        let s = UtilitySummary::from_estimates(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(select_size(&s, SizeRule::Ref1se), 0);
        assert_eq!(select_size(&s, SizeRule::Best1se), 0);
        let s = UtilitySummary::from_estimates(vec![-3.0, -2.0, -1.0], vec![0.1; 3]).unwrap();
        assert_eq!(select_size(&s, SizeRule::Ref1se), 2);
        assert_eq!(select_size(&s, SizeRule::Best1se), 2);
    }
}

//! Small dense linear-algebra and summary helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold on the diagonal of R below which a least-squares
/// system is declared rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Householder-QR least-squares solver for a fixed tall matrix.
///
/// Factorizes once, then solves for any number of right-hand sides.
pub struct LeastSquares {
    qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<f64>,
    rows: usize,
}

impl LeastSquares {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = a.shape();
        if rows < cols {
            return Err(Error::Singular(format!("least-squares system has {rows} rows but {cols} columns")));
        }
        let qr = a.clone().qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..cols).map(|i| r[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        if cols > 0 && (max == 0.0 || diag.iter().any(|&d| d <= RANK_TOL * max)) {
            return Err(Error::Singular("rank-deficient design".into()));
        }
        Ok(Self { qr, r, rows })
    }

    /// Coefficients minimizing `||A x - b||` for each column of `b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.rows {
            return Err(Error::DimensionMismatch(format!("rhs has {} rows, system has {}", b.nrows(), self.rows)));
        }
        let cols = self.r.ncols();
        let mut qtb = b.clone();
        self.qr.q_tr_mul(&mut qtb);
        let top = qtb.rows(0, cols).into_owned();
        self.r.solve_upper_triangular(&top).ok_or_else(|| Error::Singular("triangular solve failed".into()))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        Ok(self.solve(&m)?.column(0).into_owned())
    }
}

/// Solves `min ||A x - b||^2 + ridge * sum_{j in penalized} x_j^2`.
pub fn ridge_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64, penalized: &[bool]) -> Result<DMatrix<f64>> {
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    if ridge == 0.0 {
        return LeastSquares::new(a)?.solve(b);
    }
    let (n, k) = a.shape();
    let pen: Vec<usize> = (0..k).filter(|&j| penalized[j]).collect();
    let mut aug = DMatrix::zeros(n + pen.len(), k);
    aug.view_mut((0, 0), (n, k)).copy_from(a);
    let root = ridge.sqrt();
    for (r, &j) in pen.iter().enumerate() {
        aug[(n + r, j)] = root;
    }
    let mut rhs = DMatrix::zeros(n + pen.len(), b.ncols());
    rhs.view_mut((0, 0), (n, b.ncols())).copy_from(b);
    LeastSquares::new(&aug)?.solve(&rhs)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Weighted mean and unbiased (reliability-weight) variance.
///
/// Weights need not be normalized. The variance uses the correction
/// `1 / (1 - sum w_i^2)` on normalized weights, which reduces to the usual
/// `n - 1` divisor for equal weights. Returns variance 0 when fewer than two
/// points carry weight.
pub fn weighted_mean_var(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let sum_sq_w: f64 = weights.iter().map(|w| (w / total).powi(2)).sum();
    let denom = 1.0 - sum_sq_w;
    if denom <= 1e-15 {
        return (mean, 0.0);
    }
    let ss = values.iter().zip(weights).map(|(v, w)| (w / total) * (v - mean).powi(2)).sum::<f64>();
    (mean, ss / denom)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = mean(values);
    if values.len() < 2 {
        return (m, f64::NAN);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Sample Pearson correlation; `None` when either input has zero variance.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Square-root factor `L` with `L L^T = K` for a symmetric PSD matrix, via
/// the eigendecomposition (tolerates singular `K`).
pub fn psd_sqrt(k: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = k.clone().symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Ranks (1-based) of `scores` sorted descending, ties broken by index.
pub fn descending_ranks(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn least_squares_matches_exact_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 3.0, 5.0]);
        let x = LeastSquares::new(&a).unwrap().solve_vec(&b).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(LeastSquares::new(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn weighted_variance_reduces_to_sample_variance() {
        let v = [1.0, 2.0, 4.0];
        let (m, var) = weighted_mean_var(&v, &[1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(m, 7.0 / 3.0, epsilon = 1e-14);
        let expected = ((1.0f64 - m).powi(2) + (2.0 - m).powi(2) + (4.0 - m).powi(2)) / 2.0;
        assert_abs_diff_eq!(var, expected, epsilon = 1e-14);
        let (_, single) = weighted_mean_var(&[3.0], &[1.0]);
        assert_eq!(single, 0.0);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert_abs_diff_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}

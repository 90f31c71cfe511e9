//! Supervised principal components: correlation screening followed by PCA
//! of the retained block.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;

/// `|corr(x_j, y)|` per column; `None` for zero-variance columns.
pub fn abs_correlations(x: &DMatrix<f64>, y: &[f64]) -> Vec<Option<f64>> {
    (0..x.ncols())
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            linalg::correlation(&col, y).map(f64::abs)
        })
        .collect()
}

/// Indices of columns with `|corr(x_j, y)| >= gamma`.
pub fn screen(x: &DMatrix<f64>, y: &[f64], gamma: f64) -> Result<Vec<usize>> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!("{} responses for {} rows", y.len(), x.nrows())));
    }
    screen_with(&abs_correlations(x, y), gamma)
}

pub(crate) fn screen_with(r: &[Option<f64>], gamma: f64) -> Result<Vec<usize>> {
    let mut dropped = 0;
    let mask: Vec<usize> = r
        .iter()
        .enumerate()
        .filter_map(|(j, v)| match v {
            Some(v) if *v >= gamma => Some(j),
            Some(_) => None,
            None => {
                dropped += 1;
                None
            }
        })
        .collect();
    if dropped > 0 {
        log::warn!("dropped {dropped} zero-variance feature(s) during screening");
    }
    if mask.is_empty() {
        return Err(Error::EmptyScreen(gamma));
    }
    Ok(mask)
}

/// Supervised principal components fitted on one screened block.
#[derive(Debug, Clone, PartialEq)]
pub struct Spc {
    /// Retained raw-feature indices.
    pub mask: Vec<usize>,
    /// Column means of the retained features.
    pub center: Vec<f64>,
    /// Loadings, `mask.len() x n_components`, orthonormal columns.
    pub rotation: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl Spc {
    /// Fits on the features in `mask`, keeping at most `n_components`
    /// components with nonzero singular value.
    pub fn fit(x: &DMatrix<f64>, mask: Vec<usize>, n_components: usize) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyScreen(f64::NAN));
        }
        if n_components == 0 {
            return Err(Error::InvalidArgument("need at least one component".into()));
        }
        let n = x.nrows();
        let block = x.select_columns(&mask);
        let center: Vec<f64> = (0..block.ncols()).map(|j| block.column(j).mean()).collect();
        let mut xc = block;
        for (j, m) in center.iter().enumerate() {
            xc.column_mut(j).add_scalar_mut(-m);
        }
        let ps = mask.len();
        // Eigendecompose the smaller Gram matrix.
        let (values, loadings) = if n < ps {
            let eig = SymmetricEigen::new(&xc * xc.transpose());
            let order = descending(eig.eigenvalues.as_slice());
            let mut vals = Vec::new();
            let mut cols = Vec::new();
            for &i in &order {
                let s = eig.eigenvalues[i].max(0.0).sqrt();
                let u = eig.eigenvectors.column(i);
                cols.push(xc.transpose() * u / s);
                vals.push(s);
            }
            (vals, cols)
        } else {
            let eig = SymmetricEigen::new(xc.transpose() * &xc);
            let order = descending(eig.eigenvalues.as_slice());
            let vals = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
            let cols = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
            (vals, cols)
        };
        let top = values.first().copied().unwrap_or(0.0);
        let keep = values
            .iter()
            .take(n_components)
            .take_while(|&&s| s > linalg::RANK_TOL * top.max(1.0) && s.is_finite())
            .count();
        if keep == 0 {
            return Err(Error::Singular("screened block has no variance".into()));
        }
        let mut rotation = DMatrix::zeros(ps, keep);
        for c in 0..keep {
            let mut v = loadings[c].clone();
            let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if lead < 0.0 {
                v.neg_mut();
            }
            rotation.set_column(c, &v);
        }
        Ok(Self { mask, center, rotation, singular_values: values[..keep].to_vec() })
    }

    pub fn n_components(&self) -> usize {
        self.rotation.ncols()
    }

    /// Component scores of raw-feature rows.
    pub fn scores(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut block = x.select_columns(&self.mask);
        for (j, m) in self.center.iter().enumerate() {
            block.column_mut(j).add_scalar_mut(-m);
        }
        block * &self.rotation
    }
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Screens at `gamma` and returns `(scores, spc)`.
pub fn supervised_pcs(x: &DMatrix<f64>, y: &[f64], gamma: f64, n_components: usize) -> Result<(DMatrix<f64>, Spc)> {
    let mask = screen(x, y, gamma)?;
    let spc = Spc::fit(x, mask, n_components)?;
    Ok((spc.scores(x), spc))
}

/// Linear grid between the largest threshold that keeps every feature and
/// the smallest that keeps only one.
pub fn gamma_grid(r: &[Option<f64>], n_gamma: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = r.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::InvalidArgument("no feature has a defined correlation with y".into()));
    }
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..n_gamma)
        .map(|i| if i + 1 == n_gamma { hi } else { lo + (hi - lo) * i as f64 / (n_gamma - 1) as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn data(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n).map(|i| x[(i, 0)] + x[(i, 1 % p)] + rng.sample::<f64, _>(StandardNormal)).collect();
        (x, y)
    }

    #[test]
    fn screen_extremes() {
        let (x, y) = data(1, 30, 8);
        assert_eq!(screen(&x, &y, 0.0).unwrap().len(), 8);
        assert!(matches!(screen(&x, &y, 1.01), Err(Error::EmptyScreen(_))));
    }

    #[test]
    fn zero_variance_column_is_dropped() {
        let (mut x, y) = data(2, 20, 3);
        x.column_mut(1).fill(4.0);
        assert_eq!(screen(&x, &y, 0.0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn grid_endpoints() {
        let (x, y) = data(3, 40, 12);
        let r = abs_correlations(&x, &y);
        let grid = gamma_grid(&r, 7).unwrap();
        assert_eq!(grid.len(), 7);
        assert_eq!(screen_with(&r, grid[0]).unwrap().len(), 12);
        assert_eq!(screen_with(&r, grid[6]).unwrap().len(), 1);
    }

    #[test]
    fn single_feature_component() {
        let (x, y) = data(4, 25, 1);
        let (scores, spc) = supervised_pcs(&x, &y, 0.0, 3).unwrap();
        assert_eq!(spc.n_components(), 1);
        assert_abs_diff_eq!(spc.rotation[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        let m = x.column(0).mean();
        for i in 0..25 {
            assert_abs_diff_eq!(scores[(i, 0)].abs(), (x[(i, 0)] - m).abs(), epsilon = 1e-10);
        }
    }

    #[test]
    fn scores_orthogonal_in_both_regimes() {
        for (n, p) in [(20, 60), (60, 10)] {
            let (x, y) = data(5, n, p);
            let (scores, spc) = supervised_pcs(&x, &y, 0.0, 3).unwrap();
            let g = scores.transpose() * &scores;
            let r = spc.rotation.transpose() * &spc.rotation;
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        assert!(g[(a, b)].abs() < 1e-8 * g[(a, a)].max(1.0));
                    }
                    assert_abs_diff_eq!(r[(a, b)], if a == b { 1.0 } else { 0.0 }, epsilon = 1e-10);
                }
            }
            assert!(spc.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn shift_invariance() {
        let (x, y) = data(6, 30, 5);
        let (a, _) = supervised_pcs(&x, &y, 0.0, 2).unwrap();
        let mut shifted = x.clone();
        shifted.column_mut(3).add_scalar_mut(7.5);
        let (b, _) = supervised_pcs(&shifted, &y, 0.0, 2).unwrap();
        for i in 0..30 {
            for c in 0..2 {
                assert_abs_diff_eq!(a[(i, c)].abs(), b[(i, c)].abs(), epsilon = 1e-8);
            }
        }
    }
}

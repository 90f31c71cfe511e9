//! Cross-validation of the whole selection procedure: K-fold with reference
//! refits, PSIS-LOO and stratified subsampled LOO.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::loo::LooContext;
use super::{relative_utility, PointwiseUtilities, UtilitySummary};
use crate::error::{Error, Result};
use crate::glm::Family;
use crate::linalg;
use crate::projection::{self, cluster_draws, ProjectedSubmodel, ReferenceFit};
use crate::reference::{ReferenceBuilder, ReferenceModel};
use crate::rng;
use crate::search::{self, SearchConfig, SelectionPath};

/// Largest fraction of folds allowed to fail before the run aborts.
pub const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    KFold(usize),
    Loo,
    /// Stratified subsample of `m` leave-one-out points.
    LooSubsample {
        m: usize,
        seed: u64,
    },
}

/// Either a fitted reference model or a recipe for fitting one.
#[derive(Clone, Copy)]
pub enum RefSource<'a> {
    Model(&'a ReferenceModel),
    Builder(&'a dyn ReferenceBuilder),
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub scheme: Scheme,
    pub search: SearchConfig,
    pub clusters_select: usize,
    pub clusters_predict: usize,
    pub seed: u64,
    /// Rerun the search inside every fold. When false the full-data
    /// ordering is reused and only the projections are redone.
    pub search_per_fold: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Loo,
            search: SearchConfig::default(),
            clusters_select: 1,
            clusters_predict: 20,
            seed: 0,
            search_per_fold: true,
        }
    }
}

/// Training and held-out indices of one fold (one point for LOO).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub held_out: Vec<usize>,
    pub train: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    /// Selection path on the full data, for reporting.
    pub path: SelectionPath,
    pub reference: ReferenceModel,
    pub pointwise: PointwiseUtilities,
    pub summary: UtilitySummary,
    pub khat: Option<Vec<f64>>,
    /// Folds that were evaluated, in order.
    pub folds: Vec<Fold>,
    /// Feature ordering used in each evaluated fold.
    pub fold_orders: Vec<Vec<usize>>,
    pub failed_folds: usize,
}

/// Seeded fold labels in `0..k`. Bernoulli responses are stratified by class.
pub fn fold_ids(y: &[f64], family: Family, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = y.len();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("fold count {k} outside 2..={n}")));
    }
    let mut r = rng::stream(seed, 0xF01D);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    if family == Family::Bernoulli {
        // Stable partition by class keeps the shuffle within each class.
        order.sort_by_key(|&i| y[i] > 0.5);
    }
    let mut ids = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ids[i] = pos % k;
    }
    Ok(ids)
}

/// Stratified subsample weights over k-hat strata `< 0.5`, `0.5..=0.7` and
/// `> 0.7`: `floor(m/3)` points (or the whole stratum) from each, topped up
/// uniformly at random to `m`; selected points in stratum `j` get weight
/// `n_j / (n m_j)`, the rest zero.
pub fn subsample_weights(khat: &[f64], m: usize, seed: u64) -> Result<Vec<f64>> {
    let n = khat.len();
    if m < 2 || m > n {
        return Err(Error::InvalidArgument(format!("subsample size {m} outside 2..={n}")));
    }
    let stratum = |k: f64| {
        if k < 0.5 {
            0
        } else if k <= 0.7 {
            1
        } else {
            2
        }
    };
    let mut r = rng::seeded(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for (i, &k) in khat.iter().enumerate() {
        members[stratum(k)].push(i);
    }
    let mut chosen = vec![false; n];
    for group in members.iter_mut() {
        group.shuffle(&mut r);
        for &i in group.iter().take(m / 3) {
            chosen[i] = true;
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    rest.shuffle(&mut r);
    let missing = m - chosen.iter().filter(|c| **c).count();
    for &i in rest.iter().take(missing) {
        chosen[i] = true;
    }
    let mut weights = vec![0.0; n];
    for group in &members {
        let m_j = group.iter().filter(|&&i| chosen[i]).count();
        for &i in group.iter().filter(|&&i| chosen[i]) {
            weights[i] = group.len() as f64 / (n as f64 * m_j as f64);
        }
    }
    Ok(weights)
}

/// Submodels along the path for one fold: a fresh search, or projections
/// onto prefixes of a fixed ordering.
fn fold_path(
    x_train: &DMatrix<f64>,
    ref_select: &ReferenceFit,
    ref_predict: &ReferenceFit,
    config: &SearchConfig,
    fixed_order: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<ProjectedSubmodel>)> {
    match fixed_order {
        None => {
            let path = search::build_path(x_train, ref_select, ref_predict, config)?;
            Ok((path.order, path.submodels))
        }
        Some(order) => {
            let (n, p) = x_train.shape();
            let max = config.effective_max_size(n, p).min(order.len());
            let subs = (0..=max)
                .into_par_iter()
                .map(|k| projection::project(x_train, &order[..k], ref_predict, config.relax_ridge))
                .collect::<Result<Vec<_>>>()?;
            Ok((order.to_vec(), subs))
        }
    }
}

/// Utilities of one fold: `(order, u_sub sizes x held_out, u_ref)`.
type FoldOutput = (Vec<usize>, Vec<Vec<f64>>, Vec<f64>);

fn kfold_one(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    builder: &dyn ReferenceBuilder,
    fold: &Fold,
    opts: &CvOptions,
    fixed_order: Option<&[usize]>,
) -> Result<FoldOutput> {
    let x_train = x.select_rows(&fold.train);
    let y_train: Vec<f64> = fold.train.iter().map(|&i| y[i]).collect();
    let x_test = x.select_rows(&fold.held_out);
    let y_test: Vec<f64> = fold.held_out.iter().map(|&i| y[i]).collect();
    let model = builder.build(&x_train, &y_train, family)?;
    let s = model.draws.n_draws();
    let ref_select = cluster_draws(&model.draws, family, opts.clusters_select.min(s), opts.seed)?;
    let ref_predict = cluster_draws(&model.draws, family, opts.clusters_predict.min(s), opts.seed)?;
    let (order, subs) = fold_path(&x_train, &ref_select, &ref_predict, &opts.search, fixed_order)?;
    let u_sub = subs
        .iter()
        .map(|sub| projection::predictive_log_densities(sub, &x_test, &y_test))
        .collect::<Result<Vec<_>>>()?;
    let u_ref = model.log_predictive(&x_test, &y_test)?;
    Ok((order, u_sub, u_ref))
}

fn loo_one(
    x: &DMatrix<f64>,
    y: &[f64],
    ctx: &LooContext,
    i: usize,
    opts: &CvOptions,
    fixed_order: Option<&[usize]>,
) -> Result<(FoldOutput, f64)> {
    let point = ctx.point(i)?;
    let x_train = x.clone().remove_row(i);
    let (order, subs) = fold_path(&x_train, &point.fit_select, &point.fit_predict, &opts.search, fixed_order)?;
    let row: Vec<f64> = x.row(i).iter().copied().collect();
    let u_sub = subs
        .iter()
        .map(|sub| projection::predictive_log_density(sub, &row, y[i]).map(|v| vec![v]))
        .collect::<Result<Vec<_>>>()?;
    Ok(((order, u_sub, vec![point.u_ref]), point.khat))
}

/// Cross-validates the selection procedure and returns per-size utility
/// estimates together with the full-data path.
pub fn cv_varsel(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    source: RefSource<'_>,
    opts: &CvOptions,
) -> Result<CvResult> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} responses for {n} rows", y.len())));
    }
    for &v in y {
        family.validate_response(v)?;
    }
    opts.search.validate(p)?;
    if opts.clusters_select == 0 || opts.clusters_predict == 0 {
        return Err(Error::InvalidArgument("cluster counts must be positive".into()));
    }
    let reference = match source {
        RefSource::Model(m) => m.clone(),
        RefSource::Builder(b) => b.build(x, y, family)?,
    };
    if reference.family != family {
        return Err(Error::InvalidArgument("reference model family differs".into()));
    }
    if reference.draws.n_obs() != n {
        return Err(Error::DimensionMismatch(format!(
            "reference has {} observations, data has {n}",
            reference.draws.n_obs()
        )));
    }
    let s = reference.draws.n_draws();
    let ctx = match opts.scheme {
        Scheme::KFold(_) => None,
        Scheme::Loo | Scheme::LooSubsample { .. } => Some(LooContext::new(
            &reference.draws,
            family,
            y,
            opts.clusters_select.min(s),
            opts.clusters_predict.min(s),
            opts.seed,
        )?),
    };
    let (ref_select, ref_predict) = match &ctx {
        Some(c) => (c.reference_fit(false)?, c.reference_fit(true)?),
        None => (
            cluster_draws(&reference.draws, family, opts.clusters_select.min(s), opts.seed)?,
            cluster_draws(&reference.draws, family, opts.clusters_predict.min(s), opts.seed)?,
        ),
    };
    let path = search::build_path(x, &ref_select, &ref_predict, &opts.search)?;
    let fixed = (!opts.search_per_fold).then_some(path.order.as_slice());

    let mut point_weights = None;
    let mut khat = None;
    let (folds, outputs): (Vec<Fold>, Vec<Result<FoldOutput>>) = match opts.scheme {
        Scheme::KFold(k) => {
            let builder = match source {
                RefSource::Builder(b) => b,
                RefSource::Model(_) => {
                    return Err(Error::InvalidArgument("K-fold validation needs a reference builder".into()))
                }
            };
            let ids = fold_ids(y, family, k, opts.seed)?;
            let folds: Vec<Fold> = (0..k)
                .map(|f| {
                    let (held_out, train) = (0..n).partition(|&i| ids[i] == f);
                    Fold { held_out, train }
                })
                .collect();
            let outputs = folds.par_iter().map(|f| kfold_one(x, y, family, builder, f, opts, fixed)).collect();
            (folds, outputs)
        }
        Scheme::Loo | Scheme::LooSubsample { .. } => {
            let ctx = ctx.as_ref().expect("context is built for leave-one-out schemes");
            let k = ctx.khats()?;
            let selected: Vec<usize> = match opts.scheme {
                Scheme::LooSubsample { m, seed } => {
                    let w = subsample_weights(&k, m, seed)?;
                    let sel = (0..n).filter(|&i| w[i] > 0.0).collect();
                    point_weights = Some(w);
                    sel
                }
                _ => (0..n).collect(),
            };
            khat = Some(k);
            let folds: Vec<Fold> = selected
                .iter()
                .map(|&i| Fold { held_out: vec![i], train: (0..n).filter(|&j| j != i).collect() })
                .collect();
            let outputs = selected.par_iter().map(|&i| loo_one(x, y, ctx, i, opts, fixed).map(|(o, _)| o)).collect();
            (folds, outputs)
        }
    };

    let total = folds.len();
    let failed = outputs.iter().filter(|o| o.is_err()).count();
    for (f, o) in folds.iter().zip(&outputs) {
        if let Err(e) = o {
            log::warn!("fold holding out {:?} failed: {e}", &f.held_out[..f.held_out.len().min(5)]);
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * total as f64 || failed == total {
        return Err(Error::FoldFailures { failed, total });
    }
    let n_sizes = outputs.iter().flatten().map(|(_, u, _)| u.len()).min().unwrap_or(0).min(path.submodels.len());
    let mut u_sub = DMatrix::zeros(n_sizes, n);
    let mut u_ref = vec![0.0; n];
    let mut used = vec![false; n];
    let mut kept_folds = Vec::new();
    let mut fold_orders = Vec::new();
    for (fold, out) in folds.into_iter().zip(outputs) {
        let Ok((order, us, ur)) = out else { continue };
        for (t, &i) in fold.held_out.iter().enumerate() {
            for k in 0..n_sizes {
                u_sub[(k, i)] = us[k][t];
            }
            u_ref[i] = ur[t];
            used[i] = true;
        }
        fold_orders.push(order);
        kept_folds.push(fold);
    }
    let weights = match point_weights {
        Some(mut w) => {
            // Points from failed folds drop out; renormalize the rest.
            for i in 0..n {
                if !used[i] {
                    w[i] = 0.0;
                }
            }
            let t: f64 = w.iter().sum();
            w.iter().map(|v| v / t).collect()
        }
        None => {
            let m = used.iter().filter(|u| **u).count() as f64;
            used.iter().map(|&u| if u { 1.0 / m } else { 0.0 }).collect()
        }
    };
    let pointwise = PointwiseUtilities::new(u_sub, u_ref, weights, khat.clone())?;
    let summary = relative_utility(&pointwise)?;
    let mut path = path;
    path.submodels.truncate(n_sizes);
    path.losses.truncate(n_sizes);
    Ok(CvResult { path, reference, pointwise, summary, khat, folds: kept_folds, fold_orders, failed_folds: failed })
}

/// Per-size performance on an independent test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestEvaluation {
    pub mlpd: Vec<f64>,
    pub mlpd_se: Vec<f64>,
    pub ref_mlpd: f64,
    pub ref_mlpd_se: f64,
    /// Pairwise difference to the reference, with its standard error.
    pub delta_mlpd: Vec<f64>,
    pub delta_se: Vec<f64>,
    /// Accuracy of predicting class 1 when its probability is at least 0.5
    /// (Bernoulli only).
    pub accuracy: Option<Vec<f64>>,
    pub ref_accuracy: Option<f64>,
    /// Mean squared error of the predictive mean (Gaussian only).
    pub mse: Option<Vec<f64>>,
    pub ref_mse: Option<f64>,
}

fn accuracy(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).filter(|(p, y)| (**p >= 0.5) == (**y > 0.5)).count() as f64 / y.len() as f64
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / y.len() as f64
}

/// Evaluates every submodel of `path` and the reference on test data.
pub fn eval_test(
    path: &SelectionPath,
    reference: &ReferenceModel,
    x_test: &DMatrix<f64>,
    y_test: &[f64],
) -> Result<TestEvaluation> {
    let z_test = reference.design_for(x_test)?;
    eval_test_with_design(path, reference, x_test, &z_test, y_test)
}

/// [`eval_test`] with an explicit reference design for the test rows.
pub fn eval_test_with_design(
    path: &SelectionPath,
    reference: &ReferenceModel,
    x_test: &DMatrix<f64>,
    z_test: &DMatrix<f64>,
    y_test: &[f64],
) -> Result<TestEvaluation> {
    if y_test.len() < 2 {
        return Err(Error::InvalidArgument("need at least two test points".into()));
    }
    let family = reference.family;
    let u_ref = reference.log_predictive_at(z_test, y_test)?;
    let eta = reference.draws.latent_at(z_test)?;
    let ref_pred: Vec<f64> = (0..eta.ncols())
        .map(|i| eta.column(i).iter().map(|&e| family.inverse_link(e)).sum::<f64>() / eta.nrows() as f64)
        .collect();
    let (ref_mlpd, ref_mlpd_se) = linalg::mean_se(&u_ref);
    let mut out = TestEvaluation {
        mlpd: Vec::new(),
        mlpd_se: Vec::new(),
        ref_mlpd,
        ref_mlpd_se,
        delta_mlpd: Vec::new(),
        delta_se: Vec::new(),
        accuracy: (family == Family::Bernoulli).then(Vec::new),
        ref_accuracy: (family == Family::Bernoulli).then(|| accuracy(&ref_pred, y_test)),
        mse: (family == Family::Gaussian).then(Vec::new),
        ref_mse: (family == Family::Gaussian).then(|| mse(&ref_pred, y_test)),
    };
    for sub in &path.submodels {
        let u = projection::predictive_log_densities(sub, x_test, y_test)?;
        let (m, se) = linalg::mean_se(&u);
        let diff: Vec<f64> = u.iter().zip(&u_ref).map(|(a, b)| a - b).collect();
        let (dm, dse) = linalg::mean_se(&diff);
        out.mlpd.push(m);
        out.mlpd_se.push(se);
        out.delta_mlpd.push(dm);
        out.delta_se.push(dse);
        let pred = sub.predictive_means(x_test)?;
        if let Some(a) = out.accuracy.as_mut() {
            a.push(accuracy(&pred, y_test));
        }
        if let Some(e) = out.mse.as_mut() {
            e.push(mse(&pred, y_test));
        }
    }
    Ok(out)
}

#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use projkit::glm::{irls_fit, irls_trace, log_lik, IrlsOptions};
use projkit::projection::{cluster_draws, project};
use projkit::reference::io::format_f64;
use projkit::reference::screen;
use projkit::search::forward_search;
use projkit::simdata::{generate_toy, Task, ToyConfig};
use projkit::theory::{gain_direct, gain_lemma, random_instance};
use projkit::validation::{psis_smooth, relative_utility};
use projkit::{rng, DesignMatrix, Family, PointwiseUtilities, PosteriorDraws, ReferenceFit};

fn normal_matrix(r: &mut impl Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian reference draws over an intercept plus `x`.
fn gaussian_draws(r: &mut impl Rng, x: &DMatrix<f64>, s: usize) -> PosteriorDraws {
    let design = DesignMatrix::with_intercept(x).unwrap();
    let betas = normal_matrix(r, s, x.ncols() + 1);
    let sigmas = (0..s).map(|_| 0.5 + r.random::<f64>()).collect();
    PosteriorDraws::new(betas, Some(sigmas), design).unwrap()
}

fn bernoulli_targets(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.05 + 0.9 * r.random::<f64>()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gaussian_irls_solves_normal_equations(seed in any::<u64>(), n in 8usize..40, p in 1usize..6) {
        let mut r = rng::seeded(seed);
        let x = DesignMatrix::with_intercept(&normal_matrix(&mut r, n, p)).unwrap();
        let t = normals(&mut r, n);
        let fit = irls_fit(Family::Gaussian, &x, &t, IrlsOptions::default()).unwrap();
        let xt = x.values().transpose();
        let gram = &xt * x.values();
        let beta = gram.cholesky().unwrap().solve(&(&xt * DVector::from_vec(t)));
        prop_assert!((fit.beta - beta).amax() < 1e-8);
    }

    #[test]
    fn irls_objective_never_decreases(seed in any::<u64>(), n in 10usize..40, p in 1usize..4) {
        let mut r = rng::seeded(seed);
        let x = DesignMatrix::with_intercept(&normal_matrix(&mut r, n, p)).unwrap();
        let t = bernoulli_targets(&mut r, n);
        let (_, trace) = irls_trace(Family::Bernoulli, &x, &t, IrlsOptions::default()).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn bernoulli_log_lik_is_symmetric(eta in -30.0f64..30.0, shift in -5.0f64..5.0) {
        let a = log_lik(Family::Bernoulli, 1.0, eta, None).unwrap();
        let b = log_lik(Family::Bernoulli, 0.0, -eta, None).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        let c = log_lik(Family::Bernoulli, 1.0, (eta + shift) - shift, None).unwrap();
        prop_assert!((a - c).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn ridge_shrinks_coefficients(seed in any::<u64>(), n in 10usize..40, p in 1usize..5, ridge in 0.01f64..10.0) {
        let mut r = rng::seeded(seed);
        let x = DesignMatrix::with_intercept(&normal_matrix(&mut r, n, p)).unwrap();
        let t = normals(&mut r, n);
        let free = irls_fit(Family::Gaussian, &x, &t, IrlsOptions::default()).unwrap();
        let shrunk = irls_fit(Family::Gaussian, &x, &t, IrlsOptions::with_ridge(ridge)).unwrap();
        let norm = |b: &DVector<f64>| b.rows(1, p).norm();
        prop_assert!(norm(&shrunk.beta) < norm(&free.beta));
    }

    #[test]
    fn projection_loss_decreases_under_nesting(seed in any::<u64>(), n in 12usize..30, p in 2usize..6, bern in any::<bool>()) {
        let mut r = rng::seeded(seed);
        let x = normal_matrix(&mut r, n, p);
        let (reference, tol) = if bern {
            (ReferenceFit::point(Family::Bernoulli, bernoulli_targets(&mut r, n), None).unwrap(), 1e-6)
        } else {
            let draws = gaussian_draws(&mut r, &x, 30);
            (cluster_draws(&draws, Family::Gaussian, 3, seed).unwrap(), 1e-10)
        };
        let mut set = Vec::new();
        let mut prev = project(&x, &set, &reference, 0.0).unwrap().loss;
        for j in 0..p {
            set.push(j);
            let loss = project(&x, &set, &reference, 0.0).unwrap().loss;
            prop_assert!(loss <= prev + tol, "{prev} -> {loss}");
            prev = loss;
        }
    }

    #[test]
    fn projected_dispersion_dominates_reference_variance(seed in any::<u64>(), n in 10usize..30, p in 1usize..5, c in 1usize..6) {
        let mut r = rng::seeded(seed);
        let x = normal_matrix(&mut r, n, p);
        let draws = gaussian_draws(&mut r, &x, 40);
        let reference = cluster_draws(&draws, Family::Gaussian, c, seed).unwrap();
        let sub = project(&x, &[0], &reference, 0.0).unwrap();
        let disp = sub.dispersions.as_ref().unwrap();
        for k in 0..sub.n_clusters() {
            let v = reference.cluster_vars(k).unwrap().mean();
            prop_assert!(disp[k] >= v * (1.0 - 1e-12));
        }
        prop_assert_eq!(&sub.weights[..], reference.weights());
        prop_assert!((sub.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_path_loss_is_non_increasing(seed in any::<u64>(), n in 12usize..30, p in 2usize..7) {
        let mut r = rng::seeded(seed);
        let x = normal_matrix(&mut r, n, p);
        let draws = gaussian_draws(&mut r, &x, 20);
        let reference = cluster_draws(&draws, Family::Gaussian, 1, 0).unwrap();
        let path = forward_search(&x, &reference, p, 0.0).unwrap();
        for w in path.losses.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10);
        }
    }

    #[test]
    fn forward_order_follows_column_permutations(seed in any::<u64>(), n in 15usize..30, p in 2usize..6) {
        let mut r = rng::seeded(seed);
        let x = normal_matrix(&mut r, n, p);
        let mu: Vec<f64> = normals(&mut r, n);
        let reference = ReferenceFit::point(Family::Gaussian, mu, Some(vec![1.0; n])).unwrap();
        let mut perm: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let xp = x.select_columns(&perm);
        let a = forward_search(&x, &reference, p, 0.0).unwrap().order;
        let b: Vec<usize> = forward_search(&xp, &reference, p, 0.0).unwrap().order.iter().map(|&j| perm[j]).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn psis_preserves_weight_order(raw in prop::collection::vec(-20.0f64..5.0, 30..300)) {
        let res = psis_smooth(&raw).unwrap();
        let mut idx: Vec<usize> = (0..raw.len()).collect();
        idx.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
        for w in idx.windows(2) {
            prop_assert!(res.weights[w[1]] >= res.weights[w[0]]);
        }
        prop_assert!((res.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reference_row_cancels_exactly(u in prop::collection::vec(-10.0f64..0.0, 2..40), shift in -1.0f64..1.0) {
        let n = u.len();
        let sub = DMatrix::from_fn(1, n, |_, i| u[i] + shift);
        let pw = PointwiseUtilities::uniform(sub, u, None).unwrap().with_reference_row();
        let s = relative_utility(&pw).unwrap();
        prop_assert_eq!(s.delta_mean[1], 0.0);
        prop_assert_eq!(s.delta_se[1], 0.0);
    }

    #[test]
    fn screening_is_monotone(seed in any::<u64>(), g1 in 0.0f64..0.6, g2 in 0.0f64..0.6) {
        let mut r = rng::seeded(seed);
        let x = normal_matrix(&mut r, 30, 12);
        let y: Vec<f64> = (0..30).map(|i| x[(i, 0)] + x[(i, 1)] + r.sample::<f64, _>(StandardNormal)).collect();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        if let (Ok(wide), Ok(narrow)) = (screen(&x, &y, lo), screen(&x, &y, hi)) {
            prop_assert!(narrow.iter().all(|j| wide.contains(j)));
        }
    }

    #[test]
    fn toy_data_is_deterministic(seed in any::<u64>(), n in 1usize..30, p in 1usize..10, rho in 0.0f64..0.99) {
        let cfg = ToyConfig { n, p, p_rel: p / 2, rho, seed, task: Task::Classification };
        prop_assert_eq!(generate_toy(&cfg).unwrap(), generate_toy(&cfg).unwrap());
    }

    #[test]
    fn gain_identity_and_scale_invariance(seed in any::<u64>(), n in 5usize..60, frac in 0.0f64..1.0, scale in 0.01f64..100.0) {
        let mut r = rng::seeded(seed);
        let p = 1 + ((n - 2) as f64 * frac) as usize;
        let inst = random_instance(&mut r, n, p);
        let lemma = gain_lemma(&inst).unwrap();
        prop_assert!((gain_direct(&inst).unwrap() - lemma).abs() < 1e-10);
        let mut scaled = inst.clone();
        scaled.x *= scale;
        prop_assert!((gain_lemma(&scaled).unwrap() - lemma).abs() < 1e-10);
    }

    #[test]
    fn float_output_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_f64(v).parse::<f64>().unwrap(), v);
    }
}

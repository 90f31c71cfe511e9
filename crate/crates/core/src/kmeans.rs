//! Seeded k-means with k-means++ initialization.
//!
//! Restart `r` draws from `rng::stream(seed, r)`; the restart with the lowest
//! inertia wins (earliest restart on ties), so results do not depend on how
//! restarts are scheduled across threads.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index of every row.
    pub assignment: Vec<usize>,
    /// One centroid per row.
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties. Points and centroids are stored
/// one per column.
fn nearest(point: &[f64], centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.ncols() {
        let d = sq_dist(point, centroids.column(c).as_slice());
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &DMatrix<f64>, k: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
    let (d, n) = points.shape();
    let mut centroids = DMatrix::zeros(d, k);
    let first = rng.random_range(0..n);
    centroids.column_mut(0).copy_from(&points.column(first));
    let col = |m: &DMatrix<f64>, i: usize| m.column(i).as_slice().to_vec();
    let c0 = col(&centroids, 0);
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.column(i).as_slice(), &c0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.column_mut(c).copy_from(&points.column(pick));
        let cc = col(&centroids, c);
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.column(i).as_slice(), &cc));
        }
    }
    centroids
}

fn lloyd(points: &DMatrix<f64>, mut centroids: DMatrix<f64>, max_iter: usize) -> KMeansResult {
    let (d, n) = points.shape();
    let k = centroids.ncols();
    let mut assignment = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let (c, dist) = nearest(points.column(i).as_slice(), &centroids);
            dists[i] = dist;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        // Reseed empty clusters from the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n guarantees a donor cluster");
                counts[assignment[far]] -= 1;
                assignment[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        let mut sums = DMatrix::<f64>::zeros(d, k);
        for (i, &c) in assignment.iter().enumerate() {
            let mut col = sums.column_mut(c);
            col += points.column(i);
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            centroids.column_mut(c).copy_from(&(sums.column(c) * inv));
        }
        if !changed {
            break;
        }
    }
    let inertia =
        (0..n).map(|i| sq_dist(points.column(i).as_slice(), centroids.column(assignment[i]).as_slice())).sum();
    KMeansResult { assignment, centroids: centroids.transpose(), inertia }
}

/// Clusters the rows of `points` into `k` groups.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, opts: KMeansOptions) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cluster count {k} outside 1..={n}")));
    }
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one restart".into()));
    }
    let by_column = points.transpose();
    let runs: Vec<KMeansResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let init = plus_plus_init(&by_column, k, &mut rng);
            lloyd(&by_column, init, opts.max_iter)
        })
        .collect();
    let best = runs.into_iter().reduce(|a, b| if b.inertia < a.inertia { b } else { a }).expect("at least one restart");
    Ok(best)
}

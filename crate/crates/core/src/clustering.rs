//! Spherical k-means over unit-normalized activation vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, DenseMatrix};
use crate::rng;

pub const DEFAULT_MAX_ITERS: usize = 100;
const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `n_clusters x d`, unit-norm rows.
    pub centroids: DenseMatrix,
    pub assignments: Vec<usize>,
    /// Clustering objective after each assignment step.
    pub objective_trace: Vec<f64>,
    /// `p x d` projection applied before clustering, if any.
    pub pca_projection: Option<DenseMatrix>,
    pub pca_mean: Option<Vec<f64>>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Column indices belonging to each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (j, &a) in self.assignments.iter().enumerate() {
            out[a].push(j);
        }
        out
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

/// Divides each row by its norm. Rows with norm <= 1e-12 are left as zero;
/// their count is returned.
pub fn normalize_rows(x: &DenseMatrix) -> (DenseMatrix, usize) {
    let mut out = x.clone();
    let mut zeros = 0;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n > ZERO_NORM {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            zeros += 1;
        }
    }
    (out, zeros)
}

/// Column-wise counterpart of [`normalize_rows`] for `d x M` token matrices.
pub fn normalize_columns(x: &DenseMatrix) -> (DenseMatrix, usize) {
    let (t, zeros) = normalize_rows(&x.transpose());
    (t.transpose(), zeros)
}

/// Index of the centroid with the largest inner product; ties go to the
/// lowest index.
pub fn assign_cluster(centroids: &DenseMatrix, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..centroids.rows() {
        let s = dot(centroids.row(i), x);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    best
}

/// `sum_j max_i mu_i . x_j` for `d x M` columns.
pub fn spherical_objective(centroids: &DenseMatrix, x: &DenseMatrix) -> f64 {
    let points = x.transpose();
    (0..points.rows())
        .map(|j| {
            let p = points.row(j);
            (0..centroids.rows())
                .map(|i| dot(centroids.row(i), p))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Single-start spherical k-means on the columns of `x` (`d x M`).
pub fn spherical_kmeans(
    x: &DenseMatrix,
    n_clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    spherical_kmeans_restarts(x, n_clusters, max_iters, 1, seed)
}

/// Runs `restarts` independently seeded k-means and keeps the one with the
/// largest final objective (earliest restart on ties).
pub fn spherical_kmeans_restarts(
    x: &DenseMatrix,
    n_clusters: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let (d, m) = x.shape();
    if n_clusters == 0 || m < n_clusters {
        return Err(Error::InsufficientData {
            points: m,
            clusters: n_clusters,
        });
    }
    if d == 0 {
        return Err(Error::ShapeMismatch("zero-dimensional points".into()));
    }
    let points = x.transpose();
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let run_seed = if r == 0 {
            seed
        } else {
            rng::derive_seed(seed, "kmeans-restart", r as u64)
        };
        let model = lloyd(&points, n_clusters, max_iters, run_seed);
        let better = match &best {
            None => true,
            Some(b) => model.final_objective() > b.final_objective(),
        };
        if better {
            best = Some(model);
        }
    }
    let mut model = best.expect("at least one restart");
    model.seed = seed;
    Ok(model)
}

/// `points` is `M x d`.
fn lloyd(points: &DenseMatrix, k: usize, max_iters: usize, seed: u64) -> ClusterModel {
    let d = points.cols();
    let mut centroids = plus_plus_init(points, k, seed);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();

    for _ in 0..max_iters.max(1) {
        let (next, objective) = assign_all(points, &centroids);
        trace.push(objective);
        let fixpoint = next == assignments;
        assignments = next;
        if fixpoint {
            break;
        }

        // centroid update: normalized sums
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (j, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &p) in sums.row_mut(a).iter_mut().zip(points.row(j)) {
                *s += p;
            }
        }
        let mut degenerate = Vec::new();
        for i in 0..k {
            let row = sums.row_mut(i);
            let n = norm(row);
            if n > ZERO_NORM {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                degenerate.push(i);
            }
        }
        centroids = sums;
        if !degenerate.is_empty() {
            repair_empty(points, &mut centroids, &mut assignments, &mut counts, &degenerate);
        }
    }

    ClusterModel {
        centroids,
        assignments,
        objective_trace: trace,
        pca_projection: None,
        pca_mean: None,
        seed,
    }
}

fn assign_all(points: &DenseMatrix, centroids: &DenseMatrix) -> (Vec<usize>, f64) {
    let mut objective = 0.0;
    let assignments = (0..points.rows())
        .map(|j| {
            let p = points.row(j);
            let a = assign_cluster(centroids, p);
            objective += dot(centroids.row(a), p);
            a
        })
        .collect();
    (assignments, objective)
}

/// Re-seeds each degenerate centroid from the worst-served point of a cluster
/// that can spare one.
fn repair_empty(
    points: &DenseMatrix,
    centroids: &mut DenseMatrix,
    assignments: &mut [usize],
    counts: &mut [usize],
    degenerate: &[usize],
) {
    let mut taken = vec![false; points.rows()];
    for &c in degenerate {
        let mut worst: Option<(usize, f64)> = None;
        for (j, &a) in assignments.iter().enumerate() {
            if taken[j] || degenerate.contains(&a) || counts[a] < 2 {
                continue;
            }
            let p = points.row(j);
            if norm(p) <= ZERO_NORM {
                continue;
            }
            let score = dot(centroids.row(a), p);
            if worst.is_none_or(|(_, s)| score < s) {
                worst = Some((j, score));
            }
        }
        let Some((j, _)) = worst else { continue };
        taken[j] = true;
        counts[assignments[j]] -= 1;
        assignments[j] = c;
        counts[c] += 1;
        let p = points.row(j);
        let n = norm(p);
        for (dst, &v) in centroids.row_mut(c).iter_mut().zip(p) {
            *dst = v / n;
        }
    }
}

/// k-means++ seeding with weights `1 - cos`, which is half the squared
/// Euclidean distance between unit vectors.
fn plus_plus_init(points: &DenseMatrix, k: usize, seed: u64) -> DenseMatrix {
    let (m, d) = points.shape();
    let mut rng = rng::stream(seed, rng::streams::CLUSTERING);
    let usable: Vec<usize> = (0..m).filter(|&j| norm(points.row(j)) > ZERO_NORM).collect();
    let mut centroids = DenseMatrix::zeros(k, d);
    if usable.is_empty() {
        // all-zero data; centroids are arbitrary unit vectors
        for i in 0..k {
            centroids[(i, i % d)] = 1.0;
        }
        return centroids;
    }
    let mut chosen = vec![false; m];
    let first = usable[rng.random_range(0..usable.len())];
    set_unit_row(&mut centroids, 0, points.row(first));
    chosen[first] = true;

    let mut best_cos: Vec<f64> = (0..m)
        .map(|j| dot(centroids.row(0), points.row(j)))
        .collect();
    for i in 1..k {
        let weights: Vec<f64> = (0..m)
            .map(|j| {
                if chosen[j] || norm(points.row(j)) <= ZERO_NORM {
                    0.0
                } else {
                    (1.0 - best_cos[j]).max(0.0)
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (j, w) in weights.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(j);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a centroid
            usable
                .iter()
                .copied()
                .find(|&j| !chosen[j])
                .unwrap_or(usable[i % usable.len()])
        };
        chosen[pick] = true;
        set_unit_row(&mut centroids, i, points.row(pick));
        for (j, b) in best_cos.iter_mut().enumerate() {
            *b = b.max(dot(centroids.row(i), points.row(j)));
        }
    }
    centroids
}

fn set_unit_row(m: &mut DenseMatrix, r: usize, v: &[f64]) {
    let n = norm(v);
    for (dst, &x) in m.row_mut(r).iter_mut().zip(v) {
        *dst = x / n;
    }
}

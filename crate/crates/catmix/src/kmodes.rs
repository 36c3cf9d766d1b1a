//! Huang-style k-modes clustering for binary data.
//!
//! Observations are compared with simple-matching distance (the count of
//! coordinates on which two vectors differ) and each cluster is
//! represented by its mode vector. Fitting alternates centroid updates
//! and reassignment until assignments stop changing, restarted from
//! several random initializations; the best-cost run wins.
//!
//! Tie policies are fixed so results are reproducible:
//! * a coordinate with equally many zeros and ones gets mode 1;
//! * an observation equidistant from several centroids keeps its current
//!   cluster if that is among the nearest, otherwise takes the lowest
//!   cluster index;
//! * a cluster emptied by reassignment is re-seeded from the observation
//!   farthest from its current centroid (lowest row index on ties).

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::CategoricalDataset;
use crate::error::Error;
use crate::rng;
use crate::Result;

/// Count of coordinates on which two binary vectors differ.
pub fn simple_matching_distance(a: &[u8], b: &[u8]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(smd(a, b))
}

#[inline]
fn smd(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Fit configuration for [`fit_kmodes`].
#[derive(Debug, Clone, Serialize)]
pub struct KModesConfig {
    /// Cluster count, 1 ≤ k ≤ N.
    pub k: usize,
    /// Iteration cap per restart.
    pub max_iter: usize,
    /// Independent random initializations.
    pub n_restarts: usize,
    /// Master seed; restart r uses a stream derived from (seed, r).
    pub seed: u64,
}

impl KModesConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 300,
            n_restarts: 50,
            seed,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_restarts(mut self, n_restarts: usize) -> Self {
        self.n_restarts = n_restarts;
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig {
                context: "k must be at least 1".into(),
            });
        }
        if self.k > n {
            return Err(Error::KTooLarge { k: self.k, n });
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig {
                context: "max_iter must be at least 1".into(),
            });
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidConfig {
                context: "n_restarts must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// A fitted k-modes model.
#[derive(Debug, Clone, Serialize)]
pub struct KModesModel {
    /// k×J mode vectors.
    pub centroids: Vec<Vec<u8>>,
    /// Cluster index (0-based) per observation.
    pub assignment: Vec<usize>,
    /// Total within-cluster dissimilarity of the final state.
    pub cost: usize,
    /// Iterations run by the winning restart.
    pub iterations: usize,
    /// Whether assignments stabilized before the iteration cap.
    pub converged: bool,
    /// Cost after each iteration of the winning restart (non-increasing).
    pub cost_trace: Vec<usize>,
    /// Which restart produced this model.
    pub restart: usize,
}

impl KModesModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Observation count per cluster.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Best-of-restarts k-modes fit. Restarts run independently (in
/// parallel) on streams derived from the master seed; the reduction picks
/// the lowest cost, breaking ties by lowest restart index.
pub fn fit_kmodes(ds: &CategoricalDataset, cfg: &KModesConfig) -> Result<KModesModel> {
    cfg.validate(ds.n())?;
    let rows = ds.rows();

    let mut runs: Vec<KModesModel> = (0..cfg.n_restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, r as u64);
            single_run(rows, cfg.k, cfg.max_iter, &mut rng, r)
        })
        .collect();

    let best = runs
        .iter()
        .enumerate()
        .min_by_key(|(i, m)| (m.cost, *i))
        .map(|(i, _)| i)
        .expect("at least one restart");
    Ok(runs.swap_remove(best))
}

fn single_run(
    rows: &[Vec<u8>],
    k: usize,
    max_iter: usize,
    rng: &mut impl rand::Rng,
    restart: usize,
) -> KModesModel {
    let n = rows.len();

    // Initial centroids: k distinct observations, partial Fisher-Yates.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let r = rng.random_range(i..n);
        idx.swap(i, r);
    }
    let mut centroids: Vec<Vec<u8>> = idx[..k].iter().map(|&i| rows[i].clone()).collect();

    let mut assignment: Vec<usize> = rows
        .iter()
        .map(|row| nearest(row, &centroids, None))
        .collect();

    let mut cost_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        update_centroids(&mut centroids, rows, &assignment, k);
        let mut changed = false;
        for (i, row) in rows.iter().enumerate() {
            let next = nearest(row, &centroids, Some(assignment[i]));
            if next != assignment[i] {
                assignment[i] = next;
                changed = true;
            }
        }
        cost_trace.push(total_cost(rows, &centroids, &assignment));
        if !changed {
            converged = true;
            break;
        }
    }

    let cost = *cost_trace.last().expect("max_iter >= 1");
    KModesModel {
        centroids,
        assignment,
        cost,
        iterations,
        converged,
        cost_trace,
        restart,
    }
}

fn nearest(row: &[u8], centroids: &[Vec<u8>], current: Option<usize>) -> usize {
    let mut best_d = usize::MAX;
    let mut best_i = 0;
    for (i, c) in centroids.iter().enumerate() {
        let d = smd(row, c);
        if d < best_d {
            best_d = d;
            best_i = i;
        }
    }
    if let Some(cur) = current {
        if smd(row, &centroids[cur]) == best_d {
            return cur;
        }
    }
    best_i
}

fn update_centroids(
    centroids: &mut [Vec<u8>],
    rows: &[Vec<u8>],
    assignment: &[usize],
    k: usize,
) {
    let j = rows[0].len();
    let mut ones = vec![vec![0usize; j]; k];
    let mut sizes = vec![0usize; k];
    for (row, &a) in rows.iter().zip(assignment) {
        sizes[a] += 1;
        for (jj, &v) in row.iter().enumerate() {
            ones[a][jj] += v as usize;
        }
    }
    for c in 0..k {
        if sizes[c] == 0 {
            // Re-seed from the observation farthest from this centroid.
            let far = rows
                .iter()
                .enumerate()
                .max_by_key(|(i, row)| (smd(row, &centroids[c]), std::cmp::Reverse(*i)))
                .map(|(i, _)| i)
                .expect("rows nonempty");
            centroids[c] = rows[far].clone();
        } else {
            for jj in 0..j {
                centroids[c][jj] = u8::from(2 * ones[c][jj] >= sizes[c]);
            }
        }
    }
}

fn total_cost(rows: &[Vec<u8>], centroids: &[Vec<u8>], assignment: &[usize]) -> usize {
    rows.iter()
        .zip(assignment)
        .map(|(row, &a)| smd(row, &centroids[a]))
        .sum()
}

/// Recompute the δ-sum of a fitted model from scratch.
pub fn total_within_cluster_dissimilarity(
    model: &KModesModel,
    ds: &CategoricalDataset,
) -> Result<usize> {
    if model.assignment.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "model assigns {} rows, dataset has {}",
                model.assignment.len(),
                ds.n()
            ),
        });
    }
    for c in &model.centroids {
        if c.len() != ds.n_items() {
            return Err(Error::DimensionMismatch {
                context: format!("centroid has {} items, dataset has {}", c.len(), ds.n_items()),
            });
        }
    }
    Ok(total_cost(ds.rows(), &model.centroids, &model.assignment))
}

/// Mean and per-observation silhouette scores.
#[derive(Debug, Clone, Serialize)]
pub struct SilhouetteResult {
    pub mean: f64,
    pub scores: Vec<f64>,
}

/// Silhouette width under simple-matching distance.
///
/// For observation i, `a(i)` is its mean distance to the other members of
/// its cluster and `b(i)` the smallest mean distance to the members of
/// any other (non-empty) cluster; `S(i) = (b − a)/max(a, b)`. Members of
/// singleton clusters score 0, as does the degenerate `a = b = 0` case.
pub fn silhouette_width(model: &KModesModel, ds: &CategoricalDataset) -> Result<SilhouetteResult> {
    if model.k() < 2 {
        return Err(Error::InvalidConfig {
            context: "silhouette requires k >= 2".into(),
        });
    }
    if model.assignment.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "model assigns {} rows, dataset has {}",
                model.assignment.len(),
                ds.n()
            ),
        });
    }
    let rows = ds.rows();
    let n = rows.len();
    let k = model.k();
    let sizes = model.cluster_sizes();

    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let own = model.assignment[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut dist_sum = vec![0usize; k];
            for (jj, row) in rows.iter().enumerate() {
                if jj != i {
                    dist_sum[model.assignment[jj]] += smd(&rows[i], row);
                }
            }
            let a = dist_sum[own] as f64 / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| dist_sum[c] as f64 / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();

    let mean = scores.iter().sum::<f64>() / n as f64;
    Ok(SilhouetteResult { mean, scores })
}

/// One row of a k-sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub cost: usize,
    /// Mean silhouette; reported for k ≥ 2 only.
    pub silhouette: Option<f64>,
}

/// Fit every k in `k_min..=k_max` and tabulate cost and mean silhouette.
/// Each k runs on a seed derived from (seed, k), so the table is
/// deterministic for a given master seed.
pub fn sweep_k(
    ds: &CategoricalDataset,
    k_min: usize,
    k_max: usize,
    n_restarts: usize,
    max_iter: usize,
    seed: u64,
) -> Result<Vec<KSweepRow>> {
    if k_min > k_max {
        return Err(Error::InvalidConfig {
            context: format!("empty k range: {k_min}..={k_max}"),
        });
    }
    if k_min == 0 {
        return Err(Error::InvalidConfig {
            context: "k must be at least 1".into(),
        });
    }
    if k_max > ds.n() {
        return Err(Error::KTooLarge { k: k_max, n: ds.n() });
    }

    (k_min..=k_max)
        .map(|k| {
            let cfg = KModesConfig {
                k,
                max_iter,
                n_restarts,
                seed: rng::derive_seed(seed, k as u64),
            };
            let model = fit_kmodes(ds, &cfg)?;
            let silhouette = if k >= 2 {
                Some(silhouette_width(&model, ds)?.mean)
            } else {
                None
            };
            Ok(KSweepRow {
                k,
                cost: model.cost,
                silhouette,
            })
        })
        .collect()
}

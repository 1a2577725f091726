use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Codebook, FeatureMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansConfig {
    pub max_iters: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub n_init: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-4,
            n_init: 4,
        }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.n_init == 0 || !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid(format!("bad k-means config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
    /// Inertia measured at the start of every Lloyd iteration of the
    /// winning run, followed by the final inertia.
    pub inertia_history: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding and default settings.
pub fn fit_kmeans(features: &FeatureMatrix, k: usize, seed: u64) -> Result<Codebook> {
    fit_kmeans_with(features, k, seed, &KmeansConfig::default())
}

pub fn fit_kmeans_with(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    cfg: &KmeansConfig,
) -> Result<Codebook> {
    cfg.validate()?;
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let n = features.num_frames();
    if n < k {
        return Err(Error::invalid(format!("{n} rows cannot form {k} clusters")));
    }
    let distinct = features
        .rows()
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<u32>>())
        .collect::<HashSet<_>>()
        .len();
    if distinct == 1 {
        return Err(Error::DegenerateData("all feature rows are identical".into()));
    }
    if distinct < k {
        return Err(Error::DegenerateData(format!(
            "only {distinct} distinct rows for {k} clusters"
        )));
    }

    let data = features.rows().mapv(f64::from);
    let mut best: Option<Run> = None;
    for restart in 0..cfg.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let run = lloyd(&data, plus_plus_init(&data, k, &mut rng), cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let meta = TrainingMeta {
        seed,
        iterations: best.iterations,
        inertia: best.inertia,
        inertia_history: best.history,
    };
    Codebook::new(best.centroids.mapv(|v| v as f32), meta)
}

struct Run {
    centroids: Array2<f64>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(data: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut closest: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = closest.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in closest.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, row) in data.rows().into_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(row, data.row(pick)));
        }
    }
    centroids
}

/// Assigns every row to its nearest centroid (lowest index on ties) and
/// returns the labels, per-row squared distances and their sum.
fn assign_all(data: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(data.nrows());
    let mut dists = Vec::with_capacity(data.nrows());
    for row in data.rows() {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(row, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    let inertia = dists.iter().sum();
    (labels, dists, inertia)
}

fn lloyd(data: &Array2<f64>, mut centroids: Array2<f64>, cfg: &KmeansConfig) -> Run {
    let k = centroids.nrows();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let (labels, dists, inertia) = assign_all(data, &centroids);
        history.push(inertia);

        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (row, &l) in data.rows().into_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &row);
            counts[l] += 1;
        }
        let mut updated = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                updated.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }

        // Empty clusters take the rows lying farthest from their centroid.
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..data.nrows()).collect();
            order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
            let mut taken: Vec<usize> = Vec::new();
            let mut candidates = order.into_iter();
            for j in empty {
                for i in candidates.by_ref() {
                    let row = data.row(i);
                    let duplicate = taken.iter().any(|&t| data.row(t) == row)
                        || updated.rows().into_iter().any(|c| c == row);
                    if !duplicate {
                        updated.row_mut(j).assign(&row);
                        taken.push(i);
                        break;
                    }
                }
            }
        }

        let shift = centroids
            .rows()
            .into_iter()
            .zip(updated.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < cfg.tol {
            break;
        }
    }
    let (_, _, inertia) = assign_all(data, &centroids);
    history.push(inertia);
    Run {
        centroids,
        inertia,
        iterations,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::assign;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn features(rows: Array2<f32>) -> FeatureMatrix {
        FeatureMatrix::new(rows).unwrap()
    }

    #[test]
    fn two_clusters_on_a_line() {
        let cb = fit_kmeans(&features(array![[0.0], [1.0], [10.0], [11.0]]), 2, 0).unwrap();
        let mut c: Vec<f32> = cb.centroids().iter().copied().collect();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
        assert!((cb.meta.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_distinct_point() {
        let pts = array![[0.0, 0.0], [3.0, 1.0], [0.0, 0.0], [-2.0, 5.0], [3.0, 1.0]];
        let cb = fit_kmeans(&features(pts), 3, 11).unwrap();
        assert_eq!(cb.meta.inertia, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            fit_kmeans(&features(array![[1.0]]), 2, 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            fit_kmeans(&features(array![[1.0], [1.0], [1.0]]), 2, 0),
            Err(Error::DegenerateData(_))
        ));
        assert!(matches!(
            fit_kmeans(&features(array![[1.0], [2.0]]), 1, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    fn blobs(seed: u64, n: usize, dim: usize) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, dim), |(i, _)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            ((i % 4) as f64 * 3.0 + 0.5 * z) as f32
        })
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..5 {
            let cb = fit_kmeans(&features(blobs(seed, 200, 3)), 6, seed).unwrap();
            for w in cb.meta.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", cb.meta.inertia_history);
            }
        }
    }

    #[test]
    fn converged_centroids_are_a_lloyd_fixed_point() {
        let feats = features(blobs(3, 300, 2));
        let cb = fit_kmeans(&feats, 4, 3).unwrap();
        let labels = assign(&feats, &cb).unwrap().ids;
        for j in 0..cb.k() {
            let members: Vec<_> = labels.iter().enumerate().filter(|(_, &l)| l == j).map(|(i, _)| i).collect();
            assert!(!members.is_empty());
            for d in 0..2 {
                let mean = members.iter().map(|&i| feats.rows()[[i, d]] as f64).sum::<f64>() / members.len() as f64;
                assert!((mean - cb.centroids()[[j, d]] as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let feats = features(blobs(9, 120, 4));
        assert_eq!(fit_kmeans(&feats, 5, 42).unwrap(), fit_kmeans(&feats, 5, 42).unwrap());
    }

    #[test]
    fn centroids_are_distinct() {
        // Heavily duplicated data exercises the empty-cluster repair.
        let mut rows = Array2::zeros((40, 1));
        for i in 0..40 {
            rows[[i, 0]] = if i < 37 { 0.0 } else { i as f32 };
        }
        let cb = fit_kmeans(&features(rows), 4, 1).unwrap();
        let mut c: Vec<f32> = cb.centroids().iter().copied().collect();
        c.sort_by(f32::total_cmp);
        c.dedup();
        assert_eq!(c.len(), 4);
        assert_eq!(cb.meta.inertia, 0.0);
    }
}

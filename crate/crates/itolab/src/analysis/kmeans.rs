//! Lloyd's k-means with k-means++ seeding. Deterministic for a fixed seed:
//! ties break toward the lower index everywhere and the only randomness is
//! the seeding stream.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{ItoError, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub n_iter: usize,
    /// Inertia after each assignment phase, nonincreasing.
    pub inertia_history: Vec<f64>,
    /// Iterations at which an empty cluster was re-seeded with the farthest
    /// point (one entry per re-seed event).
    pub reseeded: Vec<usize>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kmeans(points: &ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let (n, d) = points.dim();
    if n == 0 || d == 0 {
        return Err(ItoError::EmptyInput("no points to cluster".to_string()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(ItoError::NonFinite {
            location: "kmeans points".to_string(),
            detail: "clustering needs finite coordinates".to_string(),
        });
    }
    let distinct: HashSet<Vec<u64>> = points
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    if k == 0 || k > distinct.len() {
        return Err(ItoError::InvalidInput(format!(
            "k must lie in 1..={} (the number of distinct points), got {k}",
            distinct.len()
        )));
    }
    if max_iter == 0 {
        return Err(ItoError::InvalidInput("max_iter must be >= 1".to_string()));
    }

    // k-means++: first center uniform, the rest proportional to the squared
    // distance from the nearest chosen center.
    let mut rng = derive_rng(seed, "kmeans-init", &[]);
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut pick = usize::MAX;
        let mut acc = 0.0;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 {
                acc += w;
                pick = i;
                if u < acc {
                    break;
                }
            }
        }
        // total > 0 is guaranteed by k <= distinct points.
        centers.row_mut(c).assign(&points.row(pick));
        for (i, row) in points.rows().into_iter().enumerate() {
            let dist = sq_dist(row, centers.row(c));
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
    }

    Ok(lloyd(points, centers, max_iter))
}

/// The Lloyd iteration from explicit initial centers. Split out so empty-
/// cluster handling can be driven with adversarial starts.
pub(crate) fn lloyd(points: &ArrayView2<f64>, mut centers: Array2<f64>, max_iter: usize) -> KMeans {
    let (n, d) = points.dim();
    let k = centers.nrows();
    let mut assignments = vec![usize::MAX; n];
    let mut point_d2 = vec![0.0; n];
    let mut inertia_history = Vec::new();
    let mut reseeded = Vec::new();
    let mut n_iter = 0;

    for iter in 0..max_iter {
        n_iter = iter + 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, row) in points.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(row, centers.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignments[i] != best {
                changed = true;
                assignments[i] = best;
            }
            point_d2[i] = best_d;
            inertia += best_d;
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // Re-seed each empty cluster with the farthest point from a cluster
        // that can spare one. Such a donor always exists: an empty cluster
        // means fewer occupied clusters than points.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut pick = usize::MAX;
            let mut far = -1.0;
            for i in 0..n {
                if counts[assignments[i]] >= 2 && point_d2[i] > far {
                    far = point_d2[i];
                    pick = i;
                }
            }
            counts[assignments[pick]] -= 1;
            assignments[pick] = c;
            counts[c] = 1;
            point_d2[pick] = 0.0;
            reseeded.push(iter);
        }

        let mut sums = Array2::zeros((k, d));
        for (i, row) in points.rows().into_iter().enumerate() {
            let mut target = sums.row_mut(assignments[i]);
            target += &row;
        }
        for c in 0..k {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        }
        centers = sums;
    }

    let inertia = *inertia_history.last().expect("at least one iteration");
    KMeans {
        centers,
        assignments,
        inertia,
        n_iter,
        inertia_history,
        reseeded,
    }
}

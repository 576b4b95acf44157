//! Lloyd's k-means with k-means++ seeding, deterministic given a seed.
//! Initializes SPIB state labels from VAMPnet-learned coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ITERS: usize = 300;
const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KMeansInit {
    /// Effective cluster count (may be below the request when there are
    /// fewer distinct points).
    pub k: usize,
    pub requested_k: usize,
    /// `[k * dim]` centroid coordinates.
    pub centroids: Vec<f64>,
    /// Nearest-centroid index per point, ties toward the lower index.
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl KMeansInit {
    pub fn was_reduced(&self) -> bool {
        self.k < self.requested_k
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], k: usize, dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = sq_dist(point, &centroids[c * dim..(c + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Cluster `n` points of dimension `dim` (row-major in `points`).
pub fn kmeans(points: &[f64], n: usize, dim: usize, k: usize, seed: u64) -> Result<KMeansInit> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if points.len() != n * dim || n == 0 {
        return Err(Error::Input(format!(
            "kmeans: {} floats for {n} points of dim {dim}",
            points.len()
        )));
    }
    if n < k {
        return Err(Error::Input(format!("kmeans: {n} points cannot fill {k} clusters")));
    }
    // Count distinct points; fewer distinct points than clusters forces a
    // reduced k.
    let mut distinct: Vec<&[f64]> = Vec::new();
    'outer: for p in 0..n {
        let row = &points[p * dim..(p + 1) * dim];
        for d in &distinct {
            if d.iter().zip(row).all(|(a, b)| a == b) {
                continue 'outer;
            }
        }
        distinct.push(row);
        if distinct.len() >= k {
            break;
        }
    }
    let k_eff = k.min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centroids = vec![0.0; k_eff * dim];
    let first = rng.gen_range(0..n);
    centroids[..dim].copy_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|p| sq_dist(&points[p * dim..(p + 1) * dim], &centroids[..dim]))
        .collect();
    for c in 1..k_eff {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (p, &d) in min_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = p;
                    break;
                }
            }
            pick
        };
        let crow = &points[chosen * dim..(chosen + 1) * dim];
        centroids[c * dim..(c + 1) * dim].copy_from_slice(crow);
        for p in 0..n {
            let d = sq_dist(&points[p * dim..(p + 1) * dim], crow);
            if d < min_d2[p] {
                min_d2[p] = d;
            }
        }
    }

    // Lloyd iterations
    let mut assignments = vec![0usize; n];
    for _ in 0..MAX_ITERS {
        for p in 0..n {
            assignments[p] = nearest(&points[p * dim..(p + 1) * dim], &centroids, k_eff, dim).0;
        }
        let mut sums = vec![0.0; k_eff * dim];
        let mut counts = vec![0usize; k_eff];
        for (p, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for j in 0..dim {
                sums[a * dim + j] += points[p * dim + j];
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k_eff {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let mut shift2 = 0.0;
            for j in 0..dim {
                let new = sums[c * dim + j] / counts[c] as f64;
                let d = new - centroids[c * dim + j];
                shift2 += d * d;
                centroids[c * dim + j] = new;
            }
            max_shift = max_shift.max(shift2.sqrt());
        }
        if max_shift < SHIFT_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for p in 0..n {
        let (a, d) = nearest(&points[p * dim..(p + 1) * dim], &centroids, k_eff, dim);
        assignments[p] = a;
        inertia += d;
    }
    Ok(KMeansInit { k: k_eff, requested_k: k, centroids, assignments, inertia })
}

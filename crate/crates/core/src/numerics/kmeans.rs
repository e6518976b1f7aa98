use serde::{Deserialize, Serialize};

use super::{squared_distance, Matrix, Rng};
use crate::error::{invalid, Result};

pub const DEFAULT_RESTARTS: usize = 8;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Result of a k-means fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    /// Index of the nearest center; lowest index wins ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest_center(&self.centers, x).0
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` by inertia.
pub fn kmeans(x: &Matrix, k: usize, max_iters: usize, restarts: usize, rng: &mut Rng) -> Result<KMeans> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if k > x.rows() {
        return Err(invalid(format!("k = {k} exceeds {} rows", x.rows())));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(x, plus_plus_init(x, k, rng), max_iters.max(1));
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub(crate) fn nearest_center(centers: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.row_iter().enumerate() {
        let d = squared_distance(center, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = x.row_iter().map(|r| squared_distance(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every remaining point coincides with a center.
            rng.below(n)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn lloyd(x: &Matrix, mut centers: Matrix, max_iters: usize) -> KMeans {
    let n = x.rows();
    let k = centers.rows();
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    for iter in 0..max_iters {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, row) in x.row_iter().enumerate() {
            let (c, d) = nearest_center(&centers, row);
            if c != assignments[i] || iter == 0 {
                changed |= c != assignments[i];
                assignments[i] = c;
            }
            inertia += d;
        }
        trace.push(inertia);
        if iter > 0 && !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (i, row) in x.row_iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    // Final assignment against the final centers.
    let mut inertia = 0.0;
    for (i, row) in x.row_iter().enumerate() {
        let (c, d) = nearest_center(&centers, row);
        assignments[i] = c;
        inertia += d;
    }
    if trace.last() != Some(&inertia) {
        trace.push(inertia);
    }
    KMeans {
        centers,
        assignments,
        inertia,
        inertia_trace: trace,
    }
}

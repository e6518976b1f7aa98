use std::collections::BTreeMap;

use super::{kmeans, squared_distance, Matrix, Rng};
use crate::error::{check_dim, invalid, Result};

/// Mean silhouette coefficient of a clustering, Euclidean distance.
///
/// Points in singleton clusters score 0, as do points whose intra- and
/// nearest-cluster mean distances are both zero.
pub fn silhouette(x: &Matrix, assignments: &[usize]) -> Result<f64> {
    check_dim(x.rows(), assignments.len())?;
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignments.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(invalid("silhouette needs at least two nonempty clusters"));
    }
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if members[&own].len() == 1 {
            continue;
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for (&c, idx) in &members {
            let mean = idx
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| squared_distance(x.row(i), x.row(j)).sqrt())
                .sum::<f64>();
            if c == own {
                a = mean / (idx.len() - 1) as f64;
            } else {
                b = b.min(mean / idx.len() as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Runs k-means for each candidate `k` and returns `(k, silhouette)` pairs,
/// best first. Ties keep the smaller `k`.
pub fn rank_k_by_silhouette(
    x: &Matrix,
    candidates: &[usize],
    max_iters: usize,
    restarts: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &k in candidates {
        if k < 2 {
            return Err(invalid("silhouette is undefined for k < 2"));
        }
        let fit = kmeans(x, k, max_iters, restarts, rng)?;
        scored.push((k, silhouette(x, &fit.assignments)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

//! Independent reference implementations used by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use trustkit_core::numerics::{Matrix, Rng};

/// Singular values of `w` from a cyclic Jacobi eigensolve of `W^T W`,
/// largest first.
pub fn singular_values(w: &Matrix) -> Vec<f64> {
    let n = w.cols();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (0..w.rows()).map(|r| w.row(r)[i] * w.row(r)[j]).sum();
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

pub fn rbf_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / 2.0).exp()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

/// Conformal threshold by counting, with the level given in thousandths so
/// the comparison `count / (R + 1) >= 1 - alpha` is done in integers.
pub fn quantile_oracle(scores: &[f64], alpha_milli: u64) -> f64 {
    let r = scores.len() as u64;
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    for s in candidates {
        let count = scores.iter().filter(|&&x| x <= s).count() as u64;
        if count * 1000 >= (r + 1) * (1000 - alpha_milli) {
            return s;
        }
    }
    1.0
}

/// The unique label subset whose members all score within `q_hat` and
/// whose non-members all score above it, found by enumerating subsets.
pub fn set_oracle(probs: &[f64], q_hat: f64) -> Vec<usize> {
    let k = probs.len();
    for mask in 0u32..(1 << k) {
        let inside = |j: usize| mask & (1 << j) != 0;
        if (0..k).all(|j| (1.0 - probs[j] <= q_hat) == inside(j)) {
            return (0..k).filter(|&j| inside(j)).collect();
        }
    }
    unreachable!("exactly one subset matches")
}

/// (single-correct, single-incorrect, abstention, empty).
pub fn breakdown_oracle(cases: &[(Vec<usize>, Option<usize>)]) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (set, label) in cases {
        if set.is_empty() {
            c.3 += 1;
        } else if set.len() >= 2 {
            c.2 += 1;
        } else if Some(set[0]) == *label {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    c
}

/// Max minus min of per-group means, pooling groups smaller than
/// `min_group` into one.
pub fn gap_oracle(values: &[(String, f64)], min_group: usize) -> f64 {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (g, v) in values {
        groups.entry(g.clone()).or_default().push(*v);
    }
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    let mut others = Vec::new();
    for (_, v) in groups {
        if v.len() < min_group {
            others.extend(v);
        } else {
            pooled.push(v);
        }
    }
    if !others.is_empty() {
        pooled.push(others);
    }
    let means: Vec<f64> = pooled.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    means.iter().copied().fold(f64::NEG_INFINITY, f64::max) - means.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn probability_score_oracle(tile_probs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for p in tile_probs {
        let mut best = p[0];
        for &v in &p[1..] {
            if v > best {
                best = v;
            }
        }
        total += best;
    }
    1.0 - total / tile_probs.len() as f64
}

/// Mean of the `delta` smallest values, extracted one minimum at a time.
pub fn uncertainty_score_oracle(values: &[f64], delta: usize) -> f64 {
    let mut left = values.to_vec();
    let m = delta.min(values.len());
    let mut total = 0.0;
    for _ in 0..m {
        let (i, v) = left.iter().copied().enumerate().fold(
            (0, f64::INFINITY),
            |best, (i, v)| if v < best.1 { (i, v) } else { best },
        );
        total += v;
        left.remove(i);
    }
    total / m as f64
}

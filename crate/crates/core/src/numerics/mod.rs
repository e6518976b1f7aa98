//! Seeded numerical kernels shared by the rest of the crate: a dense
//! matrix with Cholesky, power-iteration spectral norms, k-means with
//! silhouette scoring, and ROC/AUROC.
//!
//! Everything here is a pure function of its inputs plus an explicit
//! [`Rng`], so identical seeds reproduce identical bits.

mod kmeans;
mod matrix;
mod rng;
mod roc;
mod silhouette;
mod spectral;

pub(crate) use kmeans::nearest_center;
pub use kmeans::{kmeans, KMeans, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
pub use matrix::{axpy, dot, norm, squared_distance, Cholesky, Matrix};
pub use rng::Rng;
pub use roc::{auroc, roc_pr_curve, RocCurve};
pub use silhouette::{rank_k_by_silhouette, silhouette};
pub use spectral::{apply_spectral_normalization, spectral_norm};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = midranks(a);
    let rb = midranks(b);
    pearson(&ra, &rb)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

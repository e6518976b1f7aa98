//! Elimination of ambiguous tiles, by cluster membership or by an
//! ambiguity-score threshold.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::numerics::{kmeans, nearest_center, Matrix, Rng, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};

/// A cluster counts as ambiguous only when neither class holds at least
/// this share of its tiles.
pub const DEFAULT_DOMINANCE_CUTOFF: f64 = 0.6;
pub const DEFAULT_EAT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EatFilter {
    Cluster {
        centers: Matrix,
        ambiguous_cluster: usize,
        /// Share of the majority class in each cluster.
        dominance: Vec<f64>,
        /// Fraction of fitting tiles that fell in the ambiguous cluster.
        elimination_rate: f64,
    },
    Threshold {
        threshold: f64,
        target_elimination_rate: f64,
    },
}

/// Clusters the tiles and marks the cluster with the lowest label
/// dominance as ambiguous. Dominance ties go to the cluster with the
/// higher mean ambiguity score.
pub fn fit_eat_cluster(
    tiles: &Matrix,
    ambiguity: &[f64],
    labels: &[usize],
    k: usize,
    dominance_cutoff: f64,
    rng: &mut Rng,
) -> Result<EatFilter> {
    check_dim(tiles.rows(), ambiguity.len())?;
    check_dim(tiles.rows(), labels.len())?;
    if k < 2 {
        return Err(invalid("EAT clustering needs k >= 2"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(invalid("EAT dominance is defined for two classes"));
    }
    let fit = kmeans(tiles, k, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS, rng)?;
    let mut counts = vec![[0usize; 2]; k];
    let mut amb_sum = vec![0.0; k];
    for ((&c, &y), &a) in fit.assignments.iter().zip(labels).zip(ambiguity) {
        counts[c][y] += 1;
        amb_sum[c] += a;
    }
    if counts.iter().any(|c| c[0] + c[1] == 0) {
        return Err(invalid("k-means left an empty cluster"));
    }
    let dominance: Vec<f64> = counts
        .iter()
        .map(|c| c[0].max(c[1]) as f64 / (c[0] + c[1]) as f64)
        .collect();
    let mean_amb: Vec<f64> = (0..k)
        .map(|c| amb_sum[c] / (counts[c][0] + counts[c][1]) as f64)
        .collect();
    let mut best = 0;
    for c in 1..k {
        if dominance[c] < dominance[best] || (dominance[c] == dominance[best] && mean_amb[c] > mean_amb[best]) {
            best = c;
        }
    }
    if dominance[best] >= dominance_cutoff {
        return Err(Error::Unattainable(format!(
            "every cluster is dominated by one class (lowest dominance {:.3})",
            dominance[best]
        )));
    }
    let elimination_rate = (counts[best][0] + counts[best][1]) as f64 / tiles.rows() as f64;
    Ok(EatFilter::Cluster {
        centers: fit.centers,
        ambiguous_cluster: best,
        dominance,
        elimination_rate,
    })
}

/// Threshold such that `round(target_rate * n)` of the fitting tiles have
/// ambiguity strictly above it (fewer when scores tie at the cut).
pub fn fit_eat_threshold(ambiguity: &[f64], target_rate: f64) -> Result<EatFilter> {
    if ambiguity.is_empty() {
        return Err(invalid("no tiles to fit a threshold on"));
    }
    if !(0.0..1.0).contains(&target_rate) {
        return Err(invalid(format!(
            "elimination rate must lie in [0, 1), got {target_rate}"
        )));
    }
    let mut sorted = ambiguity.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n_drop = ((target_rate * sorted.len() as f64).round() as usize).min(sorted.len() - 1);
    Ok(EatFilter::Threshold {
        threshold: sorted[n_drop],
        target_elimination_rate: target_rate,
    })
}

/// Indices of the slide's tiles that survive the filter. When every tile
/// would be dropped the least ambiguous one is kept.
pub fn eliminate_tiles(tiles: &Matrix, ambiguity: &[f64], filter: &EatFilter) -> Result<Vec<usize>> {
    check_dim(tiles.rows(), ambiguity.len())?;
    if tiles.rows() == 0 {
        return Err(invalid("slide has no tiles"));
    }
    let keep: Vec<usize> = match filter {
        EatFilter::Cluster {
            centers,
            ambiguous_cluster,
            ..
        } => {
            check_dim(centers.cols(), tiles.cols())?;
            (0..tiles.rows())
                .filter(|&i| nearest_center(centers, tiles.row(i)).0 != *ambiguous_cluster)
                .collect()
        }
        EatFilter::Threshold { threshold, .. } => (0..tiles.rows()).filter(|&i| ambiguity[i] <= *threshold).collect(),
    };
    if keep.is_empty() {
        let mut best = 0;
        for i in 1..ambiguity.len() {
            if ambiguity[i] < ambiguity[best] {
                best = i;
            }
        }
        return Ok(vec![best]);
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_rate_zero_keeps_everything() {
        let amb = [0.1, 0.9, 0.5, 0.5];
        let f = fit_eat_threshold(&amb, 0.0).unwrap();
        let tiles = Matrix::zeros(4, 1);
        assert_eq!(eliminate_tiles(&tiles, &amb, &f).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn threshold_hits_rate() {
        let amb: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let f = fit_eat_threshold(&amb, 0.6).unwrap();
        let kept = eliminate_tiles(&Matrix::zeros(10, 1), &amb, &f).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3]);
        assert!(fit_eat_threshold(&amb, 1.0).is_err());
    }

    #[test]
    fn fallback_keeps_least_ambiguous() {
        let f = EatFilter::Threshold {
            threshold: 0.05,
            target_elimination_rate: 0.5,
        };
        let kept = eliminate_tiles(&Matrix::zeros(3, 1), &[0.4, 0.2, 0.9], &f).unwrap();
        assert_eq!(kept, vec![1]);
        assert!(eliminate_tiles(&Matrix::zeros(0, 1), &[], &f).is_err());
    }

    #[test]
    fn cluster_filter_drops_nearest_ambiguous() {
        let f = EatFilter::Cluster {
            centers: Matrix::new(2, 1, vec![0.0, 10.0]).unwrap(),
            ambiguous_cluster: 1,
            dominance: vec![1.0, 0.5],
            elimination_rate: 0.5,
        };
        let tiles = Matrix::new(4, 1, vec![0.1, 9.0, -1.0, 11.0]).unwrap();
        assert_eq!(eliminate_tiles(&tiles, &[0.0; 4], &f).unwrap(), vec![0, 2]);
    }

    #[test]
    fn pure_blobs_have_no_ambiguous_cluster() {
        let mut rng = Rng::new(2);
        let tiles = Matrix::from_fn(40, 2, |r, _| if r < 20 { 0.0 } else { 10.0 } + 0.1 * rng.normal());
        let labels: Vec<usize> = (0..40).map(|r| usize::from(r >= 20)).collect();
        let err = fit_eat_cluster(
            &tiles,
            &[0.0; 40],
            &labels,
            2,
            DEFAULT_DOMINANCE_CUTOFF,
            &mut Rng::new(0),
        );
        assert!(matches!(err, Err(Error::Unattainable(_))));
    }
}

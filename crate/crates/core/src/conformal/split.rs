use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// A set of class labels, kept sorted and duplicate-free.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredictionSet {
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(mut labels: Vec<usize>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Self { labels }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full(n_classes: usize) -> Self {
        Self {
            labels: (0..n_classes).collect(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `None` stands for an out-of-domain item, which no set covers.
    pub fn covers(&self, label: Option<usize>) -> bool {
        label.is_some_and(|y| self.labels.binary_search(&y).is_ok())
    }

    pub fn singleton(&self) -> Option<usize> {
        match self.labels.as_slice() {
            [y] => Some(*y),
            _ => None,
        }
    }
}

/// Labels joined with `|`, e.g. `0|1`; the empty set prints as nothing.
impl fmt::Display for PredictionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, y) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{y}")?;
        }
        Ok(())
    }
}

pub(crate) fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(invalid("empty probability vector"));
    }
    if probs.iter().any(|p| !(0.0..=1.0 + SIMPLEX_TOL).contains(p)) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// `1 - probs[y]`.
pub fn nonconformity(probs: &[f64], y: usize) -> Result<f64> {
    check_probs(probs)?;
    let p = probs
        .get(y)
        .ok_or_else(|| invalid(format!("label {y} outside {} classes", probs.len())))?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// 1-based rank `ceil((R + 1)(1 - alpha))` of the calibration quantile.
/// May exceed `R`.
pub fn quantile_rank(n_scores: usize, alpha: f64) -> usize {
    let x = (n_scores as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(1.0) as usize
}

/// Split conformal threshold fitted on calibration scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    alpha: f64,
    scores: Vec<f64>,
    q_hat: f64,
}

impl ConformalCalibrator {
    /// Builds from raw nonconformity scores. When the quantile rank exceeds
    /// the number of scores the threshold is 1.0 and every set is full.
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if scores.is_empty() {
            return Err(invalid("empty calibration set"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(invalid("non-finite calibration score"));
        }
        scores.sort_by(f64::total_cmp);
        let rank = quantile_rank(scores.len(), alpha);
        let q_hat = if rank > scores.len() { 1.0 } else { scores[rank - 1] };
        Ok(Self { alpha, scores, q_hat })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Calibration scores in ascending order.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    /// `{k : 1 - probs[k] <= q_hat}`.
    pub fn predict_set(&self, probs: &[f64]) -> PredictionSet {
        threshold_set(probs, self.q_hat)
    }
}

pub(crate) fn threshold_set(probs: &[f64], q_hat: f64) -> PredictionSet {
    PredictionSet {
        labels: (0..probs.len()).filter(|&k| 1.0 - probs[k] <= q_hat).collect(),
    }
}

/// Scores every calibration item at its true label and fits the threshold.
pub fn calibrate<P: AsRef<[f64]>>(probs: &[P], labels: &[usize], alpha: f64) -> Result<ConformalCalibrator> {
    check_dim(probs.len(), labels.len())?;
    let scores = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| nonconformity(p.as_ref(), y))
        .collect::<Result<Vec<_>>>()?;
    ConformalCalibrator::from_scores(scores, alpha)
}

/// Fraction of sets containing their label. Labels may be plain class ids
/// or `Option<usize>` with `None` marking items no set can cover.
pub fn empirical_coverage<L: Copy + Into<Option<usize>>>(sets: &[PredictionSet], labels: &[L]) -> Result<f64> {
    check_dim(sets.len(), labels.len())?;
    if sets.is_empty() {
        return Err(invalid("coverage of an empty sequence"));
    }
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.covers(y.into())).count();
    Ok(hits as f64 / sets.len() as f64)
}

pub fn average_set_size(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(invalid("average size of an empty sequence"));
    }
    Ok(sets.iter().map(PredictionSet::size).sum::<usize>() as f64 / sets.len() as f64)
}

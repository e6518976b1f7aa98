use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::numerics::roc_pr_curve;

/// Number of lowest-uncertainty tiles averaged by the uncertainty score.
pub const DEFAULT_DELTA: usize = 200;

/// `1 - mean_i max_k p_ik` over a patient's tiles.
pub fn ood_score_probability<P: AsRef<[f64]>>(tile_probs: &[P]) -> Result<f64> {
    if tile_probs.is_empty() {
        return Err(invalid("OOD score of zero tiles"));
    }
    let mut total = 0.0;
    for p in tile_probs {
        let p = p.as_ref();
        if p.is_empty() {
            return Err(invalid("empty probability vector"));
        }
        total += p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(1.0 - total / tile_probs.len() as f64)
}

/// Mean of the `min(delta, N)` smallest tile uncertainties.
pub fn ood_score_uncertainty(uncertainties: &[f64], delta: usize) -> Result<f64> {
    if uncertainties.is_empty() {
        return Err(invalid("OOD score of zero tiles"));
    }
    if delta == 0 {
        return Err(invalid("delta must be at least 1"));
    }
    if uncertainties.iter().any(|u| u.is_nan()) {
        return Err(invalid("NaN uncertainty"));
    }
    let mut sorted = uncertainties.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = delta.min(sorted.len());
    Ok(sorted[..m].iter().sum::<f64>() / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodScoreKind {
    Probability,
    Uncertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "target", rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    Fixed(f64),
    TargetTpr(f64),
    TargetFpr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateDecision {
    InDomain,
    Ood,
}

/// Flags a patient as out-of-domain when its score exceeds the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodGate {
    pub score_kind: OodScoreKind,
    pub delta: usize,
    pub threshold: f64,
    pub policy: ThresholdPolicy,
}

impl OodGate {
    pub fn fixed(score_kind: OodScoreKind, delta: usize, threshold: f64) -> Result<Self> {
        if threshold.is_nan() {
            return Err(invalid("threshold is NaN"));
        }
        if delta == 0 {
            return Err(invalid("delta must be at least 1"));
        }
        Ok(Self {
            score_kind,
            delta,
            threshold,
            policy: ThresholdPolicy::Fixed(threshold),
        })
    }

    /// Derives the threshold from a labelled tuning stream (`is_ood` true
    /// for out-of-domain items). `TargetTpr(t)` picks the highest cut whose
    /// detection rate reaches `t`; `TargetFpr(f)` picks the lowest cut whose
    /// false alarm rate stays within `f`. The stored threshold lies halfway
    /// between the chosen score and the next lower one, so the strict
    /// `score > threshold` rule reproduces the chosen operating point.
    pub fn tune(
        score_kind: OodScoreKind,
        delta: usize,
        policy: ThresholdPolicy,
        scores: &[f64],
        is_ood: &[bool],
    ) -> Result<Self> {
        let threshold = match policy {
            ThresholdPolicy::Fixed(t) => return Self::fixed(score_kind, delta, t),
            ThresholdPolicy::TargetTpr(t) | ThresholdPolicy::TargetFpr(t) if !(0.0..=1.0).contains(&t) => {
                return Err(Error::Unattainable(format!("rate target {t} outside [0, 1]")));
            }
            ThresholdPolicy::TargetTpr(t) => {
                check_dim(scores.len(), is_ood.len())?;
                let curve = roc_pr_curve(scores, is_ood)?;
                let i = curve.tpr.iter().position(|&v| v >= t).expect("tpr reaches 1");
                cut_below(&curve.thresholds, i)
            }
            ThresholdPolicy::TargetFpr(f) => {
                check_dim(scores.len(), is_ood.len())?;
                let curve = roc_pr_curve(scores, is_ood)?;
                let i = curve.fpr.iter().rposition(|&v| v <= f).expect("fpr starts at 0");
                cut_below(&curve.thresholds, i)
            }
        };
        let mut gate = Self::fixed(score_kind, delta, threshold)?;
        gate.policy = policy;
        Ok(gate)
    }

    pub fn decide(&self, score: f64) -> GateDecision {
        if score > self.threshold {
            GateDecision::Ood
        } else {
            GateDecision::InDomain
        }
    }
}

/// Threshold for the strict rule equivalent to `score >= thresholds[i]`.
fn cut_below(thresholds: &[f64], i: usize) -> f64 {
    if i == 0 {
        return thresholds.get(1).copied().unwrap_or(f64::INFINITY);
    }
    match thresholds.get(i + 1) {
        Some(next) => (thresholds[i] + next) / 2.0,
        None => thresholds[i] - 1.0,
    }
}

use serde::{Deserialize, Serialize};

use super::split::{check_probs, PredictionSet};
use crate::error::{check_dim, invalid, Error, Result};

/// Default resolution of the threshold search.
pub const DEFAULT_TOL: f64 = 1e-4;

/// `{k : probs[k] >= 1 - rho}`.
pub fn crc_set(probs: &[f64], rho: f64) -> PredictionSet {
    let cut = 1.0 - rho;
    PredictionSet::new((0..probs.len()).filter(|&k| probs[k] >= cut).collect())
}

/// Conformal risk control threshold fitted on a calibration stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrcController {
    pub rho_hat: f64,
    pub alpha: f64,
    pub search_tol: f64,
}

impl CrcController {
    pub fn predict_set(&self, probs: &[f64]) -> PredictionSet {
        crc_set(probs, self.rho_hat)
    }
}

/// Miscoverage indicator `1[y not in set]`; `None` is never covered.
pub fn miscoverage(set: &PredictionSet, label: Option<usize>) -> f64 {
    if set.covers(label) {
        0.0
    } else {
        1.0
    }
}

/// Fits with the miscoverage loss.
pub fn crc_fit<P: AsRef<[f64]>>(probs: &[P], labels: &[Option<usize>], alpha: f64, tol: f64) -> Result<CrcController> {
    crc_fit_with_loss(probs, labels, alpha, tol, miscoverage)
}

/// Smallest `rho = m * tol` on the grid whose mean calibration loss is at
/// most `alpha`. `loss` must be bounded and non-increasing as the set grows;
/// the search relies on that monotonicity.
pub fn crc_fit_with_loss<P, F>(
    probs: &[P],
    labels: &[Option<usize>],
    alpha: f64,
    tol: f64,
    loss: F,
) -> Result<CrcController>
where
    P: AsRef<[f64]>,
    F: Fn(&PredictionSet, Option<usize>) -> f64,
{
    check_dim(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(invalid("empty calibration stream"));
    }
    if !(tol > 0.0 && tol <= 1.0) {
        return Err(invalid(format!("search tolerance must lie in (0, 1], got {tol}")));
    }
    if alpha.is_nan() {
        return Err(invalid("alpha is NaN"));
    }
    for p in probs {
        check_probs(p.as_ref())?;
    }
    let steps = (1.0 / tol).round() as u64;
    let rho_at = |m: u64| if m >= steps { 1.0 } else { m as f64 * tol };
    let risk = |m: u64| {
        let rho = rho_at(m);
        probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| loss(&crc_set(p.as_ref(), rho), y))
            .sum::<f64>()
            / probs.len() as f64
    };

    let top = risk(steps);
    if top > alpha {
        return Err(Error::Unattainable(format!(
            "risk {top} at rho = 1 exceeds alpha = {alpha}"
        )));
    }
    let (mut lo, mut hi) = (0u64, steps);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if risk(mid) <= alpha {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(CrcController {
        rho_hat: rho_at(lo),
        alpha,
        search_tol: tol,
    })
}

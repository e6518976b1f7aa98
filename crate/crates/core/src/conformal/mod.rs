//! Split conformal prediction and conformal risk control over class
//! probabilities.

mod crc;
mod records;
mod split;

use serde::{Deserialize, Serialize};

pub use crc::{crc_fit, crc_fit_with_loss, crc_set, miscoverage, CrcController, DEFAULT_TOL};
pub use records::{read_calibration_records, write_calibration_records, CalibrationRecord};
pub use split::{
    average_set_size, calibrate, empirical_coverage, nonconformity, quantile_rank, ConformalCalibrator, PredictionSet,
};

use crate::error::Result;

/// Significance levels evaluated by default.
pub const DEFAULT_ALPHAS: [f64; 3] = [0.1, 0.05, 0.01];

/// Coverage and efficiency of one batch of prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub alpha: f64,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub empty_rate: f64,
}

impl SetMetrics {
    pub fn compute<L: Copy + Into<Option<usize>>>(alpha: f64, sets: &[PredictionSet], labels: &[L]) -> Result<Self> {
        let coverage = empirical_coverage(sets, labels)?;
        let avg_set_size = average_set_size(sets)?;
        let empty_rate = sets.iter().filter(|s| s.is_empty()).count() as f64 / sets.len() as f64;
        Ok(Self {
            alpha,
            coverage,
            avg_set_size,
            empty_rate,
        })
    }
}

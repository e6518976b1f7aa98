use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Rng;

/// Default number of calibration patients per resplit.
pub const DEFAULT_CAL_SIZE: usize = 100;
pub const DEFAULT_MODELS: usize = 20;
pub const DEFAULT_RESPLITS: usize = 500;

/// Patient-level partition fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub caltest: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.15,
            caltest: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.caltest];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(invalid("split ratios must lie in [0, 1]"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// One calibration/test draw from the caltest pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resplit {
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub caltest: Vec<String>,
    pub resplits: Vec<Resplit>,
    /// One seed per independently trained model.
    pub model_seeds: Vec<u64>,
}

/// Shuffles patients into train/val/caltest (sizes rounded from the
/// ratios, caltest takes the remainder), then draws `n_resplits`
/// calibration sets of `cal_size` from the caltest pool with the rest as
/// test.
pub fn make_split_plan<S: AsRef<str>>(
    patient_ids: &[S],
    ratios: SplitRatios,
    n_models: usize,
    n_resplits: usize,
    cal_size: usize,
    rng: &mut Rng,
) -> Result<SplitPlan> {
    ratios.validate()?;
    let mut ids: Vec<String> = patient_ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    let before = ids.len();
    ids.dedup();
    if ids.len() != before {
        return Err(invalid("duplicate patient ids"));
    }
    let n = ids.len();
    let n_train = (ratios.train * n as f64).round() as usize;
    let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
    let pool = n - n_train - n_val;
    if cal_size == 0 || cal_size >= pool {
        return Err(invalid(format!(
            "calibration size {cal_size} must be positive and leave test patients in a pool of {pool}"
        )));
    }
    rng.shuffle(&mut ids);
    let caltest = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    let train = ids;

    let resplits = (0..n_resplits)
        .map(|_| {
            let mut order = caltest.clone();
            rng.shuffle(&mut order);
            let test = order.split_off(cal_size);
            Resplit {
                calibration: order,
                test,
            }
        })
        .collect();
    let model_seeds = (0..n_models).map(|_| rng.next_seed()).collect();
    Ok(SplitPlan {
        train,
        val,
        caltest,
        resplits,
        model_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn default_sizes() {
        let plan = make_split_plan(&ids(100), SplitRatios::default(), 20, 5, 10, &mut Rng::new(1)).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.caltest.len()), (65, 15, 20));
        assert_eq!(plan.model_seeds.len(), 20);
        let all: HashSet<_> = plan.train.iter().chain(&plan.val).chain(&plan.caltest).collect();
        assert_eq!(all.len(), 100);
        for r in &plan.resplits {
            assert_eq!(r.calibration.len(), 10);
            assert_eq!(r.test.len(), 10);
            let cal: HashSet<_> = r.calibration.iter().collect();
            assert!(r.test.iter().all(|t| !cal.contains(t) && plan.caltest.contains(t)));
        }
    }

    #[test]
    fn deterministic() {
        let a = make_split_plan(&ids(50), SplitRatios::default(), 3, 4, 5, &mut Rng::new(7)).unwrap();
        let b = make_split_plan(&ids(50), SplitRatios::default(), 3, 4, 5, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_ratios_and_sizes() {
        let bad = SplitRatios {
            train: 0.7,
            val: 0.2,
            caltest: 0.2,
        };
        assert!(make_split_plan(&ids(100), bad, 1, 1, 5, &mut Rng::new(0)).is_err());
        assert!(make_split_plan(&ids(100), SplitRatios::default(), 1, 1, 20, &mut Rng::new(0)).is_err());
        assert!(make_split_plan(&ids(100), SplitRatios::default(), 1, 1, 0, &mut Rng::new(0)).is_err());
    }
}

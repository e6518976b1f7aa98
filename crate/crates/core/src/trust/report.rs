use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::aggregate::PatientRecord;
use super::ood::OodScoreKind;
use crate::conformal::{PredictionSet, SetMetrics};
use crate::error::{invalid, Result};
use crate::numerics::argmax;

/// Groups smaller than this are pooled into `Others`.
pub const DEFAULT_MIN_GROUP: usize = 20;
pub const OTHERS_GROUP: &str = "Others";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Breakdown {
    SingleCorrect,
    SingleIncorrect,
    Abstention,
    Empty,
}

impl Breakdown {
    /// Sets with two or more labels are abstentions; a singleton is never
    /// correct for an out-of-domain patient.
    pub fn classify(set: &PredictionSet, label: Option<usize>) -> Self {
        match (set.size(), set.singleton()) {
            (0, _) => Self::Empty,
            (_, Some(y)) if Some(y) == label => Self::SingleCorrect,
            (_, Some(_)) => Self::SingleIncorrect,
            _ => Self::Abstention,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SingleCorrect => "single-correct",
            Self::SingleIncorrect => "single-incorrect",
            Self::Abstention => "abstention",
            Self::Empty => "empty",
        }
    }
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownCounts {
    pub single_correct: usize,
    pub single_incorrect: usize,
    pub abstention: usize,
    pub empty: usize,
}

impl BreakdownCounts {
    pub fn total(&self) -> usize {
        self.single_correct + self.single_incorrect + self.abstention + self.empty
    }

    /// Wrong singletons among all singletons; `None` without singletons.
    pub fn da_error_rate(&self) -> Option<f64> {
        let singles = self.single_correct + self.single_incorrect;
        (singles > 0).then(|| self.single_incorrect as f64 / singles as f64)
    }
}

fn set_of(r: &PatientRecord) -> Result<&PredictionSet> {
    r.set
        .as_ref()
        .ok_or_else(|| invalid(format!("patient {} has no prediction set", r.patient_id)))
}

pub fn breakdown(records: &[PatientRecord]) -> Result<BreakdownCounts> {
    let mut c = BreakdownCounts::default();
    for r in records {
        match Breakdown::classify(set_of(r)?, r.label) {
            Breakdown::SingleCorrect => c.single_correct += 1,
            Breakdown::SingleIncorrect => c.single_incorrect += 1,
            Breakdown::Abstention => c.abstention += 1,
            Breakdown::Empty => c.empty += 1,
        }
    }
    Ok(c)
}

pub fn da_error_rate(records: &[PatientRecord]) -> Result<Option<f64>> {
    Ok(breakdown(records)?.da_error_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessMetric {
    /// Top-class accuracy of the patient probabilities.
    Accuracy,
    AvgSetSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupField {
    Sex,
    RaceGroup,
}

impl GroupField {
    fn of(self, r: &PatientRecord) -> &str {
        match self {
            Self::Sex => &r.sex,
            Self::RaceGroup => &r.race_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessGap {
    pub gap: f64,
    /// Group name to (size, metric value), after pooling small groups.
    pub groups: BTreeMap<String, (usize, f64)>,
}

/// Largest minus smallest per-group metric. Out-of-domain patients are
/// skipped for accuracy.
pub fn fairness_gap(
    records: &[PatientRecord],
    metric: FairnessMetric,
    field: GroupField,
    min_group: usize,
) -> Result<FairnessGap> {
    let eligible: Vec<&PatientRecord> = records
        .iter()
        .filter(|r| metric != FairnessMetric::Accuracy || r.label.is_some())
        .collect();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &eligible {
        *sizes.entry(field.of(r)).or_default() += 1;
    }
    let group_name = |r: &PatientRecord| -> String {
        let g = field.of(r);
        if sizes[g] < min_group {
            OTHERS_GROUP.to_string()
        } else {
            g.to_string()
        }
    };
    let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in &eligible {
        let value = match metric {
            FairnessMetric::Accuracy => f64::from(u8::from(Some(argmax(&r.probs)) == r.label)),
            FairnessMetric::AvgSetSize => set_of(r)?.size() as f64,
        };
        let e = sums.entry(group_name(r)).or_default();
        e.0 += 1;
        e.1 += value;
    }
    if sums.len() < 2 {
        return Err(invalid("fairness gap needs at least two groups after pooling"));
    }
    let groups: BTreeMap<String, (usize, f64)> = sums.into_iter().map(|(g, (n, s))| (g, (n, s / n as f64))).collect();
    let hi = groups.values().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = groups.values().map(|v| v.1).fold(f64::INFINITY, f64::min);
    Ok(FairnessGap { gap: hi - lo, groups })
}

/// Results at one significance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub alpha: f64,
    pub q_hat: f64,
    pub n_patients: usize,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub empty_rate: f64,
    pub breakdown: BreakdownCounts,
    pub da_error_rate: Option<f64>,
    /// Keyed `metric/field`; absent when fewer than two groups remain.
    pub fairness: BTreeMap<String, Option<f64>>,
}

impl AlphaReport {
    /// Summarizes records whose `set` fields were filled at this level.
    pub fn compute(alpha: f64, q_hat: f64, records: &[PatientRecord]) -> Result<Self> {
        let sets: Vec<PredictionSet> = records.iter().map(|r| set_of(r).cloned()).collect::<Result<_>>()?;
        let labels: Vec<Option<usize>> = records.iter().map(|r| r.label).collect();
        let m = SetMetrics::compute(alpha, &sets, &labels)?;
        let counts = breakdown(records)?;
        let mut fairness = BTreeMap::new();
        for metric in [FairnessMetric::Accuracy, FairnessMetric::AvgSetSize] {
            for field in [GroupField::Sex, GroupField::RaceGroup] {
                let key = format!(
                    "{}/{}",
                    serde_json::to_value(metric)?.as_str().unwrap(),
                    serde_json::to_value(field)?.as_str().unwrap()
                );
                let gap = fairness_gap(records, metric, field, DEFAULT_MIN_GROUP)
                    .ok()
                    .map(|g| g.gap);
                fairness.insert(key, gap);
            }
        }
        Ok(Self {
            alpha,
            q_hat,
            n_patients: records.len(),
            coverage: m.coverage,
            avg_set_size: m.avg_set_size,
            empty_rate: m.empty_rate,
            breakdown: counts,
            da_error_rate: counts.da_error_rate(),
            fairness,
        })
    }
}

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub schema: u32,
    pub ood_score_kind: OodScoreKind,
    pub alphas: Vec<AlphaReport>,
}

/// Writes `patient_id,set,score_ood,breakdown,group_sex,group_race`, one
/// row per record in the given order. Sets print as `0|1`.
pub fn write_patient_csv<W: Write>(out: W, records: &[PatientRecord], kind: OodScoreKind) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "set", "score_ood", "breakdown", "group_sex", "group_race"])?;
    for r in records {
        let set = set_of(r)?;
        w.write_record([
            r.patient_id.as_str(),
            &set.to_string(),
            &r.ood_score(kind).to_string(),
            Breakdown::classify(set, r.label).as_str(),
            &r.sex,
            &r.race_group,
        ])?;
    }
    w.flush()?;
    Ok(())
}

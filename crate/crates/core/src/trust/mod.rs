//! Trust layer around the classifier and calibrator: tile ambiguity and
//! elimination, OOD scores and gating, patient aggregation, outcome
//! breakdowns and subgroup gaps.

mod aggregate;
mod ambiguity;
mod eat;
mod ood;
mod report;

pub use aggregate::{aggregate, dsc_filter, patient_records, DscOutcome, PatientProbs, PatientRecord};
pub use ambiguity::{ambiguity_score, AmbiguityModel, LogisticProxy};
pub use eat::{
    eliminate_tiles, fit_eat_cluster, fit_eat_threshold, EatFilter, DEFAULT_DOMINANCE_CUTOFF, DEFAULT_EAT_K,
};
pub use ood::{
    ood_score_probability, ood_score_uncertainty, GateDecision, OodGate, OodScoreKind, ThresholdPolicy, DEFAULT_DELTA,
};
pub use report::{
    breakdown, da_error_rate, fairness_gap, write_patient_csv, AlphaReport, Breakdown, BreakdownCounts, FairnessGap,
    FairnessMetric, GroupField, TrustReport, DEFAULT_MIN_GROUP, OTHERS_GROUP, REPORT_SCHEMA,
};

//! End-to-end experiments over synthetic cohorts: training heads on
//! patient splits, patient-level conformal coverage over repeated
//! resplits, OOD contamination with gating and risk control, and tile
//! elimination.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    average_set_size, calibrate, crc_fit, empirical_coverage, CrcController, PredictionSet, DEFAULT_TOL,
};
use crate::data::{
    gen_eat_scenario, gen_ind_scenario, gen_ood_patients, make_split_plan, EatBlob, Scenario, ScenarioConfig,
    SplitRatios,
};
use crate::error::{invalid, Error, Result};
use crate::numerics::{argmax, Rng};
use crate::sngp::{fit_head, FitReport, RffProjection, SnMlpConfig, SngpHead, TrainConfig};
use crate::trust::{
    ambiguity_score, breakdown, eliminate_tiles, fit_eat_cluster, patient_records, EatFilter, GateDecision, OodGate,
    OodScoreKind, PatientRecord, ThresholdPolicy, DEFAULT_DELTA, DEFAULT_DOMINANCE_CUTOFF, DEFAULT_EAT_K,
};

/// Head architecture and training schedule. The input width comes from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub spectral_cap: f64,
    pub power_iters: usize,
    pub rff_dim: usize,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            spectral_cap: 1.0,
            power_iters: 100,
            rff_dim: 1024,
            train: TrainConfig::desk(),
        }
    }
}

impl ModelConfig {
    pub fn mlp_config(&self, input_dim: usize) -> SnMlpConfig {
        let mut layer_dims = vec![input_dim];
        layer_dims.extend(&self.hidden);
        SnMlpConfig {
            layer_dims,
            spectral_cap: self.spectral_cap,
            power_iters: self.power_iters,
            activation: Default::default(),
        }
    }
}

/// Trains a head on every in-domain tile of `data`, labelled by its
/// patient's class.
pub fn train_head(data: &Scenario, model: &ModelConfig, seed: u64) -> Result<(SngpHead, FitReport)> {
    let labels = data
        .manifest
        .tiles()
        .iter()
        .map(|t| {
            t.label
                .ok_or_else(|| invalid(format!("training tile {} is out-of-domain", t.tile_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mlp = model.mlp_config(data.embeddings.cols());
    let rff = RffProjection::new(mlp.output_dim(), model.rff_dim, &mut Rng::with_stream(seed, 5))?;
    let train = TrainConfig {
        seed,
        ..model.train.clone()
    };
    fit_head(&data.embeddings, &labels, n_classes, &mlp, rff, &train)
}

/// Patient records with OOD scores for every patient of `data`.
pub fn score_patients(
    head: &SngpHead,
    data: &Scenario,
    keep: Option<&[bool]>,
    delta: usize,
) -> Result<Vec<PatientRecord>> {
    let pred = head.predict_batch(&data.embeddings)?;
    patient_records(&data.manifest, &pred.probs, &pred.uncertainty, keep, delta)
}

fn pick<'a>(records: &'a [PatientRecord], ids: &[String]) -> Vec<&'a PatientRecord> {
    ids.iter()
        .map(|id| {
            let i = records
                .binary_search_by(|r| r.patient_id.as_str().cmp(id))
                .expect("split ids come from the same cohort");
            &records[i]
        })
        .collect()
}

/// Split-conformal sets at level `alpha`, calibrated on `cal` and applied
/// to `test`. Returns the calibrated threshold and the test records with
/// sets filled in.
pub fn conformal_sets(
    cal: &[&PatientRecord],
    test: &[&PatientRecord],
    alpha: f64,
) -> Result<(f64, Vec<PatientRecord>)> {
    let probs: Vec<&[f64]> = cal.iter().map(|r| r.probs.as_slice()).collect();
    let labels = cal
        .iter()
        .map(|r| r.label.ok_or_else(|| invalid("calibration patient without a label")))
        .collect::<Result<Vec<_>>>()?;
    let c = calibrate(&probs, &labels, alpha)?;
    let out = test
        .iter()
        .map(|r| PatientRecord {
            set: Some(c.predict_set(&r.probs)),
            ..(*r).clone()
        })
        .collect();
    Ok((c.q_hat(), out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageExperiment {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub ratios: SplitRatios,
    pub n_seeds: usize,
    pub n_resplits: usize,
    pub cal_size: usize,
    pub alphas: Vec<f64>,
}

/// Means over every (seed, resplit) pair at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub alpha: f64,
    pub mean_coverage: f64,
    pub mean_set_size: f64,
    /// Mean over the resplits where at least one singleton occurred.
    pub mean_da_error_rate: Option<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub summaries: Vec<CoverageSummary>,
    /// Final training accuracy of each seed's head.
    pub train_accuracy: Vec<f64>,
}

struct RunStats {
    coverage: f64,
    size: f64,
    da: Option<f64>,
}

/// For each seed: generate a cohort, split it by patient, train a head,
/// then calibrate and test on every resplit of the caltest pool.
pub fn run_coverage_experiment(exp: &CoverageExperiment) -> Result<CoverageResult> {
    let per_seed = (0..exp.n_seeds)
        .into_par_iter()
        .map(|s| -> Result<(Vec<Vec<RunStats>>, f64)> {
            let seed = exp.scenario.seed.wrapping_add(s as u64);
            let cohort = gen_ind_scenario(&ScenarioConfig {
                seed,
                ..exp.scenario.clone()
            })?;
            let mut rng = Rng::with_stream(seed, 20);
            let plan = make_split_plan(
                &cohort.manifest.patient_ids(),
                exp.ratios,
                1,
                exp.n_resplits,
                exp.cal_size,
                &mut rng,
            )?;
            let (head, report) = train_head(&cohort.select_patients(&plan.train), &exp.model, plan.model_seeds[0])?;
            let pool = cohort.select_patients(&plan.caltest);
            let records = score_patients(&head, &pool, None, DEFAULT_DELTA)?;
            let mut stats: Vec<Vec<RunStats>> = exp.alphas.iter().map(|_| Vec::new()).collect();
            for split in &plan.resplits {
                let cal = pick(&records, &split.calibration);
                let test = pick(&records, &split.test);
                for (a, &alpha) in exp.alphas.iter().enumerate() {
                    let (_, sets) = conformal_sets(&cal, &test, alpha)?;
                    let s: Vec<PredictionSet> = sets.iter().map(|r| r.set.clone().unwrap()).collect();
                    let labels: Vec<Option<usize>> = sets.iter().map(|r| r.label).collect();
                    stats[a].push(RunStats {
                        coverage: empirical_coverage(&s, &labels)?,
                        size: average_set_size(&s)?,
                        da: breakdown(&sets)?.da_error_rate(),
                    });
                }
            }
            Ok((stats, report.train_accuracy))
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries = exp
        .alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let runs: Vec<&RunStats> = per_seed.iter().flat_map(|(s, _)| s[a].iter()).collect();
            let n = runs.len() as f64;
            let das: Vec<f64> = runs.iter().filter_map(|r| r.da).collect();
            CoverageSummary {
                alpha,
                mean_coverage: runs.iter().map(|r| r.coverage).sum::<f64>() / n,
                mean_set_size: runs.iter().map(|r| r.size).sum::<f64>() / n,
                mean_da_error_rate: (!das.is_empty()).then(|| das.iter().sum::<f64>() / das.len() as f64),
                n_runs: runs.len(),
            }
        })
        .collect();
    Ok(CoverageResult {
        summaries,
        train_accuracy: per_seed.iter().map(|(_, acc)| *acc).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodExperiment {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    /// Split of the in-domain cohort; validation patients tune the gate.
    pub ratios: SplitRatios,
    /// OOD-to-in-domain patient ratios in the calibration/test pool.
    pub ood_ratios: Vec<f64>,
    pub alpha: f64,
    pub n_seeds: usize,
    pub n_resplits: usize,
    /// In-domain calibration patients per resplit; OOD patients join the
    /// calibration side at the same rate.
    pub cal_size: usize,
    pub score_kind: OodScoreKind,
    pub delta: usize,
    pub gate_policy: ThresholdPolicy,
    /// OOD patients reserved for tuning the gate.
    pub n_tune_ood: usize,
}

/// Means over seeds and resplits at one contamination ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRatioSummary {
    pub ratio: f64,
    pub ungated_coverage: f64,
    pub gated_coverage: f64,
    pub gated_crc_coverage: f64,
    pub rho_hat: f64,
    pub ungated_set_size: f64,
    pub gated_crc_set_size: f64,
    /// Share of test OOD patients flagged by the gate; 1 when there are
    /// none.
    pub gate_tpr: f64,
    /// Share of test in-domain patients flagged by the gate.
    pub gate_fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub summaries: Vec<OodRatioSummary>,
    pub thresholds: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn coverage_of(records: &[&PatientRecord], set: impl Fn(&[f64]) -> PredictionSet) -> (f64, f64) {
    if records.is_empty() {
        return (1.0, 0.0);
    }
    let n = records.len() as f64;
    let mut hits = 0usize;
    let mut size = 0usize;
    for r in records {
        let s = set(&r.probs);
        hits += usize::from(s.covers(r.label));
        size += s.size();
    }
    (hits as f64 / n, size as f64 / n)
}

/// Contaminates the calibration/test pool with growing numbers of OOD
/// patients and compares plain conformal sets, gated conformal sets and
/// gated sets under conformal risk control.
///
/// OOD cohorts are nested across ratios, each OOD patient keeps the same
/// calibration/test side across ratios within a resplit, and the gate is
/// tuned once per seed, so the fitted risk threshold can only grow with
/// the ratio. When leaked OOD patients make the target unattainable the
/// controller falls back to full sets.
pub fn simulate_ood(exp: &OodExperiment) -> Result<OodResult> {
    let max_ratio = exp.ood_ratios.iter().copied().fold(0.0, f64::max);
    if exp.ood_ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(invalid("OOD ratios must be nonnegative"));
    }
    let per_seed = (0..exp.n_seeds)
        .into_par_iter()
        .map(|s| -> Result<(Vec<[f64; 8]>, f64)> {
            let seed = exp.scenario.seed.wrapping_add(s as u64);
            let cfg = ScenarioConfig {
                seed,
                ..exp.scenario.clone()
            };
            let cohort = gen_ind_scenario(&cfg)?;
            let mut rng = Rng::with_stream(seed, 21);
            let plan = make_split_plan(
                &cohort.manifest.patient_ids(),
                exp.ratios,
                1,
                exp.n_resplits,
                exp.cal_size,
                &mut rng,
            )?;
            if plan.val.is_empty() {
                return Err(invalid("gate tuning needs validation patients"));
            }
            let n_pool = plan.caltest.len();
            let n_ood_max = (max_ratio * n_pool as f64).round() as usize;
            let ood_all = gen_ood_patients(&cfg, exp.n_tune_ood + n_ood_max)?;
            let ood_ids = ood_all.manifest.patient_ids();
            let (tune_ids, pool_ids) = ood_ids.split_at(exp.n_tune_ood);

            let (head, _) = train_head(&cohort.select_patients(&plan.train), &exp.model, plan.model_seeds[0])?;
            let ind_records = score_patients(&head, &cohort.select_patients(&plan.caltest), None, exp.delta)?;
            let val_records = score_patients(&head, &cohort.select_patients(&plan.val), None, exp.delta)?;
            let ood_records = score_patients(&head, &ood_all, None, exp.delta)?;

            let tune: Vec<&PatientRecord> = val_records.iter().chain(pick(&ood_records, tune_ids)).collect();
            let scores: Vec<f64> = tune.iter().map(|r| r.ood_score(exp.score_kind)).collect();
            let is_ood: Vec<bool> = tune.iter().map(|r| r.is_ood()).collect();
            let gate = OodGate::tune(exp.score_kind, exp.delta, exp.gate_policy, &scores, &is_ood)?;
            let passes = |r: &&PatientRecord| gate.decide(r.ood_score(exp.score_kind)) == GateDecision::InDomain;

            let cal_frac = exp.cal_size as f64 / n_pool as f64;
            let mut acc = vec![[0.0; 8]; exp.ood_ratios.len()];
            for split in &plan.resplits {
                let cal_ind = pick(&ind_records, &split.calibration);
                let test_ind = pick(&ind_records, &split.test);
                let ood_side: Vec<bool> = pool_ids.iter().map(|_| rng.bernoulli(cal_frac)).collect();
                let cal_probs: Vec<&[f64]> = cal_ind.iter().map(|r| r.probs.as_slice()).collect();
                let cal_labels: Vec<usize> = cal_ind.iter().map(|r| r.label.unwrap()).collect();
                let cp = calibrate(&cal_probs, &cal_labels, exp.alpha)?;

                for (k, &ratio) in exp.ood_ratios.iter().enumerate() {
                    let n_ood = (ratio * n_pool as f64).round() as usize;
                    let ood = pick(&ood_records, &pool_ids[..n_ood]);
                    let mut cal = cal_ind.clone();
                    let mut test = test_ind.clone();
                    for (r, &to_cal) in ood.iter().zip(&ood_side) {
                        if to_cal {
                            cal.push(r);
                        } else {
                            test.push(r);
                        }
                    }
                    let gated_cal: Vec<&PatientRecord> = cal.iter().copied().filter(passes).collect();
                    let gated_test: Vec<&PatientRecord> = test.iter().copied().filter(passes).collect();

                    let (ungated, ungated_size) = coverage_of(&test, |p| cp.predict_set(p));
                    let (gated, _) = coverage_of(&gated_test, |p| cp.predict_set(p));
                    let probs: Vec<&[f64]> = gated_cal.iter().map(|r| r.probs.as_slice()).collect();
                    let labels: Vec<Option<usize>> = gated_cal.iter().map(|r| r.label).collect();
                    let crc = match crc_fit(&probs, &labels, exp.alpha, DEFAULT_TOL) {
                        Err(Error::Unattainable(_)) => CrcController {
                            rho_hat: 1.0,
                            alpha: exp.alpha,
                            search_tol: DEFAULT_TOL,
                        },
                        other => other?,
                    };
                    let (gated_crc, crc_size) = coverage_of(&gated_test, |p| crc.predict_set(p));

                    let test_ood: Vec<&&PatientRecord> = test.iter().filter(|r| r.is_ood()).collect();
                    let test_ind_n = test.len() - test_ood.len();
                    let flagged_ood = test_ood.iter().filter(|r| !passes(r)).count();
                    let flagged_ind = test.iter().filter(|r| !r.is_ood() && !passes(r)).count();
                    let tpr = if test_ood.is_empty() {
                        1.0
                    } else {
                        flagged_ood as f64 / test_ood.len() as f64
                    };
                    let fpr = flagged_ind as f64 / test_ind_n as f64;
                    let row = [ungated, gated, gated_crc, crc.rho_hat, ungated_size, crc_size, tpr, fpr];
                    for (a, v) in acc[k].iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            let n = plan.resplits.len() as f64;
            acc.iter_mut().flatten().for_each(|a| *a /= n);
            Ok((acc, gate.threshold))
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries = exp
        .ood_ratios
        .iter()
        .enumerate()
        .map(|(k, &ratio)| {
            let col = |j: usize| mean(&per_seed.iter().map(|(acc, _)| acc[k][j]).collect::<Vec<_>>());
            OodRatioSummary {
                ratio,
                ungated_coverage: col(0),
                gated_coverage: col(1),
                gated_crc_coverage: col(2),
                rho_hat: col(3),
                ungated_set_size: col(4),
                gated_crc_set_size: col(5),
                gate_tpr: col(6),
                gate_fpr: col(7),
            }
        })
        .collect();
    Ok(OodResult {
        summaries,
        thresholds: per_seed.iter().map(|(_, t)| *t).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EatExperiment {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    /// Fraction of each class used for training; the rest are tested.
    pub train_fraction: f64,
    pub n_seeds: usize,
    pub k: usize,
    pub dominance_cutoff: f64,
}

impl EatExperiment {
    pub fn new(scenario: ScenarioConfig, model: ModelConfig, n_seeds: usize) -> Self {
        Self {
            scenario,
            model,
            train_fraction: 0.5,
            n_seeds,
            k: DEFAULT_EAT_K,
            dominance_cutoff: DEFAULT_DOMINANCE_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EatSeedResult {
    pub seed: u64,
    pub accuracy_without: f64,
    pub accuracy_with: f64,
    /// Whether most tiles of the flagged cluster came from the mixed blob.
    pub found_mixed_blob: bool,
    pub elimination_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EatResult {
    pub seeds: Vec<EatSeedResult>,
    pub mean_accuracy_without: f64,
    pub mean_accuracy_with: f64,
    pub n_found: usize,
}

fn patient_accuracy(records: &[PatientRecord]) -> f64 {
    let hits = records.iter().filter(|r| Some(argmax(&r.probs)) == r.label).count();
    hits as f64 / records.len() as f64
}

/// Tile keep-mask for every slide of `data` under `filter`.
pub fn eat_keep_mask(data: &Scenario, ambiguity: &[f64], filter: &EatFilter) -> Result<Vec<bool>> {
    let mut slides: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in data.manifest.tiles().iter().enumerate() {
        slides.entry(&t.slide_id).or_default().push(i);
    }
    let mut keep = vec![false; data.manifest.len()];
    for rows in slides.values() {
        let tiles = data.embeddings.select_rows(rows);
        let amb: Vec<f64> = rows.iter().map(|&i| ambiguity[i]).collect();
        for j in eliminate_tiles(&tiles, &amb, filter)? {
            keep[rows[j]] = true;
        }
    }
    Ok(keep)
}

/// Baseline head on all training tiles against a head retrained after
/// cluster-mode elimination, with elimination also applied at test time.
pub fn run_eat_experiment(exp: &EatExperiment) -> Result<EatResult> {
    let seeds = (0..exp.n_seeds)
        .into_par_iter()
        .map(|s| -> Result<EatSeedResult> {
            let seed = exp.scenario.seed.wrapping_add(s as u64);
            let eat = gen_eat_scenario(&ScenarioConfig {
                seed,
                ..exp.scenario.clone()
            })?;
            let data = &eat.scenario;
            let mut rng = Rng::with_stream(seed, 22);
            let mut by_class: BTreeMap<Option<usize>, Vec<String>> = BTreeMap::new();
            for (id, info) in data.manifest.patients() {
                by_class.entry(info.label).or_default().push(id);
            }
            let mut ids = Vec::new();
            let mut test_ids = Vec::new();
            for mut members in by_class.into_values() {
                rng.shuffle(&mut members);
                let n_train = (exp.train_fraction * members.len() as f64).round() as usize;
                test_ids.extend(members.split_off(n_train));
                ids.extend(members);
            }
            let train = data.select_patients(&ids);
            let test = data.select_patients(&test_ids);

            let (base, _) = train_head(&train, &exp.model, seed)?;
            let without = score_patients(&base, &test, None, DEFAULT_DELTA)?;

            let train_probs = base.predict_batch(&train.embeddings)?.probs;
            let amb: Vec<f64> = train_probs.iter().map(|p| ambiguity_score(p)).collect::<Result<_>>()?;
            let labels: Vec<usize> = train.manifest.tiles().iter().map(|t| t.label.unwrap()).collect();
            let filter = fit_eat_cluster(&train.embeddings, &amb, &labels, exp.k, exp.dominance_cutoff, &mut rng)?;
            let EatFilter::Cluster {
                ambiguous_cluster,
                elimination_rate,
                ref centers,
                ..
            } = filter
            else {
                unreachable!("cluster fit returns a cluster filter")
            };

            let train_rows = data.manifest.rows_for_patients(&ids);
            let mut in_cluster = 0usize;
            let mut mixed = 0usize;
            for (j, &row) in train_rows.iter().enumerate() {
                if crate::numerics::nearest_center(centers, train.embeddings.row(j)).0 == ambiguous_cluster {
                    in_cluster += 1;
                    mixed += usize::from(eat.blobs[row] == EatBlob::Mixed);
                }
            }
            let found_mixed_blob = 2 * mixed > in_cluster;

            let train_keep = eat_keep_mask(&train, &amb, &filter)?;
            let kept_rows: Vec<usize> = (0..train_keep.len()).filter(|&i| train_keep[i]).collect();
            let filtered = Scenario {
                embeddings: train.embeddings.select_rows(&kept_rows),
                manifest: train.manifest.subset(&kept_rows),
            };
            let (retrained, _) = train_head(&filtered, &exp.model, seed)?;
            let test_amb: Vec<f64> = retrained
                .predict_batch(&test.embeddings)?
                .probs
                .iter()
                .map(|p| ambiguity_score(p))
                .collect::<Result<_>>()?;
            let test_keep = eat_keep_mask(&test, &test_amb, &filter)?;
            let with = score_patients(&retrained, &test, Some(&test_keep), DEFAULT_DELTA)?;

            Ok(EatSeedResult {
                seed,
                accuracy_without: patient_accuracy(&without),
                accuracy_with: patient_accuracy(&with),
                found_mixed_blob,
                elimination_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = seeds.len() as f64;
    Ok(EatResult {
        mean_accuracy_without: seeds.iter().map(|s| s.accuracy_without).sum::<f64>() / n,
        mean_accuracy_with: seeds.iter().map(|s| s.accuracy_with).sum::<f64>() / n,
        n_found: seeds.iter().filter(|s| s.found_mixed_blob).count(),
        seeds,
    })
}

//! Tile -> slide -> patient averaging and the per-patient record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ood::{ood_score_probability, ood_score_uncertainty, OodGate, OodScoreKind};
use crate::conformal::PredictionSet;
use crate::data::Manifest;
use crate::error::{check_dim, invalid, Result};

fn mean_vectors<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    sum
}

/// Slide and patient means of tile probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProbs {
    pub slide_probs: BTreeMap<String, Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Averages tile probabilities within each slide, then slide means within
/// each patient. `keep`, when given, marks the tiles that survive
/// elimination; every slide must keep at least one.
pub fn aggregate<P: AsRef<[f64]>>(
    tile_probs: &[P],
    manifest: &Manifest,
    keep: Option<&[bool]>,
) -> Result<BTreeMap<String, PatientProbs>> {
    check_dim(manifest.len(), tile_probs.len())?;
    if let Some(k) = keep {
        check_dim(manifest.len(), k.len())?;
    }
    let mut slides: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, t) in manifest.tiles().iter().enumerate() {
        let entry = slides.entry((&t.patient_id, &t.slide_id)).or_default();
        if keep.map_or(true, |k| k[i]) {
            entry.push(i);
        }
    }
    let mut out: BTreeMap<String, PatientProbs> = BTreeMap::new();
    for ((patient, slide), rows) in slides {
        if rows.is_empty() {
            return Err(invalid(format!("slide {slide} has no retained tiles")));
        }
        let probs = mean_vectors(rows.iter().map(|&i| tile_probs[i].as_ref()));
        out.entry(patient.to_string())
            .or_insert_with(|| PatientProbs {
                slide_probs: BTreeMap::new(),
                probs: Vec::new(),
            })
            .slide_probs
            .insert(slide.to_string(), probs);
    }
    for p in out.values_mut() {
        p.probs = mean_vectors(p.slide_probs.values().map(Vec::as_slice));
    }
    Ok(out)
}

/// Everything the report needs about one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// `None` for out-of-domain patients.
    pub label: Option<usize>,
    pub sex: String,
    pub race_group: String,
    pub slide_probs: BTreeMap<String, Vec<f64>>,
    pub probs: Vec<f64>,
    pub score_probability: f64,
    pub score_uncertainty: f64,
    pub set: Option<PredictionSet>,
}

impl PatientRecord {
    pub fn ood_score(&self, kind: OodScoreKind) -> f64 {
        match kind {
            OodScoreKind::Probability => self.score_probability,
            OodScoreKind::Uncertainty => self.score_uncertainty,
        }
    }

    pub fn is_ood(&self) -> bool {
        self.label.is_none()
    }
}

/// Builds one record per patient, sorted by patient id. Class
/// probabilities are averaged over retained tiles; both OOD scores use all
/// of the patient's tiles.
pub fn patient_records<P: AsRef<[f64]>>(
    manifest: &Manifest,
    tile_probs: &[P],
    tile_uncertainty: &[f64],
    keep: Option<&[bool]>,
    delta: usize,
) -> Result<Vec<PatientRecord>> {
    check_dim(manifest.len(), tile_uncertainty.len())?;
    let mut probs = aggregate(tile_probs, manifest, keep)?;
    manifest
        .patients()
        .into_iter()
        .map(|(id, info)| {
            let pp = probs.remove(&id).expect("aggregate covers every patient");
            let tp: Vec<&[f64]> = info.tiles.iter().map(|&i| tile_probs[i].as_ref()).collect();
            let tu: Vec<f64> = info.tiles.iter().map(|&i| tile_uncertainty[i]).collect();
            Ok(PatientRecord {
                patient_id: id,
                label: info.label,
                sex: info.sex,
                race_group: info.race_group,
                slide_probs: pp.slide_probs,
                probs: pp.probs,
                score_probability: ood_score_probability(&tp)?,
                score_uncertainty: ood_score_uncertainty(&tu, delta)?,
                set: None,
            })
        })
        .collect()
}

/// Patients passed and removed by a gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscOutcome {
    pub retained: Vec<PatientRecord>,
    pub excluded: Vec<String>,
    pub threshold: f64,
}

impl DscOutcome {
    pub fn exclusion_rate(&self) -> f64 {
        let n = self.retained.len() + self.excluded.len();
        self.excluded.len() as f64 / n as f64
    }
}

/// Applies `gate` to every patient of an external cohort.
pub fn dsc_filter(records: &[PatientRecord], gate: &OodGate) -> Result<DscOutcome> {
    if records.is_empty() {
        return Err(invalid("empty cohort"));
    }
    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    for r in records {
        if gate.decide(r.ood_score(gate.score_kind)) == super::GateDecision::Ood {
            excluded.push(r.patient_id.clone());
        } else {
            retained.push(r.clone());
        }
    }
    Ok(DscOutcome {
        retained,
        excluded,
        threshold: gate.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TileRecord;

    fn tile(id: &str, slide: &str, patient: &str) -> TileRecord {
        TileRecord {
            tile_id: id.into(),
            slide_id: slide.into(),
            patient_id: patient.into(),
            label: Some(0),
            sex: "F".into(),
            race_group: "A".into(),
        }
    }

    #[test]
    fn two_stage_mean() {
        let m = Manifest::new(vec![tile("a", "s1", "p"), tile("b", "s1", "p"), tile("c", "s2", "p")]).unwrap();
        let probs = [[0.6, 0.4], [0.8, 0.2], [0.5, 0.5]];
        let agg = aggregate(&probs, &m, None).unwrap();
        let p = &agg["p"];
        assert!((p.slide_probs["s1"][0] - 0.7).abs() < 1e-15);
        assert!((p.probs[0] - 0.6).abs() < 1e-15);
        assert!((p.probs[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_tile_passes_through() {
        let m = Manifest::new(vec![tile("a", "s", "p")]).unwrap();
        let agg = aggregate(&[[0.3, 0.7]], &m, None).unwrap();
        assert_eq!(agg["p"].probs, vec![0.3, 0.7]);
    }

    #[test]
    fn keep_mask_and_orphans() {
        let m = Manifest::new(vec![tile("a", "s", "p"), tile("b", "s", "p")]).unwrap();
        let probs = [[1.0, 0.0], [0.0, 1.0]];
        let agg = aggregate(&probs, &m, Some(&[false, true])).unwrap();
        assert_eq!(agg["p"].probs, vec![0.0, 1.0]);
        assert!(aggregate(&probs, &m, Some(&[false, false])).is_err());
        assert!(aggregate(&probs[..1], &m, None).is_err());
    }

    #[test]
    fn dsc_extremes() {
        let m = Manifest::new(vec![tile("a", "s", "p"), tile("b", "t", "q")]).unwrap();
        let recs = patient_records(&m, &[[0.9, 0.1], [0.6, 0.4]], &[0.2, 0.8], None, 200).unwrap();
        let keep_all = OodGate::fixed(OodScoreKind::Uncertainty, 200, 0.8).unwrap();
        assert_eq!(dsc_filter(&recs, &keep_all).unwrap().retained.len(), 2);
        let drop_all = OodGate::fixed(OodScoreKind::Uncertainty, 200, 0.1).unwrap();
        let out = dsc_filter(&recs, &drop_all).unwrap();
        assert!(out.retained.is_empty());
        assert_eq!(out.exclusion_rate(), 1.0);
        assert!(dsc_filter(&[], &keep_all).is_err());
    }
}

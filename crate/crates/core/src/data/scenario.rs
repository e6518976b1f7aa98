//! Seeded synthetic cohorts of tile embeddings.
//!
//! Every tile is `center + patient offset + slide offset + tile noise`,
//! with isotropic Gaussian offsets. Distances in the config are in units
//! of `tile_std`. In-domain classes sit at `+-separation/2` along the
//! first axis, out-of-domain patients are in-domain patients pushed further
//! out along that axis, externally shifted patients move along the second
//! axis, and the third axis carries the mixed blob of the
//! ambiguous-tile scenario.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, TileRecord};
use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_patients: usize,
    /// Mean slides per patient; the fractional part is a Bernoulli extra
    /// slide.
    pub slides_per_patient: f64,
    pub tiles_per_slide: usize,
    pub dim: usize,
    /// Distance between the two class means.
    pub class_separation: f64,
    pub tile_std: f64,
    pub slide_std: f64,
    pub patient_std: f64,
    /// Outward shift of out-of-domain patients along the class axis.
    pub ood_offset: f64,
    /// Shift of shifted external patients along the second axis.
    pub domain_offset: f64,
    /// Pairwise distance between the three blobs of the ambiguous-tile
    /// scenario.
    pub eat_separation: f64,
    /// Fraction of tiles drawn from the mixed blob.
    pub eat_mixing_fraction: f64,
    /// Fraction of a dominated blob's tiles that come from its own class.
    pub eat_purity: f64,
    pub female_fraction: f64,
    pub race_groups: Vec<String>,
    pub race_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            slides_per_patient: 3.1,
            tiles_per_slide: 12,
            dim: 16,
            class_separation: 2.0,
            tile_std: 0.25,
            slide_std: 0.05,
            patient_std: 0.2,
            ood_offset: 6.0,
            domain_offset: 4.0,
            eat_separation: 8.0,
            eat_mixing_fraction: 2.0 / 3.0,
            eat_purity: 0.95,
            female_fraction: 0.5,
            race_groups: vec!["A".into(), "B".into(), "C".into(), "D".into()],
            race_weights: vec![0.7, 0.15, 0.1, 0.05],
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.tiles_per_slide == 0 {
            return Err(invalid("patient and tile counts must be positive"));
        }
        if !(self.slides_per_patient >= 1.0) || !self.slides_per_patient.is_finite() {
            return Err(invalid("slides_per_patient must be at least 1"));
        }
        if self.dim < 3 {
            return Err(invalid("scenarios need at least 3 dimensions"));
        }
        if !(self.tile_std > 0.0 && self.slide_std >= 0.0 && self.patient_std >= 0.0) {
            return Err(invalid("tile_std must be positive and other spreads nonnegative"));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("ood_offset", self.ood_offset),
            ("domain_offset", self.domain_offset),
            ("eat_separation", self.eat_separation),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and nonnegative")));
            }
        }
        for (name, v) in [
            ("eat_mixing_fraction", self.eat_mixing_fraction),
            ("eat_purity", self.eat_purity),
            ("female_fraction", self.female_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.race_groups.is_empty() || self.race_groups.len() != self.race_weights.len() {
            return Err(invalid(
                "race_groups and race_weights must be nonempty and of equal length",
            ));
        }
        if self.race_weights.iter().any(|w| !(*w >= 0.0)) || self.race_weights.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("race_weights must be nonnegative with a positive sum"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Embeddings with the manifest describing each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub embeddings: Matrix,
    pub manifest: Manifest,
}

impl Scenario {
    pub fn concat(&self, other: &Scenario) -> Result<Scenario> {
        let mut rows: Vec<Vec<f64>> = self.embeddings.row_iter().map(<[f64]>::to_vec).collect();
        rows.extend(other.embeddings.row_iter().map(<[f64]>::to_vec));
        let embeddings = if rows.is_empty() {
            Matrix::zeros(0, self.embeddings.cols())
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(Scenario {
            embeddings,
            manifest: self.manifest.concat(&other.manifest)?,
        })
    }

    /// Rows belonging to the given patients.
    pub fn select_patients<S: AsRef<str>>(&self, ids: &[S]) -> Scenario {
        let rows = self.manifest.rows_for_patients(ids);
        Scenario {
            embeddings: self.embeddings.select_rows(&rows),
            manifest: self.manifest.subset(&rows),
        }
    }
}

/// Which blob of the ambiguous-tile scenario a tile was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EatBlob {
    Class0,
    Class1,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EatScenario {
    pub scenario: Scenario,
    pub blobs: Vec<EatBlob>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalCohort {
    pub scenario: Scenario,
    pub shifted: BTreeSet<String>,
}

struct Builder<'a> {
    cfg: &'a ScenarioConfig,
    rows: Vec<f64>,
    tiles: Vec<TileRecord>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        Self {
            cfg,
            rows: Vec::new(),
            tiles: Vec::new(),
        }
    }

    fn gaussian(&self, rng: &mut Rng, std: f64) -> Vec<f64> {
        (0..self.cfg.dim).map(|_| std * rng.normal()).collect()
    }

    fn demographics(&self, rng: &mut Rng) -> (String, String) {
        let sex = if rng.bernoulli(self.cfg.female_fraction) {
            "F"
        } else {
            "M"
        };
        let total: f64 = self.cfg.race_weights.iter().sum();
        let mut u = rng.uniform() * total;
        let mut race = self.cfg.race_groups.last().unwrap();
        for (g, w) in self.cfg.race_groups.iter().zip(&self.cfg.race_weights) {
            if u < *w {
                race = g;
                break;
            }
            u -= w;
        }
        (sex.to_string(), race.clone())
    }

    fn n_slides(&self, rng: &mut Rng) -> usize {
        let base = self.cfg.slides_per_patient.floor();
        base as usize + usize::from(rng.bernoulli(self.cfg.slides_per_patient - base))
    }

    /// Adds one patient; `center(rng)` gives each tile's blob center.
    fn patient(
        &mut self,
        rng: &mut Rng,
        patient_id: &str,
        label: Option<usize>,
        mut center: impl FnMut(&mut Rng) -> Vec<f64>,
    ) {
        let (sex, race_group) = self.demographics(rng);
        let patient_off = self.gaussian(rng, self.cfg.patient_std);
        for s in 0..self.n_slides(rng) {
            let slide_id = format!("{patient_id}-S{s}");
            let slide_off = self.gaussian(rng, self.cfg.slide_std);
            for t in 0..self.cfg.tiles_per_slide {
                let c = center(rng);
                for d in 0..self.cfg.dim {
                    self.rows
                        .push(c[d] + patient_off[d] + slide_off[d] + self.cfg.tile_std * rng.normal());
                }
                self.tiles.push(TileRecord {
                    tile_id: format!("{slide_id}-T{t:03}"),
                    slide_id: slide_id.clone(),
                    patient_id: patient_id.to_string(),
                    label,
                    sex: sex.clone(),
                    race_group: race_group.clone(),
                });
            }
        }
    }

    fn finish(self) -> Result<Scenario> {
        let n = self.tiles.len();
        Ok(Scenario {
            embeddings: Matrix::new(n, self.cfg.dim, self.rows)?,
            manifest: Manifest::new(self.tiles)?,
        })
    }
}

fn axis(dim: usize, i: usize, length: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = length;
    v
}

fn class_center(cfg: &ScenarioConfig, y: usize) -> Vec<f64> {
    let h = cfg.class_separation * cfg.tile_std / 2.0;
    axis(cfg.dim, 0, if y == 0 { -h } else { h })
}

/// Two-class in-domain cohort. Patient labels are fair coin flips.
pub fn gen_ind_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.seed, 10);
    let mut b = Builder::new(cfg);
    for p in 0..cfg.n_patients {
        let y = usize::from(rng.bernoulli(0.5));
        let c = class_center(cfg, y);
        b.patient(&mut rng, &format!("P{p:05}"), Some(y), |_| c.clone());
    }
    b.finish()
}

/// `n` out-of-domain patients: in-domain patients of a hidden class moved
/// `ood_offset` further away from the other class along the first axis,
/// labelled out-of-domain. Patient
/// `i` does not depend on `n`, so smaller cohorts are prefixes of larger
/// ones.
pub fn gen_ood_patients(cfg: &ScenarioConfig, n: usize) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.seed, 11);
    let mut b = Builder::new(cfg);
    let shift = cfg.ood_offset * cfg.tile_std;
    for p in 0..n {
        let y = usize::from(rng.bernoulli(0.5));
        let mut c = class_center(cfg, y);
        c[0] += if y == 0 { -shift } else { shift };
        b.patient(&mut rng, &format!("O{p:05}"), None, |_| c.clone());
    }
    b.finish()
}

/// In-domain cohort plus `round(ratio * n_patients)` out-of-domain
/// patients.
pub fn gen_ood_scenario(cfg: &ScenarioConfig, ratio: f64) -> Result<Scenario> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(invalid(format!(
            "OOD ratio must be finite and nonnegative, got {ratio}"
        )));
    }
    let ind = gen_ind_scenario(cfg)?;
    let n_ood = (ratio * cfg.n_patients as f64).round() as usize;
    ind.concat(&gen_ood_patients(cfg, n_ood)?)
}

/// Three-blob cohort. Each tile comes from the mixed blob with probability
/// `eat_mixing_fraction`; otherwise from its own class blob with
/// probability `eat_purity` and from the other class blob otherwise.
/// Patients alternate between the two classes.
pub fn gen_eat_scenario(cfg: &ScenarioConfig) -> Result<EatScenario> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.seed, 12);
    let h = cfg.eat_separation * cfg.tile_std / 2.0;
    let centers = [
        axis(cfg.dim, 0, -h),
        axis(cfg.dim, 0, h),
        axis(cfg.dim, 2, 3f64.sqrt() * h),
    ];
    let mut b = Builder::new(cfg);
    let mut blobs = Vec::new();
    for p in 0..cfg.n_patients {
        let y = p % 2;
        b.patient(&mut rng, &format!("P{p:05}"), Some(y), |r| {
            let blob = if r.bernoulli(cfg.eat_mixing_fraction) {
                EatBlob::Mixed
            } else if r.bernoulli(cfg.eat_purity) == (y == 0) {
                EatBlob::Class0
            } else {
                EatBlob::Class1
            };
            blobs.push(blob);
            centers[blob as usize].clone()
        });
    }
    Ok(EatScenario {
        scenario: b.finish()?,
        blobs,
    })
}

/// External cohort where a `shifted_fraction` of patients lose their class
/// signal and move by `domain_offset` along the second axis. Labels are
/// kept for every patient.
pub fn gen_external_cohort(cfg: &ScenarioConfig, shifted_fraction: f64) -> Result<ExternalCohort> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&shifted_fraction) {
        return Err(invalid("shifted_fraction must lie in [0, 1]"));
    }
    let mut rng = Rng::with_stream(cfg.seed, 13);
    let mut b = Builder::new(cfg);
    let mut shifted = BTreeSet::new();
    for p in 0..cfg.n_patients {
        let id = format!("X{p:05}");
        let y = usize::from(rng.bernoulli(0.5));
        let c = if rng.bernoulli(shifted_fraction) {
            shifted.insert(id.clone());
            axis(cfg.dim, 1, cfg.domain_offset * cfg.tile_std)
        } else {
            class_center(cfg, y)
        };
        b.patient(&mut rng, &id, Some(y), |_| c.clone());
    }
    Ok(ExternalCohort {
        scenario: b.finish()?,
        shifted,
    })
}

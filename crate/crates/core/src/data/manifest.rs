use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Label column value marking an out-of-domain tile.
pub const OOD_LABEL: i64 = -1;

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub tile_id: String,
    pub slide_id: String,
    pub patient_id: String,
    /// `None` for out-of-domain tiles.
    pub label: Option<usize>,
    pub sex: String,
    pub race_group: String,
}

impl TileRecord {
    pub fn is_ood(&self) -> bool {
        self.label.is_none()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    tile_id: String,
    slide_id: String,
    patient_id: String,
    label: i64,
    sex: String,
    race_group: String,
}

/// Per-patient view of a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientInfo {
    pub label: Option<usize>,
    pub sex: String,
    pub race_group: String,
    /// Slide ids in first-appearance order.
    pub slides: Vec<String>,
    /// Row indices of the patient's tiles.
    pub tiles: Vec<usize>,
}

/// Validated tile -> slide -> patient table. Row `i` describes embedding
/// row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    tiles: Vec<TileRecord>,
}

impl Manifest {
    /// Checks that tile ids are unique, each slide belongs to one patient
    /// and each patient has one label and one set of demographics.
    pub fn new(tiles: Vec<TileRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tiles.len());
        let mut slide_owner: HashMap<&str, &str> = HashMap::new();
        let mut patient_meta: HashMap<&str, (Option<usize>, &str, &str)> = HashMap::new();
        for t in &tiles {
            if !seen.insert(t.tile_id.as_str()) {
                return Err(invalid(format!("duplicate tile_id {}", t.tile_id)));
            }
            let owner = slide_owner.entry(&t.slide_id).or_insert(&t.patient_id);
            if *owner != t.patient_id {
                return Err(invalid(format!(
                    "slide {} belongs to both {} and {}",
                    t.slide_id, owner, t.patient_id
                )));
            }
            let meta = (t.label, t.sex.as_str(), t.race_group.as_str());
            let prev = patient_meta.entry(&t.patient_id).or_insert(meta);
            if *prev != meta {
                return Err(invalid(format!(
                    "patient {} has inconsistent label or demographics",
                    t.patient_id
                )));
            }
        }
        Ok(Self { tiles })
    }

    pub fn tiles(&self) -> &[TileRecord] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn patients(&self) -> BTreeMap<String, PatientInfo> {
        let mut out: BTreeMap<String, PatientInfo> = BTreeMap::new();
        for (i, t) in self.tiles.iter().enumerate() {
            let p = out.entry(t.patient_id.clone()).or_insert_with(|| PatientInfo {
                label: t.label,
                sex: t.sex.clone(),
                race_group: t.race_group.clone(),
                slides: Vec::new(),
                tiles: Vec::new(),
            });
            if !p.slides.contains(&t.slide_id) {
                p.slides.push(t.slide_id.clone());
            }
            p.tiles.push(i);
        }
        out
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients().into_keys().collect()
    }

    /// Row indices of every tile belonging to the given patients, in
    /// manifest order.
    pub fn rows_for_patients<S: AsRef<str>>(&self, ids: &[S]) -> Vec<usize> {
        let wanted: HashSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        (0..self.tiles.len())
            .filter(|&i| wanted.contains(self.tiles[i].patient_id.as_str()))
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            tiles: rows.iter().map(|&i| self.tiles[i].clone()).collect(),
        }
    }

    /// Concatenates two manifests, re-validating the union.
    pub fn concat(&self, other: &Manifest) -> Result<Self> {
        let mut tiles = self.tiles.clone();
        tiles.extend(other.tiles.iter().cloned());
        Self::new(tiles)
    }

    pub fn from_reader<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let expected = ["tile_id", "slide_id", "patient_id", "label", "sex", "race_group"];
        if header.iter().ne(expected) {
            return Err(Error::Format(format!("manifest header must be {}", expected.join(","))));
        }
        let mut tiles = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            let label = match row.label {
                OOD_LABEL => None,
                y if y >= 0 => Some(y as usize),
                y => return Err(invalid(format!("label {y} is neither a class nor {OOD_LABEL}"))),
            };
            tiles.push(TileRecord {
                tile_id: row.tile_id,
                slide_id: row.slide_id,
                patient_id: row.patient_id,
                label,
                sex: row.sex,
                race_group: row.race_group,
            });
        }
        Self::new(tiles)
    }

    pub fn to_writer<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for t in &self.tiles {
            w.serialize(Row {
                tile_id: t.tile_id.clone(),
                slide_id: t.slide_id.clone(),
                patient_id: t.patient_id.clone(),
                label: t.label.map_or(OOD_LABEL, |y| y as i64),
                sex: t.sex.clone(),
                race_group: t.race_group.clone(),
            })?;
        }
        if self.tiles.is_empty() {
            w.write_record(["tile_id", "slide_id", "patient_id", "label", "sex", "race_group"])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::from_reader(std::fs::File::open(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    manifest.to_writer(std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "tile_id,slide_id,patient_id,label,sex,race_group\n";

    #[test]
    fn minimal_manifest() {
        let m = Manifest::from_reader(format!("{HEADER}t0,s0,p0,1,F,A\n").as_bytes()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.tiles()[0].label, Some(1));
        let p = &m.patients()["p0"];
        assert_eq!(p.slides, vec!["s0".to_string()]);
    }

    #[test]
    fn slide_with_two_patients() {
        let text = format!("{HEADER}t0,s0,p0,1,F,A\nt1,s0,p1,1,F,A\n");
        assert!(Manifest::from_reader(text.as_bytes()).is_err());
    }

    #[test]
    fn duplicate_tile() {
        let text = format!("{HEADER}t0,s0,p0,1,F,A\nt0,s1,p0,1,F,A\n");
        assert!(Manifest::from_reader(text.as_bytes()).is_err());
    }

    #[test]
    fn ood_marker_round_trip() {
        let text = format!("{HEADER}t0,s0,p0,-1,M,B\nt1,s1,p1,0,F,A\n");
        let m = Manifest::from_reader(text.as_bytes()).unwrap();
        assert!(m.tiles()[0].is_ood());
        let mut buf = Vec::new();
        m.to_writer(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn bad_header_and_label() {
        assert!(Manifest::from_reader("a,b\n1,2\n".as_bytes()).is_err());
        assert!(Manifest::from_reader(format!("{HEADER}t0,s0,p0,-2,F,A\n").as_bytes()).is_err());
    }

    #[test]
    fn inconsistent_patient_label() {
        let text = format!("{HEADER}t0,s0,p0,1,F,A\nt1,s1,p0,0,F,A\n");
        assert!(Manifest::from_reader(text.as_bytes()).is_err());
    }
}

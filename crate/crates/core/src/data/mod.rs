//! Shared data model: samples, masks, manifests and patient-level splits.

mod io;
pub mod toy;

pub use io::{
    load_corpus, read_manifest, read_mask_png, read_png, save_corpus, write_manifest, write_mask_png, write_png,
};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Binary mask, row-major, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub side: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(side: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), side * side, "mask data length");
        debug_assert!(data.iter().all(|&v| v <= 1));
        Mask { side, data }
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn dice(&self, other: &Mask) -> f64 {
        let inter: usize = self.data.iter().zip(&other.data).map(|(&a, &b)| (a & b) as usize).sum();
        let total = self.area() + other.area();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }
}

/// One image with its labels and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub side: usize,
    /// Row-major grayscale values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Length-C binary label vector.
    pub labels: Vec<u8>,
    pub patient_id: String,
    pub provenance: Provenance,
    pub base_id: Option<String>,
    pub mask_id: Option<String>,
}

impl ImageSample {
    /// Checks the sample invariants.
    pub fn validate(&self, num_classes: usize, allow_normal: bool) -> Result<()> {
        if self.pixels.len() != self.side * self.side {
            return Err(Error::Shape(format!(
                "sample {} has {} pixels for side {}",
                self.id,
                self.pixels.len(),
                self.side
            )));
        }
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Domain(format!("sample {} has pixels outside [0, 1]", self.id)));
        }
        if self.labels.len() != num_classes || self.labels.iter().any(|&b| b > 1) {
            return Err(Error::Shape(format!(
                "sample {} label vector is not binary of width {num_classes}",
                self.id
            )));
        }
        if !allow_normal && self.labels.iter().all(|&b| b == 0) {
            return Err(Error::Domain(format!(
                "sample {} has no label but normals are disallowed",
                self.id
            )));
        }
        if self.provenance == Provenance::Synthetic && self.base_id.is_none() {
            return Err(Error::Domain(format!("synthetic sample {} lacks a base id", self.id)));
        }
        Ok(())
    }

    /// Index of the first set label (the class in exclusive mode).
    pub fn primary_class(&self) -> Option<usize> {
        self.labels.iter().position(|&b| b == 1)
    }
}

pub fn one_hot(c: usize, num_classes: usize) -> Vec<u8> {
    let mut v = vec![0; num_classes];
    v[c] = 1;
    v
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub patient_id: String,
    pub labels: Vec<u8>,
    pub mask_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub split_assignment: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| self.split_assignment.get(&e.id) == Some(&split))
            .map(|e| e.id.clone())
            .collect()
    }

    /// Image-count fraction per split.
    pub fn split_fractions(&self) -> [f64; 3] {
        let n = self.entries.len().max(1) as f64;
        let mut out = [0.0; 3];
        for s in self.split_assignment.values() {
            out[*s as usize] += 1.0 / n;
        }
        out
    }

    /// Every patient lies wholly inside one split.
    pub fn check_patient_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            let Some(&s) = self.split_assignment.get(&e.id) else {
                continue;
            };
            if let Some(&prev) = seen.get(e.patient_id.as_str()) {
                if prev != s {
                    return Err(Error::Guard(format!(
                        "patient {} appears in both {} and {}",
                        e.patient_id,
                        prev.name(),
                        s.name()
                    )));
                }
            } else {
                seen.insert(&e.patient_id, s);
            }
        }
        Ok(())
    }
}

/// In-memory corpus: manifest plus decoded images and masks (keyed by mask id).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub samples: Vec<ImageSample>,
    pub masks: BTreeMap<String, Mask>,
}

impl Corpus {
    pub fn index(&self) -> HashMap<String, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&ImageSample> {
        self.samples
            .iter()
            .filter(|s| self.manifest.split_assignment.get(&s.id) == Some(&split))
            .collect()
    }

    pub fn mask_of(&self, s: &ImageSample) -> Option<&Mask> {
        s.mask_id.as_ref().and_then(|m| self.masks.get(m))
    }

    /// SHA-256 over the manifest, pixels and masks.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut csv = Vec::new();
        io::write_manifest_to(&self.manifest, &mut csv).expect("in-memory write");
        h.update(&csv);
        for s in &self.samples {
            h.update(s.id.as_bytes());
            for &p in &s.pixels {
                h.update([(p * 255.0).round() as u8]);
            }
        }
        for (k, m) in &self.masks {
            h.update(k.as_bytes());
            h.update(&m.data);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub total: usize,
}

pub fn class_distribution<'a>(samples: impl IntoIterator<Item = &'a [u8]>) -> Result<ClassDistribution> {
    let mut counts: Vec<usize> = Vec::new();
    let mut total = 0;
    for labels in samples {
        if counts.is_empty() {
            counts = vec![0; labels.len()];
        }
        if labels.len() != counts.len() {
            return Err(Error::Shape("label vectors of different widths".into()));
        }
        for (c, &b) in counts.iter_mut().zip(labels) {
            *c += b as usize;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Domain("class distribution of an empty sample list".into()));
    }
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ClassDistribution {
        counts,
        fractions,
        total,
    })
}

/// Assigns whole patients to train/val/test so image-count fractions approach `fractions`.
///
/// Patients are shuffled under `seed`, ordered by size (largest first, stable), and
/// each is given to the split currently furthest below its target.
pub fn split_by_patient(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Split(format!(
            "fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        groups.entry(&e.patient_id).or_default().push(&e.id);
    }
    if groups.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 patients, found {}",
            groups.len()
        )));
    }
    let mut patients: Vec<(&str, Vec<&str>)> = groups.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    patients.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    let total = manifest.entries.len() as f64;
    let mut filled = [0usize; 3];
    let mut patients_in = [0usize; 3];
    let mut out = manifest.clone();
    out.split_assignment.clear();
    let remaining_patients = patients.len();
    for (k, (_, ids)) in patients.iter().enumerate() {
        // Make sure every nonzero split receives a patient before the pool runs out.
        let left = remaining_patients - k;
        let empty: Vec<usize> = (0..3).filter(|&s| fractions[s] > 0.0 && patients_in[s] == 0).collect();
        let s = if !empty.is_empty() && left <= empty.len() {
            empty[0]
        } else {
            (0..3)
                .filter(|&s| fractions[s] > 0.0)
                .max_by(|&a, &b| {
                    let da = fractions[a] * total - filled[a] as f64;
                    let db = fractions[b] * total - filled[b] as f64;
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .expect("at least one positive fraction")
        };
        filled[s] += ids.len();
        patients_in[s] += 1;
        for id in ids {
            out.split_assignment.insert(id.to_string(), Split::ALL[s]);
        }
    }
    out.check_patient_disjoint()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(patients: usize, per: usize) -> DatasetManifest {
        let mut m = DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        for p in 0..patients {
            for i in 0..per {
                m.entries.push(ManifestEntry {
                    id: format!("p{p}_{i}"),
                    path: String::new(),
                    patient_id: format!("p{p}"),
                    labels: vec![1, 0],
                    mask_path: None,
                });
            }
        }
        m
    }

    #[test]
    fn class_distribution_hand_count() {
        let a = [1u8, 0];
        let ab = [1u8, 1];
        let d = class_distribution([&a[..], &ab[..]]).unwrap();
        assert_eq!(d.counts, vec![2, 1]);
        assert_eq!(d.fractions, vec![1.0, 0.5]);
        assert!(class_distribution(std::iter::empty::<&[u8]>()).is_err());
    }

    #[test]
    fn three_patients_three_splits() {
        let m = split_by_patient(&manifest(3, 4), [1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0], 1).unwrap();
        for s in Split::ALL {
            assert_eq!(m.ids_in(s).len(), 4);
        }
    }

    #[test]
    fn too_few_patients() {
        assert!(matches!(
            split_by_patient(&manifest(2, 4), [0.7, 0.1, 0.2], 1),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn hundred_patients_deterministic_and_close() {
        let m = manifest(100, 10);
        let a = split_by_patient(&m, [0.7, 0.1, 0.2], 9).unwrap();
        let b = split_by_patient(&m, [0.7, 0.1, 0.2], 9).unwrap();
        assert_eq!(a, b);
        let f = a.split_fractions();
        for (got, want) in f.iter().zip([0.7, 0.1, 0.2]) {
            assert!((got - want).abs() <= 0.02, "{f:?}");
        }
    }
}

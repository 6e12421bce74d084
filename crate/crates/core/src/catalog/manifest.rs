//! Dataset manifests: which image belongs to which specimen, class and
//! partition, and the specimen-grouped stratified validation split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxon::Species;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("class {0} has fewer than two specimens")]
    TooFewSpecimens(Species),
    #[error("validation fraction {0} outside [0, 1)")]
    BadFraction(f64),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("specimen {0:?} carries more than one label")]
    ConflictingLabels(String),
    #[error("augmented image {0:?} outside the train partition")]
    AugmentedOutsideTrain(String),
    #[error("augmented image {image:?} refers to {source_id:?}, which is not a train image")]
    DanglingAugmentation { image: String, source_id: String },
    #[error("specimen {0:?} appears in more than one partition")]
    SpecimenStraddles(String),
    #[error("entry {0:?} has no partition")]
    Unpartitioned(String),
    #[error("entry {0:?} is augmented; split before augmenting")]
    AugmentedInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub specimen_id: String,
    pub label: Species,
    #[serde(default)]
    pub partition: Option<Partition>,
    #[serde(default)]
    pub augmented_from: Option<String>,
    #[serde(default)]
    pub path: Option<String>,
    /// Groups the three images of one evaluation set.
    #[serde(default)]
    pub set_id: Option<String>,
}

impl ManifestEntry {
    pub fn new(image_id: impl Into<String>, specimen_id: impl Into<String>, label: Species) -> Self {
        Self {
            image_id: image_id.into(),
            specimen_id: specimen_id.into(),
            label,
            partition: None,
            augmented_from: None,
            path: None,
            set_id: None,
        }
    }

    pub fn with_path(mut self, path: impl Into<String>) -> Self {
        self.path = Some(path.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    /// Reads CSV, or JSON when the extension is `.json`. Partitioned
    /// manifests are validated.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let manifest = if is_json(path) {
            serde_json::from_slice(&std::fs::read(path)?)?
        } else {
            let mut rdr = csv::Reader::from_path(path)?;
            let entries = rdr.deserialize().collect::<Result<Vec<ManifestEntry>, _>>()?;
            Self { entries }
        };
        if manifest.entries.iter().any(|e| e.partition.is_some()) {
            manifest.validate()?;
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        if is_json(path) {
            std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        } else {
            let mut w = csv::Writer::from_path(path)?;
            for e in &self.entries {
                w.serialize(e)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.partition == Some(p))
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut ids = HashSet::new();
        let mut labels: HashMap<&str, Species> = HashMap::new();
        let mut placement: HashMap<&str, Partition> = HashMap::new();
        for e in &self.entries {
            if !ids.insert(e.image_id.as_str()) {
                return Err(ManifestError::DuplicateImage(e.image_id.clone()));
            }
            if *labels.entry(&e.specimen_id).or_insert(e.label) != e.label {
                return Err(ManifestError::ConflictingLabels(e.specimen_id.clone()));
            }
            let p = e.partition.ok_or_else(|| ManifestError::Unpartitioned(e.image_id.clone()))?;
            if *placement.entry(&e.specimen_id).or_insert(p) != p {
                return Err(ManifestError::SpecimenStraddles(e.specimen_id.clone()));
            }
        }
        let train: HashSet<&str> = self
            .partition(Partition::Train)
            .filter(|e| e.augmented_from.is_none())
            .map(|e| e.image_id.as_str())
            .collect();
        for e in &self.entries {
            if let Some(src) = &e.augmented_from {
                if e.partition != Some(Partition::Train) {
                    return Err(ManifestError::AugmentedOutsideTrain(e.image_id.clone()));
                }
                if !train.contains(src.as_str()) {
                    return Err(ManifestError::DanglingAugmentation {
                        image: e.image_id.clone(),
                        source_id: src.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Per-class image counts for one partition, in class order.
    pub fn class_counts(&self, p: Partition) -> [usize; 9] {
        let mut counts = [0; 9];
        for e in self.partition(p) {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|x| x.eq_ignore_ascii_case("json"))
}

/// Splits unpartitioned entries into Train and Validation.
///
/// Specimens are never divided. Within each class, the validation quota
/// is the class's share of `round(val_fraction * N)` (largest-remainder
/// apportionment), and specimens are drawn in a seeded shuffle order,
/// taking each one that does not overshoot the quota, then the single
/// remaining specimen that best closes any gap. At least one specimen of
/// every class stays in Train.
pub fn split(entries: &[ManifestEntry], val_fraction: f64, seed: u64) -> Result<DatasetManifest, ManifestError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(ManifestError::BadFraction(val_fraction));
    }
    let mut ids = HashSet::new();
    let mut specimen_label: HashMap<&str, Species> = HashMap::new();
    // class -> specimen -> image count, ordered for determinism
    let mut groups: BTreeMap<Species, BTreeMap<&str, usize>> = BTreeMap::new();
    for e in entries {
        if e.augmented_from.is_some() {
            return Err(ManifestError::AugmentedInput(e.image_id.clone()));
        }
        if !ids.insert(e.image_id.as_str()) {
            return Err(ManifestError::DuplicateImage(e.image_id.clone()));
        }
        if *specimen_label.entry(&e.specimen_id).or_insert(e.label) != e.label {
            return Err(ManifestError::ConflictingLabels(e.specimen_id.clone()));
        }
        *groups.entry(e.label).or_default().entry(&e.specimen_id).or_default() += 1;
    }

    let mut validation: HashSet<&str> = HashSet::new();
    if val_fraction > 0.0 {
        if let Some((&species, _)) = groups.iter().find(|(_, s)| s.len() < 2) {
            return Err(ManifestError::TooFewSpecimens(species));
        }
        let totals: Vec<(Species, usize)> = groups.iter().map(|(&s, g)| (s, g.values().sum())).collect();
        let quotas = apportion(&totals, val_fraction);
        for (species, specimens) in &groups {
            let quota = quotas[species];
            let mut order: Vec<(&str, usize)> = specimens.iter().map(|(&k, &v)| (k, v)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(species.index() as u64 + 1)));
            order.shuffle(&mut rng);
            let mut taken = vec![false; order.len()];
            let mut val = 0usize;
            let limit = order.len() - 1;
            let mut chosen = 0usize;
            for (i, &(_, n)) in order.iter().enumerate() {
                if chosen < limit && val + n <= quota {
                    taken[i] = true;
                    val += n;
                    chosen += 1;
                }
            }
            if val < quota && chosen < limit {
                let gap = quota - val;
                let best = order
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .min_by_key(|(_, &(_, n))| n.abs_diff(gap))
                    .map(|(i, &(_, n))| (i, n));
                if let Some((i, n)) = best {
                    if (val + n).abs_diff(quota) < gap {
                        taken[i] = true;
                    }
                }
            }
            for (i, &(id, _)) in order.iter().enumerate() {
                if taken[i] {
                    validation.insert(id);
                }
            }
        }
    }

    let entries = entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.partition = Some(if validation.contains(e.specimen_id.as_str()) {
                Partition::Validation
            } else {
                Partition::Train
            });
            e
        })
        .collect();
    Ok(DatasetManifest { entries })
}

/// Distributes `round(fraction * total)` over classes in proportion to
/// their sizes, largest remainders first (ties to class order).
fn apportion(totals: &[(Species, usize)], fraction: f64) -> HashMap<Species, usize> {
    let n: usize = totals.iter().map(|t| t.1).sum();
    let target = (fraction * n as f64).round() as usize;
    let mut out: HashMap<Species, usize> = HashMap::new();
    let mut rema: Vec<(f64, Species)> = Vec::new();
    let mut assigned = 0;
    for &(s, c) in totals {
        let exact = fraction * c as f64;
        let base = exact.floor() as usize;
        out.insert(s, base);
        assigned += base;
        rema.push((exact - base as f64, s));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, s) in rema.iter().take(target.saturating_sub(assigned)) {
        *out.get_mut(&s).expect("class present") += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `specimens` specimens per class for the first `classes` classes,
    /// each with `per` images.
    fn synthetic(classes: usize, specimens: usize, per: usize) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for c in 0..classes {
            let sp = Species::ALL[c];
            for s in 0..specimens {
                for i in 0..per {
                    out.push(ManifestEntry::new(format!("{c}-{s}-{i}"), format!("{c}-{s}"), sp));
                }
            }
        }
        out
    }

    fn straddles(m: &DatasetManifest) -> bool {
        let mut seen: HashMap<&str, Partition> = HashMap::new();
        m.entries
            .iter()
            .any(|e| *seen.entry(&e.specimen_id).or_insert(e.partition.unwrap()) != e.partition.unwrap())
    }

    #[test]
    fn no_specimen_in_both_partitions() {
        let entries = synthetic(2, 10, 5);
        let m = split(&entries, 0.30, 1).unwrap();
        assert!(!straddles(&m));
        m.validate().unwrap();
        let val = m.partition(Partition::Validation).count();
        assert_eq!(val, 30);
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let m = split(&synthetic(3, 1, 4), 0.0, 9).unwrap();
        assert!(m.entries.iter().all(|e| e.partition == Some(Partition::Train)));
    }

    #[test]
    fn full_scale_validation_count() {
        let counts = [759, 741, 761, 790, 810, 756, 712, 703, 775];
        let mut entries = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                entries.push(ManifestEntry::new(format!("{c}/{i}"), format!("{c}/{i}"), Species::ALL[c]));
            }
        }
        assert_eq!(entries.len(), 6807);
        let m = split(&entries, 0.30, 3).unwrap();
        assert_eq!(m.partition(Partition::Validation).count(), 2042);
        assert_eq!(m.partition(Partition::Train).count(), 4765);
    }

    #[test]
    fn too_few_specimens() {
        let mut entries = synthetic(1, 3, 2);
        entries.push(ManifestEntry::new("x", "lonely", Species::Infirmatus));
        assert!(matches!(split(&entries, 0.3, 0), Err(ManifestError::TooFewSpecimens(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let entries = synthetic(3, 12, 3);
        assert_eq!(split(&entries, 0.3, 5).unwrap(), split(&entries, 0.3, 5).unwrap());
    }

    #[test]
    fn validation_rejects_augmented_outside_train_and_straddling() {
        let mut m = split(&synthetic(2, 4, 2), 0.5, 0).unwrap();
        m.validate().unwrap();
        let val = m.partition(Partition::Validation).next().unwrap().clone();
        let mut aug = ManifestEntry::new("aug", val.specimen_id.clone(), val.label);
        aug.partition = Some(Partition::Validation);
        aug.augmented_from = Some(val.image_id.clone());
        m.entries.push(aug);
        assert!(matches!(m.validate(), Err(ManifestError::AugmentedOutsideTrain(_))));
        m.entries.pop();

        let mut moved = val.clone();
        moved.image_id = "moved".into();
        moved.partition = Some(Partition::Train);
        m.entries.push(moved);
        assert!(matches!(m.validate(), Err(ManifestError::SpecimenStraddles(_))));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = split(&synthetic(2, 3, 2), 0.3, 2).unwrap();
        m.entries[0].path = Some("a.png".into());
        for name in ["m.csv", "m.json"] {
            let p = dir.path().join(name);
            m.save(&p).unwrap();
            assert_eq!(DatasetManifest::load(&p).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn split_never_straddles_and_tracks_fraction(
            sizes in proptest::collection::vec(proptest::collection::vec(1usize..6, 2..12), 1..5),
            frac in 0.05f64..0.6,
            seed in any::<u64>(),
        ) {
            let mut entries = Vec::new();
            for (c, specimens) in sizes.iter().enumerate() {
                for (s, &n) in specimens.iter().enumerate() {
                    for i in 0..n {
                        entries.push(ManifestEntry::new(format!("{c}-{s}-{i}"), format!("{c}-{s}"), Species::ALL[c]));
                    }
                }
            }
            let m = split(&entries, frac, seed).unwrap();
            prop_assert!(!straddles(&m));
            prop_assert_eq!(m.entries.len(), entries.len());
            for (c, specimens) in sizes.iter().enumerate() {
                let total: usize = specimens.iter().sum();
                let val = m.class_counts(Partition::Validation)[c];
                let biggest = *specimens.iter().max().unwrap();
                prop_assert!(val < total);
                // within one specimen of the quota (plus apportionment rounding)
                prop_assert!((val as f64 - frac * total as f64).abs() <= biggest as f64 + 1.0);
            }
        }
    }
}

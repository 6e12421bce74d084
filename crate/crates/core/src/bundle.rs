//! A deployable model: a backbone, one or more trained heads and the
//! preprocessing they were trained with, described by `model.json` in a
//! directory next to the head checkpoints.
//!
//! ```json
//! {
//!   "backbone": { "standin": { "seed": 3 } },
//!   "heads": { "species_only": "species_only.fmap" },
//!   "preprocess": { ... }
//! }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::fmap::fmap_write;
use crate::eval::average_probabilities;
use crate::heads::{standin_backbone, Backbone, CheckpointMeta, HeadError, HeadKind, HeadModel, ImportedBackbone};
use crate::image::{hex, ImageTensor};
use crate::nn::argmax;
use crate::preprocess::{preprocess, PreprocessConfig, PreprocessError};
use crate::taxon::{Genus, Species, TaxonLabel};

pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot read model bundle {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad model manifest: {0}")]
    Manifest(String),
    #[error("mode {mode} needs the {head} head, which this bundle lacks")]
    MissingHead { mode: ClassifyMode, head: &'static str },
    #[error("no images to classify")]
    NoImages,
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T> = std::result::Result<T, BundleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMode {
    /// One nine-way head.
    #[default]
    Direct,
    /// Genus head, then the routed genus's species head.
    Hierarchical,
}

impl fmt::Display for ClassifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifyMode::Direct => "direct",
            ClassifyMode::Hierarchical => "hierarchical",
        })
    }
}

impl FromStr for ClassifyMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "direct" => Ok(ClassifyMode::Direct),
            "hierarchical" => Ok(ClassifyMode::Hierarchical),
            other => Err(format!("unknown mode {other:?} (direct or hierarchical)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSpec {
    Standin { seed: u64 },
    /// FMAP container of precomputed feature maps.
    Imported { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub backbone: BackboneSpec,
    /// Head name to checkpoint path, relative to the bundle directory.
    pub heads: BTreeMap<HeadKind, PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
}

/// Prediction over the nine species for one specimen.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundlePrediction {
    pub classes: Vec<String>,
    pub probabilities: Vec<f64>,
    pub genus_probabilities: Option<Vec<f64>>,
    pub label: TaxonLabel,
    pub confidence: f64,
}

pub struct ModelBundle {
    id: String,
    backbone: Arc<dyn Backbone>,
    heads: BTreeMap<HeadKind, HeadModel<f32>>,
    preprocess: PreprocessConfig,
}

impl fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelBundle")
            .field("id", &self.id)
            .field("backbone", &self.backbone.id())
            .field("heads", &self.heads.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ModelBundle {
    pub fn new(
        backbone: Arc<dyn Backbone>,
        heads: BTreeMap<HeadKind, HeadModel<f32>>,
        preprocess: PreprocessConfig,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(BundleError::Manifest("no heads".into()));
        }
        for (kind, head) in &heads {
            if head.kind() != *kind {
                return Err(BundleError::Manifest(format!(
                    "checkpoint listed as {} holds a {} head",
                    kind.name(),
                    head.kind().name()
                )));
            }
        }
        let mut h = Sha256::new();
        h.update(backbone.id().as_bytes());
        for head in heads.values() {
            h.update(head.digest().as_bytes());
        }
        let id = hex(&h.finalize()[..6]);
        Ok(Self {
            id,
            backbone,
            heads,
            preprocess,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| BundleError::Io {
            path: path.clone(),
            source,
        })?;
        let manifest: BundleManifest =
            serde_json::from_str(&text).map_err(|e| BundleError::Manifest(format!("{}: {e}", path.display())))?;
        let backbone: Arc<dyn Backbone> = match &manifest.backbone {
            BackboneSpec::Standin { seed } => Arc::new(standin_backbone(*seed)),
            BackboneSpec::Imported { path } => Arc::new(ImportedBackbone::open(dir.join(path))?),
        };
        let mut heads = BTreeMap::new();
        for (kind, rel) in &manifest.heads {
            let (head, _) = HeadModel::load(dir.join(rel))?;
            heads.insert(*kind, head);
        }
        Self::new(backbone, heads, manifest.preprocess)
    }

    /// Writes `model.json` and one checkpoint per head into `dir`.
    pub fn save(
        dir: impl AsRef<Path>,
        backbone: &BackboneSpec,
        heads: &[&HeadModel<f32>],
        preprocess: PreprocessConfig,
    ) -> Result<()> {
        let dir = dir.as_ref();
        let io = |path: &Path, source| BundleError::Io {
            path: path.to_owned(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut listed = BTreeMap::new();
        for head in heads {
            let file = PathBuf::from(format!("{}.fmap", head.kind().name()));
            fmap_write(&head.to_checkpoint(&CheckpointMeta::default()), dir.join(&file))
                .map_err(|e| BundleError::Head(e.into()))?;
            listed.insert(head.kind(), file);
        }
        let manifest = BundleManifest {
            backbone: backbone.clone(),
            heads: listed,
            preprocess,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| io(&path, e))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn head(&self, kind: HeadKind) -> Option<&HeadModel<f32>> {
        self.heads.get(&kind)
    }

    pub fn preprocess_config(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn supports(&self, mode: ClassifyMode) -> bool {
        self.check_mode(mode).is_ok()
    }

    fn require(&self, mode: ClassifyMode, kind: HeadKind) -> Result<&HeadModel<f32>> {
        self.heads.get(&kind).ok_or(BundleError::MissingHead { mode, head: kind.name() })
    }

    fn check_mode(&self, mode: ClassifyMode) -> Result<()> {
        match mode {
            ClassifyMode::Direct => self.require(mode, HeadKind::SpeciesOnly).map(drop),
            ClassifyMode::Hierarchical => {
                for kind in [HeadKind::Genus, HeadKind::Aedes, HeadKind::Anopheles, HeadKind::Culex] {
                    self.require(mode, kind)?;
                }
                Ok(())
            }
        }
    }

    /// Raw photo to model input.
    pub fn prepare(&self, raw: &ImageTensor) -> Result<ImageTensor> {
        Ok(preprocess(raw, &self.preprocess)?)
    }

    /// Classifies one specimen from its preprocessed images. Probabilities
    /// are averaged over images; in hierarchical mode genus and
    /// within-genus vectors are averaged separately, the genus is routed on
    /// the mean genus vector, and the reported nine-way vector is
    /// `p(genus) · p(species | genus)`.
    pub fn classify(&self, mode: ClassifyMode, images: &[ImageTensor]) -> Result<BundlePrediction> {
        if images.is_empty() {
            return Err(BundleError::NoImages);
        }
        self.check_mode(mode)?;
        let bb = self.backbone.as_ref();
        let mean = |head: &HeadModel<f32>| -> Result<Vec<f64>> {
            let ps = images
                .iter()
                .map(|img| head.predict_image(img, bb))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(average_probabilities(&ps).expect("one head gives equal lengths"))
        };
        let classes = Species::names();
        match mode {
            ClassifyMode::Direct => {
                let probabilities = mean(self.require(mode, HeadKind::SpeciesOnly)?)?;
                let best = argmax(&probabilities);
                Ok(BundlePrediction {
                    classes,
                    confidence: probabilities[best],
                    label: Species::from_index(best).expect("nine classes").into(),
                    probabilities,
                    genus_probabilities: None,
                })
            }
            ClassifyMode::Hierarchical => {
                let genus_p = mean(self.require(mode, HeadKind::Genus)?)?;
                let mut within: BTreeMap<Genus, Vec<f64>> = BTreeMap::new();
                for g in Genus::ALL {
                    within.insert(g, mean(self.require(mode, HeadKind::for_genus(g))?)?);
                }
                let genus = Genus::from_index(argmax(&genus_p)).expect("three genera");
                let species = Species::in_genus(genus, argmax(&within[&genus])).expect("three species");
                let probabilities: Vec<f64> = Species::ALL
                    .iter()
                    .map(|s| genus_p[s.genus().index()] * within[&s.genus()][s.index_in_genus()])
                    .collect();
                Ok(BundlePrediction {
                    classes,
                    confidence: probabilities[species.index()],
                    label: species.into(),
                    probabilities,
                    genus_probabilities: Some(genus_p),
                })
            }
        }
    }

    /// Head and class index whose activation map explains `label`.
    pub fn explaining_head(&self, mode: ClassifyMode, label: TaxonLabel) -> Result<(&HeadModel<f32>, usize)> {
        let kind = match mode {
            ClassifyMode::Direct => HeadKind::SpeciesOnly,
            ClassifyMode::Hierarchical => HeadKind::for_genus(label.genus()),
        };
        let head = self.require(mode, kind)?;
        let class = kind.class_of(label.species()).expect("label belongs to the head");
        Ok((head, class))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadOptions;
    use crate::image::{ResizePolicy, Scale};

    fn heads(kinds: &[HeadKind]) -> Vec<HeadModel<f32>> {
        kinds
            .iter()
            .enumerate()
            .map(|(i, k)| HeadModel::new(&k.spec(), HeadOptions::default(), i as u64).unwrap())
            .collect()
    }

    fn fast() -> PreprocessConfig {
        PreprocessConfig {
            resize: ResizePolicy::default(),
            denoise: None,
        }
    }

    fn sample() -> ImageTensor {
        let mut img = ImageTensor::filled(32, 32, Scale::Byte, [90.0, 140.0, 30.0]);
        for y in 8..20 {
            for x in 10..24 {
                img.set_pixel(y, x, [220.0, 30.0, 60.0]);
            }
        }
        img
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let hs = heads(&[HeadKind::SpeciesOnly]);
        ModelBundle::save(dir.path(), &BackboneSpec::Standin { seed: 4 }, &[&hs[0]], fast()).unwrap();
        let b = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(b.head(HeadKind::SpeciesOnly).unwrap().digest(), hs[0].digest());
        assert!(b.supports(ClassifyMode::Direct));
        assert!(!b.supports(ClassifyMode::Hierarchical));
        let again = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(b.id(), again.id());
    }

    #[test]
    fn direct_set_is_mean_of_images() {
        let hs = heads(&[HeadKind::SpeciesOnly]);
        let bb = Arc::new(standin_backbone(1));
        let b = ModelBundle::new(bb.clone(), [(HeadKind::SpeciesOnly, hs[0].clone())].into(), fast()).unwrap();
        let img = b.prepare(&sample()).unwrap();
        let single = b.classify(ClassifyMode::Direct, std::slice::from_ref(&img)).unwrap();
        let triple = b.classify(ClassifyMode::Direct, &[img.clone(), img.clone(), img]).unwrap();
        assert_eq!(single.label, triple.label);
        for (a, c) in single.probabilities.iter().zip(&triple.probabilities) {
            assert!((a - c).abs() < 1e-12);
        }
        assert!(matches!(b.classify(ClassifyMode::Direct, &[]), Err(BundleError::NoImages)));
        assert!(matches!(
            b.classify(ClassifyMode::Hierarchical, &[sample()]),
            Err(BundleError::MissingHead { .. })
        ));
    }

    #[test]
    fn hierarchical_joint_vector_sums_to_one() {
        let kinds = [HeadKind::Genus, HeadKind::Aedes, HeadKind::Anopheles, HeadKind::Culex];
        let hs = heads(&kinds);
        let map = kinds.iter().copied().zip(hs).collect();
        let b = ModelBundle::new(Arc::new(standin_backbone(2)), map, fast()).unwrap();
        let img = b.prepare(&sample()).unwrap();
        let p = b.classify(ClassifyMode::Hierarchical, &[img]).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let g = p.genus_probabilities.as_ref().unwrap();
        assert_eq!(p.label.genus(), Genus::from_index(argmax(g)).unwrap());
        assert_eq!(p.confidence, p.probabilities[p.label.species().index()]);
        let (head, class) = b.explaining_head(ClassifyMode::Hierarchical, p.label).unwrap();
        assert_eq!(head.kind(), HeadKind::for_genus(p.label.genus()));
        assert_eq!(class, p.label.species().index_in_genus());
    }

    #[test]
    fn mislabeled_checkpoint_is_rejected() {
        let hs = heads(&[HeadKind::Aedes]);
        let err = ModelBundle::new(
            Arc::new(standin_backbone(0)),
            [(HeadKind::Culex, hs[0].clone())].into(),
            fast(),
        );
        assert!(matches!(err, Err(BundleError::Manifest(_))));
    }
}

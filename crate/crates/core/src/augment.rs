//! Seeded training-set augmentation.
//!
//! Each source image yields exactly four variants, one per [`AugmentKind`],
//! so a manifest of `n` images expands to `5n` images. Factors are drawn
//! from a random stream derived from `(seed, image_id)` alone, which keeps
//! every image's factors stable when other images are added or removed and
//! makes serial and parallel expansion produce identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::manifest::{DatasetManifest, ManifestEntry, ManifestError, Partition};
use crate::image::{resample_region, resize, ImageTensor, ResizePolicy, Scale};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("bad augmentation factor {0}")]
    BadFactor(f64),
    #[error("image {0} could not be loaded")]
    MissingImage(String),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("invalid augmentation spec: {0}")]
    BadSpec(String),
    #[error("gain expects a byte-scale image")]
    NotByteScale,
    #[error("manifest has no train images to augment")]
    NoTrainImages,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRange {
    pub low: f64,
    pub high: f64,
}

impl FactorRange {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.low..=self.high).contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    ZoomIn,
    ZoomOut,
    GainUp,
    GainDown,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [Self::ZoomIn, Self::ZoomOut, Self::GainUp, Self::GainDown];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ZoomIn => "zoom_in",
            Self::ZoomOut => "zoom_out",
            Self::GainUp => "gain_up",
            Self::GainDown => "gain_down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub zoom_in: FactorRange,
    pub zoom_out: FactorRange,
    pub gain_up: FactorRange,
    pub gain_down: FactorRange,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl AugmentationSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            zoom_in: FactorRange::new(1.05, 1.50),
            zoom_out: FactorRange::new(0.75, 0.90),
            gain_up: FactorRange::new(1.05, 1.50),
            gain_down: FactorRange::new(0.75, 0.95),
            seed,
        }
    }

    pub fn range(&self, kind: AugmentKind) -> FactorRange {
        match kind {
            AugmentKind::ZoomIn => self.zoom_in,
            AugmentKind::ZoomOut => self.zoom_out,
            AugmentKind::GainUp => self.gain_up,
            AugmentKind::GainDown => self.gain_down,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for kind in AugmentKind::ALL {
            let r = self.range(kind);
            if !(r.low < r.high) || r.low <= 0.0 {
                return Err(AugmentError::BadSpec(format!("{} range {r:?}", kind.as_str())));
            }
        }
        if self.zoom_in.low <= 1.0 || self.zoom_out.high >= 1.0 {
            return Err(AugmentError::BadSpec("zoom ranges must lie on either side of 1".into()));
        }
        Ok(())
    }

    /// Random stream private to one image.
    pub fn image_stream(&self, image_id: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(image_id.as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    /// Draws one factor per kind for `image_id`.
    pub fn draw(&self, image_id: &str) -> AugmentationPlan {
        let mut rng = self.image_stream(image_id);
        let factors = AugmentKind::ALL.map(|kind| {
            let r = self.range(kind);
            (kind, rng.random_range(r.low..=r.high))
        });
        AugmentationPlan {
            source_id: image_id.to_owned(),
            factors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub source_id: String,
    pub factors: [(AugmentKind, f64); 4],
}

/// Sidecar describing how one variant was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub source_id: String,
    pub kind: AugmentKind,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub kind: AugmentKind,
    pub factor: f64,
    pub image: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub source_id: String,
    pub original: ImageTensor,
    pub variants: Vec<Variant>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        1 + self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn records(&self) -> impl Iterator<Item = VariantRecord> + '_ {
        self.variants.iter().map(|v| VariantRecord {
            source_id: self.source_id.clone(),
            kind: v.kind,
            factor: v.factor,
        })
    }

    /// Original followed by the variants.
    pub fn images(&self) -> impl Iterator<Item = &ImageTensor> {
        std::iter::once(&self.original).chain(self.variants.iter().map(|v| &v.image))
    }
}

/// Zoom about the image centre, keeping the output size.
///
/// `factor > 1` crops the central `(h/f)×(w/f)` region and resamples it back
/// up; `factor < 1` shrinks the image and pads it with the median colour of
/// the source's outer pixel ring.
pub fn zoom(img: &ImageTensor, factor: f64) -> Result<ImageTensor, AugmentError> {
    if !(factor > 0.0 && factor <= 4.0) {
        return Err(AugmentError::BadFactor(factor));
    }
    let (h, w) = (img.height(), img.width());
    if factor == 1.0 {
        return Ok(img.clone());
    }
    if factor > 1.0 {
        let ch = h as f64 / factor;
        let cw = w as f64 / factor;
        let origin = [(h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0];
        return Ok(resample_region(img, origin, [ch, cw], h, w));
    }
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let small = resize(img, ResizePolicy { target_h: nh, target_w: nw, ..ResizePolicy::default() });
    let fill = border_median(img);
    let mut out = ImageTensor::filled(h, w, img.scale(), fill);
    let (top, left) = ((h - nh) / 2, (w - nw) / 2);
    for y in 0..nh {
        for x in 0..nw {
            out.set_pixel(top + y, left + x, small.pixel(y, x));
        }
    }
    Ok(out)
}

/// Per-channel median of the one-pixel border ring.
pub fn border_median(img: &ImageTensor) -> [f32; 3] {
    let (h, w) = (img.height(), img.width());
    let mut ring = Vec::with_capacity(2 * (h + w));
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                ring.push(img.pixel(y, x));
            }
        }
    }
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut vals: Vec<f32> = ring.iter().map(|p| p[c]).collect();
        vals.sort_by(f32::total_cmp);
        *slot = vals[(vals.len() - 1) / 2];
    }
    out
}

/// Multiplicative brightness/contrast gain on byte intensities.
pub fn gain(img: &ImageTensor, factor: f64) -> Result<ImageTensor, AugmentError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AugmentError::BadFactor(factor));
    }
    if img.scale() != Scale::Byte {
        return Err(AugmentError::NotByteScale);
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (f64::from(*v) * factor).round().clamp(0.0, 255.0) as f32;
    }
    Ok(out)
}

/// Applies a plan to one image.
pub fn apply_plan(img: &ImageTensor, plan: &AugmentationPlan) -> Result<AugmentedSet, AugmentError> {
    let variants = plan
        .factors
        .iter()
        .map(|&(kind, factor)| {
            let image = match kind {
                AugmentKind::ZoomIn | AugmentKind::ZoomOut => zoom(img, factor)?,
                AugmentKind::GainUp | AugmentKind::GainDown => gain(img, factor)?,
            };
            Ok(Variant { kind, factor, image })
        })
        .collect::<Result<_, AugmentError>>()?;
    Ok(AugmentedSet {
        source_id: plan.source_id.clone(),
        original: img.clone(),
        variants,
    })
}

/// Expands every image of `manifest` into its augmented set.
pub fn expand<F>(manifest: &[String], spec: &AugmentationSpec, load: F) -> Result<Vec<AugmentedSet>, AugmentError>
where
    F: Fn(&str) -> Option<ImageTensor> + Sync,
{
    if manifest.is_empty() {
        return Err(AugmentError::EmptyManifest);
    }
    spec.validate()?;
    manifest
        .par_iter()
        .map(|id| {
            let img = load(id).ok_or_else(|| AugmentError::MissingImage(id.clone()))?;
            apply_plan(&img, &spec.draw(id))
        })
        .collect()
}

/// A new manifest entry produced by augmentation.
#[derive(Debug, Clone)]
pub struct ManifestVariant {
    pub entry: ManifestEntry,
    pub record: VariantRecord,
    pub image: ImageTensor,
}

/// Variant image id: `{source}_{kind}`.
pub fn variant_id(source_id: &str, kind: AugmentKind) -> String {
    format!("{source_id}_{}", kind.as_str())
}

/// Augments the train partition of a split manifest. Validation and test
/// entries pass through untouched; the returned manifest lists every
/// original entry followed by the variants in source order.
pub fn augment_manifest<F>(
    manifest: &DatasetManifest,
    spec: &AugmentationSpec,
    load: F,
) -> Result<(DatasetManifest, Vec<ManifestVariant>), AugmentError>
where
    F: Fn(&ManifestEntry) -> Option<ImageTensor> + Sync,
{
    manifest.validate()?;
    if let Some(e) = manifest.entries.iter().find(|e| e.augmented_from.is_some()) {
        return Err(ManifestError::AugmentedInput(e.image_id.clone()).into());
    }
    let sources: Vec<&ManifestEntry> = manifest.partition(Partition::Train).collect();
    if sources.is_empty() {
        return Err(AugmentError::NoTrainImages);
    }
    spec.validate()?;
    let per_source = sources
        .par_iter()
        .map(|e| {
            let img = load(e).ok_or_else(|| AugmentError::MissingImage(e.image_id.clone()))?;
            let set = apply_plan(&img, &spec.draw(&e.image_id))?;
            Ok(set
                .variants
                .into_iter()
                .map(|v| {
                    let mut entry = ManifestEntry::new(variant_id(&e.image_id, v.kind), &e.specimen_id, e.label);
                    entry.partition = Some(Partition::Train);
                    entry.augmented_from = Some(e.image_id.clone());
                    ManifestVariant {
                        entry,
                        record: VariantRecord {
                            source_id: e.image_id.clone(),
                            kind: v.kind,
                            factor: v.factor,
                        },
                        image: v.image,
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, AugmentError>>()?;
    let variants: Vec<ManifestVariant> = per_source.into_iter().flatten().collect();
    let mut entries = manifest.entries.clone();
    entries.extend(variants.iter().map(|v| v.entry.clone()));
    let out = DatasetManifest::new(entries);
    out.validate()?;
    Ok((out, variants))
}

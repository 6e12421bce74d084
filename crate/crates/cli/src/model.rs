//! Shared flag groups and loaders for the local subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use culicid_core::bundle::{BackboneSpec, BundleManifest, ModelBundle, MANIFEST_FILE};
use culicid_core::catalog::manifest::{DatasetManifest, ManifestEntry, Partition};
use culicid_core::denoise::DenoiseConfig;
use culicid_core::heads::{standin_backbone, Backbone, HeadKind, HeadModel, ImportedBackbone};
use culicid_core::image::{read_image, ImageTensor, ResizePolicy, MODEL_SIDE};
use culicid_core::preprocess::{preprocess, PreprocessConfig};
use rayon::prelude::*;

use crate::fail::{bad_input, ExitCode, Outcome};

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    /// Side of the square model input.
    #[arg(long, default_value_t = MODEL_SIDE)]
    pub side: usize,
    /// Skip non-local-means denoising.
    #[arg(long)]
    pub no_denoise: bool,
}

impl PreprocessArgs {
    pub fn config(&self) -> PreprocessConfig {
        PreprocessConfig {
            resize: ResizePolicy::square(self.side),
            denoise: (!self.no_denoise).then(DenoiseConfig::default),
        }
    }

    pub fn is_default(&self) -> bool {
        self.side == MODEL_SIDE && !self.no_denoise
    }
}

impl Default for PreprocessArgs {
    fn default() -> Self {
        Self {
            side: MODEL_SIDE,
            no_denoise: false,
        }
    }
}

/// `standin:SEED` or the path of a feature archive.
pub fn parse_backbone(s: &str) -> Outcome<BackboneSpec> {
    if let Some(seed) = s.strip_prefix("standin:") {
        let seed = seed
            .parse()
            .map_err(|_| bad_input(format!("bad backbone seed in {s:?}")))?;
        return Ok(BackboneSpec::Standin { seed });
    }
    let path = PathBuf::from(s);
    if !path.is_file() {
        return Err(bad_input(format!("backbone must be standin:SEED or a feature archive, got {s:?}")));
    }
    Ok(BackboneSpec::Imported {
        path: std::path::absolute(path).internal()?,
    })
}

pub fn open_backbone(spec: &BackboneSpec) -> Outcome<Arc<dyn Backbone>> {
    Ok(match spec {
        BackboneSpec::Standin { seed } => Arc::new(standin_backbone(*seed)),
        BackboneSpec::Imported { path } => Arc::new(ImportedBackbone::open(path).bad_input()?),
    })
}

/// Model flags shared by `eval` and `explain`.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Bundle or run directory, or a single head checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Head to use when the bundle holds several.
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// Backbone for a bare checkpoint: standin:SEED or a feature archive.
    #[arg(long)]
    pub backbone: Option<String>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

pub struct LoadedModel {
    pub bundle: ModelBundle,
    pub backbone: BackboneSpec,
}

impl ModelArgs {
    pub fn load(&self) -> Outcome<LoadedModel> {
        load_model(&self.model, self.backbone.as_deref(), &self.preprocess)
    }
}

/// Loads a bundle directory, or wraps a bare checkpoint with the given
/// backbone (by default the one recorded in the checkpoint).
pub fn load_model(path: &Path, backbone: Option<&str>, pre: &PreprocessArgs) -> Outcome<LoadedModel> {
    if path.is_dir() {
        if backbone.is_some() || !pre.is_default() {
            return Err(bad_input("--backbone, --side and --no-denoise apply to bare checkpoints only"));
        }
        let manifest_path = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| bad_input(format!("{}: {e}", manifest_path.display())))?;
        let manifest: BundleManifest = serde_json::from_str(&text)
            .map_err(|e| bad_input(format!("{}: {e}", manifest_path.display())))?;
        let backbone = match manifest.backbone {
            BackboneSpec::Imported { path: p } => BackboneSpec::Imported {
                path: std::path::absolute(path.join(p)).internal()?,
            },
            s => s,
        };
        let bundle = ModelBundle::load(path).bad_input()?;
        return Ok(LoadedModel { bundle, backbone });
    }
    let (head, meta) = HeadModel::load(path).bad_input()?;
    let spec = match backbone {
        Some(s) => parse_backbone(s)?,
        None => match meta.backbone.as_deref().and_then(|b| b.strip_prefix("standin-")) {
            Some(seed) => parse_backbone(&format!("standin:{seed}"))?,
            None => return Err(bad_input("checkpoint does not name a standin backbone; pass --backbone")),
        },
    };
    let heads = BTreeMap::from([(head.kind(), head)]);
    let bundle = ModelBundle::new(open_backbone(&spec)?, heads, pre.config()).bad_input()?;
    Ok(LoadedModel { bundle, backbone: spec })
}

/// The head to use: the requested one, the only one, or the nine-way head.
pub fn pick_head(bundle: &ModelBundle, requested: Option<HeadKind>) -> Outcome<&HeadModel<f32>> {
    if let Some(kind) = requested {
        return bundle
            .head(kind)
            .ok_or_else(|| bad_input(format!("model has no {} head", kind.name())));
    }
    let present: Vec<HeadKind> = HeadKind::ALL.into_iter().filter(|k| bundle.head(*k).is_some()).collect();
    match present.as_slice() {
        [only] => Ok(bundle.head(*only).expect("present")),
        _ => bundle
            .head(HeadKind::SpeciesOnly)
            .ok_or_else(|| bad_input("model holds several heads; choose one with --head")),
    }
}

/// Entry image path, relative paths resolved against the manifest's
/// directory.
pub fn entry_path(manifest_path: &Path, e: &ManifestEntry) -> Outcome<PathBuf> {
    let p = e
        .path
        .as_deref()
        .ok_or_else(|| bad_input(format!("manifest entry {:?} has no path", e.image_id)))?;
    let p = Path::new(p);
    Ok(if p.is_absolute() {
        p.to_owned()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    })
}

pub fn load_manifest(path: &Path) -> Outcome<DatasetManifest> {
    DatasetManifest::load(path).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

pub fn entries_in<'a>(m: &'a DatasetManifest, partition: Option<Partition>) -> Vec<&'a ManifestEntry> {
    m.entries
        .iter()
        .filter(|e| partition.is_none() || e.partition == partition)
        .collect()
}

/// Reads and preprocesses the images of `entries`, in order.
pub fn prepare_entries(manifest_path: &Path, entries: &[&ManifestEntry], cfg: &PreprocessConfig) -> Outcome<Vec<ImageTensor>> {
    entries
        .par_iter()
        .map(|e| {
            let path = entry_path(manifest_path, e)?;
            let raw = read_image(&path).map_err(|err| bad_input(format!("{}: {err}", path.display())))?;
            preprocess(&raw, cfg).map_err(|err| bad_input(format!("{}: {err}", path.display())))
        })
        .collect()
}

pub fn parse_partition(s: &str) -> Result<Partition, String> {
    match s {
        "train" => Ok(Partition::Train),
        "validation" | "val" => Ok(Partition::Validation),
        "test" => Ok(Partition::Test),
        other => Err(format!("unknown partition {other:?} (train, validation or test)")),
    }
}

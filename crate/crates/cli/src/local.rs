//! Subcommands that run in-process: data preparation, training,
//! evaluation and explanation.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use culicid_core::augment::{augment_manifest, AugmentationSpec};
use culicid_core::bundle::ModelBundle;
use culicid_core::catalog::fmap::{fmap_write, FmapContainer, NamedTensor};
use culicid_core::catalog::manifest::{split, DatasetManifest, Partition};
use culicid_core::denoise::{denoise, DenoiseConfig, SearchMode};
use culicid_core::eval::{evaluate_probabilities, predict_set, EvalReport, ProbabilisticClassifier, Protocol};
use culicid_core::explain::{cam, write_raw_map_csv};
use culicid_core::heads::{Backbone, BackboneEndpoint, HeadKind, HeadModel, ImportedBackbone};
use culicid_core::image::{read_image, write_image, ImageTensor};
use culicid_core::train::{fit, write_run_dir, FeatureSet, PhasePlan, TrainConfig};
use culicid_core::{Genus, Species};
use serde_json::json;

use crate::fail::{bad_input, ExitCode, Outcome};
use crate::model::{
    entries_in, entry_path, load_manifest, load_model, open_backbone, parse_backbone, parse_partition, pick_head,
    prepare_entries, ModelArgs, PreprocessArgs,
};

// ---------------------------------------------------------------------------
// denoise
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Filtering strength, in byte intensity units.
    #[arg(long, default_value_t = 10.0)]
    pub h: f32,
    /// Patch radius; patches are (2r+1) pixels square.
    #[arg(long, default_value_t = 3)]
    pub patch: usize,
    /// Search radius, or `exact` to search the whole image.
    #[arg(long, default_value = "10")]
    pub window: String,
}

pub fn run_denoise(a: &DenoiseArgs, json_out: bool) -> Outcome {
    let search = match a.window.as_str() {
        "exact" => SearchMode::Exact,
        r => SearchMode::Windowed {
            radius: r
                .parse()
                .map_err(|_| bad_input(format!("--window takes a radius or `exact`, got {r:?}")))?,
        },
    };
    let cfg = DenoiseConfig {
        patch_radius: a.patch,
        h: a.h,
        search,
    };
    let img = read_image(&a.input).map_err(|e| bad_input(format!("{}: {e}", a.input.display())))?;
    let out = denoise(&img, &cfg).bad_input()?;
    write_image(&out, &a.out).internal()?;
    if json_out {
        println!("{}", json!({"input": a.input, "output": a.out, "config": cfg}));
    } else {
        println!("wrote {}", a.out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Split manifest (CSV or JSON); only train images are augmented.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

pub fn run_augment(a: &AugmentArgs, json_out: bool) -> Outcome {
    let m = load_manifest(&a.manifest)?;
    let spec = AugmentationSpec::with_seed(a.seed);
    // resolve paths first so a missing path is reported as such
    let mut paths = BTreeMap::new();
    for e in m.partition(Partition::Train) {
        paths.insert(e.image_id.clone(), entry_path(&a.manifest, e)?);
    }
    let (mut out, variants) = augment_manifest(&m, &spec, |e| read_image(&paths[&e.image_id]).ok()).bad_input()?;
    let images = a.out_dir.join("images");
    std::fs::create_dir_all(&images).internal()?;
    let mut written = HashSet::new();
    for v in &variants {
        let file = format!("{}.png", v.entry.image_id);
        write_image(&v.image, images.join(&file)).internal()?;
        let sidecar = serde_json::to_vec_pretty(&v.record).internal()?;
        std::fs::write(images.join(format!("{}.json", v.entry.image_id)), sidecar).internal()?;
        written.insert(v.entry.image_id.clone());
    }
    for e in &mut out.entries {
        if written.contains(&e.image_id) {
            e.path = Some(format!("images/{}.png", e.image_id));
        } else if e.path.is_some() {
            let p = std::path::absolute(entry_path(&a.manifest, e)?).internal()?;
            e.path = Some(p.to_string_lossy().into_owned());
        }
    }
    let manifest_out = a.out_dir.join("manifest.csv");
    out.save(&manifest_out).internal()?;
    let train = out.partition(Partition::Train).count();
    if json_out {
        println!(
            "{}",
            json!({"manifest": manifest_out, "sources": variants.len() / 4, "variants": variants.len(), "train_images": train})
        );
    } else {
        println!(
            "{} train images -> {train} ({} variants); manifest {}",
            variants.len() / 4,
            variants.len(),
            manifest_out.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Unpartitioned manifest (CSV or JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of images held out for validation.
    #[arg(long, default_value_t = 0.3)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_split(a: &SplitArgs, json_out: bool) -> Outcome {
    let m = load_manifest(&a.manifest)?;
    let mut out = split(&m.entries, a.val_fraction, a.seed).bad_input()?;
    // keep image paths valid from the output location
    if a.out.parent() != a.manifest.parent() {
        for e in &mut out.entries {
            if e.path.is_some() {
                let p = std::path::absolute(entry_path(&a.manifest, e)?).internal()?;
                e.path = Some(p.to_string_lossy().into_owned());
            }
        }
    }
    out.save(&a.out).internal()?;
    let train = out.class_counts(Partition::Train);
    let val = out.class_counts(Partition::Validation);
    if json_out {
        let per_class: BTreeMap<String, [usize; 2]> = Species::ALL
            .iter()
            .map(|s| (s.to_string(), [train[s.index()], val[s.index()]]))
            .collect();
        println!("{}", json!({"manifest": a.out, "train_validation": per_class}));
    } else {
        println!("{:<26} {:>6} {:>6}", "class", "train", "val");
        for s in Species::ALL {
            println!("{:<26} {:>6} {:>6}", s.to_string(), train[s.index()], val[s.index()]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split (and optionally augmented) manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub head: HeadKind,
    /// Run directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// standin:SEED or a feature archive.
    #[arg(long, default_value = "standin:0")]
    pub backbone: String,
    /// Frozen-backbone epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    /// Full-length schedule (500 + 1200 epochs).
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Learning-rate half-cycle in iterations (default: 8 epochs).
    #[arg(long)]
    pub step_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long)]
    pub no_batch_norm: bool,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let mut plan = if self.full_scale {
            PhasePlan::full_scale()
        } else {
            PhasePlan::default()
        };
        if let Some(e) = self.epochs {
            plan.phase1_epochs = e;
        }
        if let Some(e) = self.phase2_epochs {
            plan.phase2_epochs = e;
        }
        plan.step_size = self.step_size.or(plan.step_size);
        plan.base_lr = self.base_lr.unwrap_or(plan.base_lr);
        plan.max_lr = self.max_lr.unwrap_or(plan.max_lr);
        if let Some(p) = self.patience {
            plan.early_stopping.patience = p;
        }
        TrainConfig {
            plan,
            batch_size: self.batch_size,
            dropout_rate: self.dropout,
            batch_norm: !self.no_batch_norm,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

fn feature_set(
    manifest_path: &Path,
    m: &DatasetManifest,
    p: Partition,
    kind: HeadKind,
    pre: &culicid_core::preprocess::PreprocessConfig,
    backbone: &dyn Backbone,
) -> Outcome<FeatureSet> {
    let entries: Vec<_> = m.partition(p).filter(|e| kind.class_of(e.label).is_some()).collect();
    let images = prepare_entries(manifest_path, &entries, pre)?;
    let labels = entries.iter().map(|e| kind.class_of(e.label).expect("filtered"));
    FeatureSet::from_images(backbone, kind.spec().endpoint, images.iter().zip(labels).collect::<Vec<_>>()).bad_input()
}

pub fn run_train(a: &TrainArgs, json_out: bool) -> Outcome {
    let cfg = a.config();
    cfg.validate().bad_input()?;
    let m = load_manifest(&a.manifest)?;
    if m.entries.iter().any(|e| e.partition.is_none()) {
        return Err(bad_input("manifest is not split; run `culicid split` first"));
    }
    let spec = parse_backbone(&a.backbone)?;
    let backbone = open_backbone(&spec)?;
    let pre = a.preprocess.config();
    let train = feature_set(&a.manifest, &m, Partition::Train, a.head, &pre, backbone.as_ref())?;
    let val = feature_set(&a.manifest, &m, Partition::Validation, a.head, &pre, backbone.as_ref())?;
    let head = HeadModel::new(&a.head.spec(), cfg.head_options(), cfg.seed).bad_input()?;
    if !json_out {
        print!("{}", head.audit());
    }
    let outcome = fit(head, backbone.as_ref(), &train, &val, &cfg).bad_input()?;
    write_run_dir(&a.out, &cfg, &outcome, &backbone.id()).internal()?;
    // a run directory doubles as a one-head model bundle
    let manifest = culicid_core::bundle::BundleManifest {
        backbone: spec,
        heads: BTreeMap::from([(a.head, PathBuf::from("model.fmap"))]),
        preprocess: pre,
    };
    let text = serde_json::to_string_pretty(&manifest).internal()?;
    std::fs::write(a.out.join(culicid_core::bundle::MANIFEST_FILE), text).internal()?;

    let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch);
    let digest = outcome.model.digest();
    if json_out {
        println!(
            "{}",
            json!({
                "run_dir": a.out,
                "head": a.head,
                "train_items": train.len(),
                "validation_items": val.len(),
                "epochs_run": outcome.history.len(),
                "best_epoch": outcome.best_epoch,
                "stopped_early": outcome.stopped_early,
                "val_loss": best.map(|r| r.val_loss),
                "val_acc": best.map(|r| r.val_acc),
                "model_digest": digest,
            })
        );
    } else {
        println!(
            "{}: {} train / {} validation items, {} epochs, best epoch {}{}",
            a.head.name(),
            train.len(),
            val.len(),
            outcome.history.len(),
            outcome.best_epoch,
            if outcome.stopped_early { " (stopped early)" } else { "" }
        );
        if let Some(r) = best {
            println!("validation loss {:.4}, accuracy {:.1}%", r.val_loss, 100.0 * r.val_acc);
        }
        println!("model digest {digest}");
        println!("wrote {}", a.out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    PerImage,
    PerSet,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "per-image")]
    pub protocol: ProtocolArg,
    /// Only score this partition (train, validation or test).
    #[arg(long, value_parser = parse_partition)]
    pub partition: Option<Partition>,
    /// Write the report JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the confusion matrix CSV here.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

/// Scores already preprocessed images.
struct Prepared<'a> {
    head: &'a HeadModel<f32>,
    backbone: &'a dyn Backbone,
}

impl ProbabilisticClassifier for Prepared<'_> {
    fn classes(&self) -> Vec<String> {
        self.head.classes()
    }

    fn predict_proba(&self, img: &ImageTensor) -> culicid_core::eval::Result<Vec<f64>> {
        Ok(self.head.predict_image(img, self.backbone)?)
    }
}

pub fn run_eval(a: &EvalArgs, json_out: bool) -> Outcome {
    let loaded = a.model.load()?;
    let bundle = &loaded.bundle;
    let head = pick_head(bundle, a.model.head)?;
    let kind = head.kind();
    let m = load_manifest(&a.manifest)?;
    let entries: Vec<_> = entries_in(&m, a.partition)
        .into_iter()
        .filter(|e| e.augmented_from.is_none() && kind.class_of(e.label).is_some())
        .collect();
    if entries.is_empty() {
        return Err(bad_input(format!("no manifest entries belong to the {} head", kind.name())));
    }
    let images = prepare_entries(&a.manifest, &entries, bundle.preprocess_config())?;
    let clf = Prepared {
        head,
        backbone: bundle.backbone(),
    };
    let classes = head.classes();
    let class_name = |s: Species| classes[kind.class_of(s).expect("filtered")].clone();
    let scored: Vec<(String, Vec<f64>)> = match a.protocol {
        ProtocolArg::PerImage => entries
            .iter()
            .zip(&images)
            .map(|(e, img)| Ok((class_name(e.label), clf.predict_proba(img).internal()?)))
            .collect::<Outcome<_>>()?,
        ProtocolArg::PerSet => {
            let mut groups: Vec<(String, Species, Vec<ImageTensor>)> = Vec::new();
            for (e, img) in entries.iter().zip(&images) {
                let key = e.set_id.clone().unwrap_or_else(|| e.specimen_id.clone());
                match groups.iter_mut().find(|g| g.0 == key) {
                    Some(g) => g.2.push(img.clone()),
                    None => groups.push((key, e.label, vec![img.clone()])),
                }
            }
            groups
                .iter()
                .map(|(key, label, imgs)| {
                    let p = predict_set(&clf, imgs).map_err(|e| bad_input(format!("{key}: {e}")))?;
                    Ok((class_name(*label), p))
                })
                .collect::<Outcome<_>>()?
        }
    };
    let protocol = match a.protocol {
        ProtocolArg::PerImage => Protocol::PerImage,
        ProtocolArg::PerSet => Protocol::PerSet,
    };
    let report: EvalReport = evaluate_probabilities(classes, protocol, &scored).internal()?;
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_json()).internal()?;
    }
    if let Some(p) = &a.confusion {
        std::fs::write(p, report.confusion.to_csv()).internal()?;
    }
    if json_out {
        println!("{}", report.to_json());
    } else {
        print!("{report}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// Class name or index (default: the predicted class).
    #[arg(long)]
    pub class: Option<String>,
    /// Overlay PNG; the raw map is written next to it as CSV.
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves a class given as an index, a head class name or a taxon name.
pub fn resolve_class(head: &HeadModel<f32>, s: &str) -> Option<usize> {
    let classes = head.classes();
    if let Ok(i) = s.parse::<usize>() {
        return (i < classes.len()).then_some(i);
    }
    if let Some(i) = classes.iter().position(|c| c.eq_ignore_ascii_case(s)) {
        return Some(i);
    }
    let kind = head.kind();
    if let Ok(sp) = s.parse::<Species>() {
        return kind.class_of(sp);
    }
    if kind == HeadKind::Genus {
        return Genus::ALL.iter().position(|g| g.name().eq_ignore_ascii_case(s));
    }
    None
}

pub fn run_explain(a: &ExplainArgs, json_out: bool) -> Outcome {
    let loaded = a.model.load()?;
    let bundle = &loaded.bundle;
    let head = pick_head(bundle, a.model.head)?;
    let class = match &a.class {
        Some(c) => Some(resolve_class(head, c).ok_or_else(|| {
            bad_input(format!("unknown class {c:?}; the {} head has {:?}", head.kind().name(), head.classes()))
        })?),
        None => None,
    };
    let raw = read_image(&a.image).map_err(|e| bad_input(format!("{}: {e}", a.image.display())))?;
    let img = bundle.prepare(&raw).bad_input()?;
    let result = cam(head, bundle.backbone(), &img, class).internal()?;
    write_image(&result.overlay, &a.out).internal()?;
    let csv = a.out.with_extension("csv");
    write_raw_map_csv(&result, &csv).internal()?;
    let p = result.probabilities[result.class_index];
    if json_out {
        println!(
            "{}",
            json!({
                "class": result.class_name,
                "class_index": result.class_index,
                "probability": p,
                "overlay": a.out,
                "raw_map": csv,
                "map_shape": [result.map_height, result.map_width],
            })
        );
    } else {
        println!("{} (p = {p:.3})", result.class_name);
        println!("wrote {} and {}", a.out.display(), csv.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-features
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ExportFeaturesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature archive to write; usable later as `--backbone <path>`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "standin:0")]
    pub backbone: String,
    /// Endpoints to export (default: all the backbone offers).
    #[arg(long)]
    pub endpoint: Vec<BackboneEndpoint>,
    #[arg(long, value_parser = parse_partition)]
    pub partition: Option<Partition>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

pub fn run_export_features(a: &ExportFeaturesArgs, json_out: bool) -> Outcome {
    let backbone = open_backbone(&parse_backbone(&a.backbone)?)?;
    let endpoints = if a.endpoint.is_empty() {
        backbone.endpoints()
    } else {
        a.endpoint.clone()
    };
    let m = load_manifest(&a.manifest)?;
    let entries = entries_in(&m, a.partition);
    let images = prepare_entries(&a.manifest, &entries, &a.preprocess.config())?;
    let mut container = FmapContainer::default()
        .with_metadata("format", "culicid-features")
        .with_metadata("backbone_id", backbone.id());
    let mut seen = HashSet::new();
    for img in &images {
        let digest = img.digest();
        if !seen.insert(digest.clone()) {
            continue;
        }
        for &ep in &endpoints {
            let f = backbone.extract(img, ep).bad_input()?;
            container.push(NamedTensor::new(
                ImportedBackbone::entry_name(&digest, ep),
                f.shape().to_vec(),
                f.into_data(),
            ));
        }
    }
    fmap_write(&container, &a.out).internal()?;
    if json_out {
        println!("{}", json!({"archive": a.out, "images": seen.len(), "entries": container.entries.len()}));
    } else {
        println!("{} images, {} feature maps -> {}", seen.len(), container.entries.len(), a.out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BundleArgs {
    /// Run directories or head checkpoints to combine.
    #[arg(long = "head", required = true)]
    pub heads: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone for bare checkpoints.
    #[arg(long)]
    pub backbone: Option<String>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

pub fn run_bundle(a: &BundleArgs, json_out: bool) -> Outcome {
    let mut heads: BTreeMap<HeadKind, HeadModel<f32>> = BTreeMap::new();
    let mut shared = None;
    for path in &a.heads {
        let (backbone, pre) = if path.is_dir() { (None, PreprocessArgs::default()) } else { (a.backbone.as_deref(), a.preprocess.clone()) };
        let loaded = load_model(path, backbone, &pre)?;
        let key = (loaded.backbone.clone(), *loaded.bundle.preprocess_config());
        match &shared {
            None => shared = Some(key),
            Some(k) if *k != key => {
                return Err(bad_input(format!("{} uses a different backbone or preprocessing", path.display())));
            }
            Some(_) => {}
        }
        for kind in HeadKind::ALL {
            if let Some(h) = loaded.bundle.head(kind) {
                let h = h.cast::<f32>();
                if heads.insert(kind, h).is_some() {
                    return Err(bad_input(format!("more than one {} head", kind.name())));
                }
            }
        }
    }
    let (spec, pre) = shared.expect("at least one head");
    let list: Vec<&HeadModel<f32>> = heads.values().collect();
    ModelBundle::save(&a.out, &spec, &list, pre).internal()?;
    let bundle = ModelBundle::load(&a.out).internal()?;
    if json_out {
        println!("{}", json!({"bundle": a.out, "model_id": bundle.id(), "heads": heads.keys().collect::<Vec<_>>()}));
    } else {
        let names: Vec<&str> = heads.keys().map(|k| k.name()).collect();
        println!("bundle {} ({}) -> {}", bundle.id(), names.join(", "), a.out.display());
    }
    Ok(())
}

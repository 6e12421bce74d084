//! Backbone endpoints, the five classifier heads and the genus/species
//! classifiers built from them.
//!
//! A head is `GAP → dense blocks → (optional concat) → dense → softmax`.
//! Each hidden block is `dense → batch norm → ReLU → dropout`; batch norm
//! and the dropout rate are [`HeadOptions`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::fmap::{fmap_read, FmapContainer, FmapError, NamedTensor};
use crate::image::{hex, ImageTensor, MODEL_SIDE};
use crate::nn::{
    argmax, concat_rows, global_average_pool, global_average_pool_backward, mix_seed, relu, relu_backward,
    softmax_rows, split_rows, Activation, BatchNorm, Dense, Dropout, Mode, NnError, Param, Scalar, Tensor,
};
use crate::taxon::{Genus, Species, TaxonLabel};

/// Spatial side of every endpoint feature map.
pub const FEATURE_SIDE: usize = 17;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("unknown head spec {0:?}")]
    UnknownSpec(String),
    #[error("unknown backbone endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),
    #[error("no archived feature for image {image} at {endpoint}")]
    MissingFeature { image: String, endpoint: BackboneEndpoint },
    #[error("backbone expects a {expected}x{expected} image, got {height}x{width}")]
    WrongInputSize { expected: usize, height: usize, width: usize },
    #[error("expected a {expected} head, got {actual}")]
    WrongHead { expected: HeadKind, actual: HeadKind },
    #[error("class index {index} out of range for {classes} classes")]
    BadClass { index: usize, classes: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fmap(#[from] FmapError),
}

pub type Result<T> = std::result::Result<T, HeadError>;

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneEndpoint {
    #[serde(rename = "block17_10_conv")]
    Block17_10Conv,
    #[serde(rename = "conv2d_93")]
    Conv2d93,
    #[serde(rename = "block17_8_conv")]
    Block17_8Conv,
    #[serde(rename = "conv2d_111")]
    Conv2d111,
}

impl BackboneEndpoint {
    pub const ALL: [BackboneEndpoint; 4] = [
        BackboneEndpoint::Block17_10Conv,
        BackboneEndpoint::Conv2d93,
        BackboneEndpoint::Block17_8Conv,
        BackboneEndpoint::Conv2d111,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneEndpoint::Block17_10Conv => "block17_10_conv",
            BackboneEndpoint::Conv2d93 => "conv2d_93",
            BackboneEndpoint::Block17_8Conv => "block17_8_conv",
            BackboneEndpoint::Conv2d111 => "conv2d_111",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            BackboneEndpoint::Block17_10Conv | BackboneEndpoint::Block17_8Conv => 1088,
            BackboneEndpoint::Conv2d93 => 192,
            BackboneEndpoint::Conv2d111 => 160,
        }
    }

    pub fn out_shape(self) -> [usize; 3] {
        [FEATURE_SIDE, FEATURE_SIDE, self.channels()]
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for BackboneEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneEndpoint {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| HeadError::UnknownEndpoint(s.to_owned()))
    }
}

/// Source of `17×17×C` endpoint feature maps.
pub trait Backbone: Send + Sync {
    /// Feature map of shape `[17, 17, C]` for a preprocessed image.
    fn extract(&self, img: &ImageTensor, endpoint: BackboneEndpoint) -> Result<Tensor<f32>>;

    fn trainable(&self) -> bool;

    fn endpoints(&self) -> Vec<BackboneEndpoint>;

    /// Stable identifier recorded with predictions and training runs.
    fn id(&self) -> String;

    /// Globally pooled features (`C` values), the input of every head.
    fn pooled(&self, img: &ImageTensor, endpoint: BackboneEndpoint) -> Result<Vec<f32>> {
        Ok(global_average_pool(&self.extract(img, endpoint)?)?.into_data())
    }
}

/// Deterministic, non-trainable stand-in for a pretrained network:
/// average-pool to `17×17×3`, then a fixed seeded projection `3 → C` per
/// endpoint followed by ReLU.
#[derive(Debug, Clone)]
pub struct StandinBackbone {
    seed: u64,
    projections: HashMap<BackboneEndpoint, Vec<f32>>,
}

pub fn standin_backbone(seed: u64) -> StandinBackbone {
    StandinBackbone::new(seed)
}

impl StandinBackbone {
    pub fn new(seed: u64) -> Self {
        let projections = BackboneEndpoint::ALL
            .into_iter()
            .map(|e| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, e.index()));
                let p = (0..3 * e.channels()).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
                (e, p)
            })
            .collect();
        Self { seed, projections }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Adaptive average pooling of an image to `side × side × 3`. Cell `i`
/// covers rows `floor(i·H/side) .. ceil((i+1)·H/side)`.
pub fn adaptive_pool(img: &ImageTensor, side: usize) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let bounds = |i: usize, n: usize| (i * n / side, ((i + 1) * n).div_ceil(side));
    let mut out = Vec::with_capacity(side * side * 3);
    for cy in 0..side {
        let (y0, y1) = bounds(cy, h);
        for cx in 0..side {
            let (x0, x1) = bounds(cx, w);
            let mut acc = [0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.pixel(y, x);
                    for c in 0..3 {
                        acc[c] += f64::from(p[c]);
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            out.extend(acc.iter().map(|a| (a / n) as f32));
        }
    }
    out
}

impl Backbone for StandinBackbone {
    fn extract(&self, img: &ImageTensor, endpoint: BackboneEndpoint) -> Result<Tensor<f32>> {
        if img.height() != MODEL_SIDE || img.width() != MODEL_SIDE {
            return Err(HeadError::WrongInputSize {
                expected: MODEL_SIDE,
                height: img.height(),
                width: img.width(),
            });
        }
        let pooled = adaptive_pool(img, FEATURE_SIDE);
        let proj = &self.projections[&endpoint];
        let c = endpoint.channels();
        let mut out = vec![0f32; FEATURE_SIDE * FEATURE_SIDE * c];
        for (px, dst) in pooled.chunks_exact(3).zip(out.chunks_exact_mut(c)) {
            for (j, &v) in px.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (d, &p) in dst.iter_mut().zip(&proj[j * c..(j + 1) * c]) {
                    *d += v * p;
                }
            }
            dst.iter_mut().for_each(|d| *d = d.max(0.0));
        }
        Ok(Tensor::new(endpoint.out_shape().to_vec(), out)?)
    }

    fn trainable(&self) -> bool {
        false
    }

    fn endpoints(&self) -> Vec<BackboneEndpoint> {
        BackboneEndpoint::ALL.to_vec()
    }

    fn id(&self) -> String {
        format!("standin-{}", self.seed)
    }
}

/// Backbone backed by an archive of precomputed feature maps, keyed by the
/// content digest of the image and the endpoint name (`"{digest}/{endpoint}"`).
#[derive(Debug, Clone, Default)]
pub struct ImportedBackbone {
    id: String,
    features: HashMap<String, Tensor<f32>>,
}

pub fn imported_backbone(container: &FmapContainer) -> Result<ImportedBackbone> {
    ImportedBackbone::from_container(container)
}

impl ImportedBackbone {
    pub fn entry_name(digest: &str, endpoint: BackboneEndpoint) -> String {
        format!("{digest}/{endpoint}")
    }

    pub fn from_container(container: &FmapContainer) -> Result<Self> {
        let mut features = HashMap::new();
        for e in &container.entries {
            let (_, ep) = e
                .name
                .rsplit_once('/')
                .ok_or_else(|| HeadError::BadCheckpoint(format!("feature entry {:?} lacks an endpoint", e.name)))?;
            let endpoint: BackboneEndpoint = ep.parse()?;
            if e.dims != endpoint.out_shape() {
                return Err(HeadError::BadCheckpoint(format!(
                    "feature {:?} has dims {:?}, expected {:?}",
                    e.name,
                    e.dims,
                    endpoint.out_shape()
                )));
            }
            features.insert(e.name.clone(), Tensor::new(e.dims.clone(), e.data.clone())?);
        }
        let id = container
            .metadata
            .get("backbone_id")
            .cloned()
            .unwrap_or_else(|| "imported".to_owned());
        Ok(Self { id, features })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&fmap_read(path)?)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl Backbone for ImportedBackbone {
    fn extract(&self, img: &ImageTensor, endpoint: BackboneEndpoint) -> Result<Tensor<f32>> {
        let digest = img.digest();
        self.features
            .get(&Self::entry_name(&digest, endpoint))
            .cloned()
            .ok_or(HeadError::MissingFeature { image: digest, endpoint })
    }

    fn trainable(&self) -> bool {
        false
    }

    fn endpoints(&self) -> Vec<BackboneEndpoint> {
        let mut eps: Vec<_> = BackboneEndpoint::ALL
            .into_iter()
            .filter(|e| self.features.keys().any(|k| k.ends_with(&format!("/{e}"))))
            .collect();
        eps.dedup();
        eps
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

// ---------------------------------------------------------------------------
// Head specifications
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Genus,
    Aedes,
    Anopheles,
    Culex,
    SpeciesOnly,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Genus,
        HeadKind::Aedes,
        HeadKind::Anopheles,
        HeadKind::Culex,
        HeadKind::SpeciesOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Genus => "genus",
            HeadKind::Aedes => "aedes",
            HeadKind::Anopheles => "anopheles",
            HeadKind::Culex => "culex",
            HeadKind::SpeciesOnly => "species_only",
        }
    }

    /// The species head for a genus.
    pub fn for_genus(genus: Genus) -> Self {
        match genus {
            Genus::Aedes => HeadKind::Aedes,
            Genus::Anopheles => HeadKind::Anopheles,
            Genus::Culex => HeadKind::Culex,
        }
    }

    /// Class names in output order.
    pub fn classes(self) -> Vec<String> {
        match self {
            HeadKind::Genus => Genus::ALL.iter().map(|g| g.name().to_owned()).collect(),
            HeadKind::Aedes => Genus::Aedes.species().iter().map(|s| s.name().to_owned()).collect(),
            HeadKind::Anopheles => Genus::Anopheles.species().iter().map(|s| s.name().to_owned()).collect(),
            HeadKind::Culex => Genus::Culex.species().iter().map(|s| s.name().to_owned()).collect(),
            HeadKind::SpeciesOnly => Species::names(),
        }
    }

    /// Class index of a species label under this head, if it has one.
    pub fn class_of(self, species: Species) -> Option<usize> {
        match self {
            HeadKind::Genus => Some(species.genus().index()),
            HeadKind::SpeciesOnly => Some(species.index()),
            k => (HeadKind::for_genus(species.genus()) == k).then(|| species.index_in_genus()),
        }
    }

    pub fn spec(self) -> HeadSpec {
        let (endpoint, dense, concat, classes): (_, &[usize], &[usize], _) = match self {
            HeadKind::Genus => (BackboneEndpoint::Block17_10Conv, &[512, 256, 128, 256], &[1, 2, 3, 4], 3),
            HeadKind::Aedes => (BackboneEndpoint::Conv2d93, &[512, 512, 256, 128], &[1, 4], 3),
            HeadKind::Anopheles => (BackboneEndpoint::Block17_8Conv, &[512, 512, 256, 256, 256], &[], 3),
            HeadKind::Culex => (BackboneEndpoint::Conv2d111, &[512, 128, 256, 512, 256], &[1, 2, 3, 4, 5], 3),
            HeadKind::SpeciesOnly => (BackboneEndpoint::Block17_10Conv, &[512, 256, 128, 256], &[1, 2, 3, 4], 9),
        };
        HeadSpec {
            kind: self,
            endpoint,
            dense: dense.to_vec(),
            concat: concat.to_vec(),
            num_classes: classes,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == key || (key == "species" && *k == HeadKind::SpeciesOnly))
            .ok_or_else(|| HeadError::UnknownSpec(s.to_owned()))
    }
}

/// Declarative description of a head: hidden dense widths in order, the
/// 1-based dense layers feeding the concat (empty: the last dense layer
/// feeds the classifier directly) and the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub endpoint: BackboneEndpoint,
    pub dense: Vec<usize>,
    pub concat: Vec<usize>,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn input_width(&self) -> usize {
        self.endpoint.channels()
    }

    /// Width of the classifier input.
    pub fn classifier_width(&self) -> usize {
        if self.concat.is_empty() {
            *self.dense.last().expect("at least one dense layer")
        } else {
            self.concat.iter().map(|&i| self.dense[i - 1]).sum()
        }
    }

    /// The five registered specs, and nothing else, can be built.
    pub fn validate(&self) -> Result<()> {
        if HeadKind::ALL.iter().any(|k| k.spec() == *self) {
            Ok(())
        } else {
            Err(HeadError::UnknownSpec(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOptions {
    pub dropout_rate: f64,
    pub batch_norm: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            dropout_rate: 0.3,
            batch_norm: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Head model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct Hidden<T> {
    dense: Dense<T>,
    bn: Option<BatchNorm<T>>,
    dropout: Dropout<T>,
    pre_relu: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub layer: String,
    pub size_in: String,
    pub size_out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadAudit {
    pub head: HeadKind,
    pub rows: Vec<AuditRow>,
    pub notes: Vec<String>,
}

impl fmt::Display for HeadAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} head", self.head)?;
        let w = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let wi = self.rows.iter().map(|r| r.size_in.len()).max().unwrap_or(7).max(7);
        writeln!(f, "  {:<w$}  {:<wi$}  size out", "layer", "size in")?;
        for r in &self.rows {
            writeln!(f, "  {:<w$}  {:<wi$}  {}", r.layer, r.size_in, r.size_out)?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

const CULEX_NOTE: &str = "the reference Culex listing prints dense_5 with input 256 and a concat width of 2484; \
     neither follows from its own layer widths (dense_4 emits 512), so dense_5 is built 512->256 and \
     concat(dense_1..dense_5) is 512+128+256+512+256 = 1664";

/// A trainable head. Generic over the scalar so gradient checks can run
/// the same code in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel<T> {
    spec: HeadSpec,
    options: HeadOptions,
    hidden: Vec<Hidden<T>>,
    output: Dense<T>,
    feature_hw: Option<(usize, usize)>,
}

pub fn build_head<T: Scalar>(spec: &HeadSpec, seed: u64) -> Result<HeadModel<T>> {
    HeadModel::new(spec, HeadOptions::default(), seed)
}

impl<T: Scalar> HeadModel<T> {
    pub fn new(spec: &HeadSpec, options: HeadOptions, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !(0.0..1.0).contains(&options.dropout_rate) {
            return Err(HeadError::BadCheckpoint(format!("dropout rate {}", options.dropout_rate)));
        }
        let mut in_dim = spec.input_width();
        let mut hidden = Vec::with_capacity(spec.dense.len());
        for (i, &out) in spec.dense.iter().enumerate() {
            let name = format!("dense_{}", i + 1);
            hidden.push(Hidden {
                dense: Dense::glorot(&name, in_dim, out, Activation::None, mix_seed(seed, i as u64)),
                bn: options.batch_norm.then(|| BatchNorm::new(&format!("batch_norm_{}", i + 1), out)),
                dropout: Dropout::new(options.dropout_rate),
                pre_relu: None,
            });
            in_dim = out;
        }
        let output = Dense::glorot(
            "softmax",
            spec.classifier_width(),
            spec.num_classes,
            Activation::None,
            mix_seed(seed, spec.dense.len() as u64),
        );
        Ok(Self {
            spec: spec.clone(),
            options,
            hidden,
            output,
            feature_hw: None,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn options(&self) -> HeadOptions {
        self.options
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn endpoint(&self) -> BackboneEndpoint {
        self.spec.endpoint
    }

    pub fn classes(&self) -> Vec<String> {
        self.spec.kind.classes()
    }

    /// Layer-by-layer sizes read off the built layers.
    pub fn audit(&self) -> HeadAudit {
        let c = self.spec.endpoint.channels();
        let mut rows = vec![
            AuditRow {
                layer: self.spec.endpoint.name().to_owned(),
                size_in: "-".into(),
                size_out: format!("(17, 17, {c})"),
            },
            AuditRow {
                layer: "global_average_pooling".into(),
                size_in: format!("(17, 17, {c})"),
                size_out: format!("(1, {c})"),
            },
        ];
        for (i, h) in self.hidden.iter().enumerate() {
            rows.push(AuditRow {
                layer: format!("dense_{}", i + 1),
                size_in: h.dense.in_dim.to_string(),
                size_out: h.dense.out_dim.to_string(),
            });
        }
        if !self.spec.concat.is_empty() {
            let names: Vec<String> = self.spec.concat.iter().map(|i| format!("dense_{i}")).collect();
            let width: usize = self.spec.concat.iter().map(|&i| self.hidden[i - 1].dense.out_dim).sum();
            rows.push(AuditRow {
                layer: "concat_1".into(),
                size_in: format!("({})", names.join(", ")),
                size_out: width.to_string(),
            });
        }
        rows.push(AuditRow {
            layer: "softmax".into(),
            size_in: self.output.in_dim.to_string(),
            size_out: self.output.out_dim.to_string(),
        });
        let notes = if self.spec.kind == HeadKind::Culex {
            vec![CULEX_NOTE.to_owned()]
        } else {
            Vec::new()
        };
        HeadAudit {
            head: self.spec.kind,
            rows,
            notes,
        }
    }

    /// `(layer, in, out)` for every dense layer, classifier last.
    pub fn dense_dims(&self) -> Vec<(String, usize, usize)> {
        self.hidden
            .iter()
            .map(|h| &h.dense)
            .chain(std::iter::once(&self.output))
            .map(|d| {
                let name = d.weights.name.trim_end_matches("/kernel").to_owned();
                (name, d.in_dim, d.out_dim)
            })
            .collect()
    }

    fn block_mode(mode: Mode, i: usize) -> Mode {
        match mode {
            Mode::Train { seed } => Mode::Train {
                seed: mix_seed(seed, i as u64),
            },
            Mode::Eval => Mode::Eval,
        }
    }

    fn classifier_input(&self, outs: &[Tensor<T>]) -> Result<Tensor<T>> {
        if self.spec.concat.is_empty() {
            Ok(outs.last().expect("hidden layers").clone())
        } else {
            let parts: Vec<&Tensor<T>> = self.spec.concat.iter().map(|&i| &outs[i - 1]).collect();
            Ok(concat_rows(&parts)?)
        }
    }

    /// Logits for pooled features `[B, C]`, recording what backward needs.
    pub fn forward_pooled(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for (i, blk) in self.hidden.iter_mut().enumerate() {
            let mut z = blk.dense.forward(&h)?;
            if let Some(bn) = blk.bn.as_mut() {
                z = bn.forward(&z, mode)?;
            }
            let a = relu(&z);
            blk.pre_relu = Some(z);
            h = blk.dropout.forward(&a, Self::block_mode(mode, i));
            outs.push(h.clone());
        }
        let head_in = self.classifier_input(&outs)?;
        self.feature_hw = None;
        Ok(self.output.forward(&head_in)?)
    }

    /// Logits for feature maps `[H, W, C]` or `[B, H, W, C]`.
    pub fn forward_features(&mut self, f: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pooled = global_average_pool(f)?;
        let logits = self.forward_pooled(&pooled, mode)?;
        let s = f.shape();
        self.feature_hw = Some((s[s.len() - 3], s[s.len() - 2]));
        Ok(logits)
    }

    fn backward_impl(&mut self, grad_logits: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let g_in = if accumulate {
            self.output.backward(grad_logits)?
        } else {
            self.output.backward_input(grad_logits)?
        };
        let n = self.hidden.len();
        let mut from_head: Vec<Option<Tensor<T>>> = vec![None; n];
        if self.spec.concat.is_empty() {
            from_head[n - 1] = Some(g_in);
        } else {
            let widths: Vec<usize> = self.spec.concat.iter().map(|&i| self.spec.dense[i - 1]).collect();
            for (&i, g) in self.spec.concat.iter().zip(split_rows(&g_in, &widths)?) {
                from_head[i - 1] = Some(g);
            }
        }
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..n).rev() {
            let g = match (from_head[i].take(), carry.take()) {
                (Some(a), Some(b)) => add(a, &b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("every hidden layer reaches the classifier"),
            };
            let blk = &mut self.hidden[i];
            let g = blk.dropout.backward(&g)?;
            let pre = blk.pre_relu.as_ref().ok_or(NnError::GraphNotRecorded)?;
            let mut g = relu_backward(pre, &g);
            if let Some(bn) = blk.bn.as_mut() {
                g = if accumulate { bn.backward(&g)? } else { bn.backward_input(&g)? };
            }
            g = if accumulate {
                blk.dense.backward(&g)?
            } else {
                blk.dense.backward_input(&g)?
            };
            carry = Some(g);
        }
        Ok(carry.expect("at least one hidden layer"))
    }

    /// Accumulates parameter gradients; returns d loss / d pooled input.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(grad_logits, true)
    }

    /// Gradient with respect to the pooled input, parameters untouched.
    pub fn input_gradient(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(grad_logits, false)
    }

    /// Gradient with respect to the feature map of the last
    /// [`forward_features`](Self::forward_features) call.
    pub fn feature_gradient(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.feature_hw.ok_or(NnError::GraphNotRecorded)?;
        let g = self.backward_impl(grad_logits, false)?;
        Ok(global_average_pool_backward(&g, h, w))
    }

    /// Sign pattern of every recorded pre-activation, for spotting
    /// finite-difference steps that cross a ReLU kink.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        self.hidden
            .iter()
            .filter_map(|b| b.pre_relu.as_ref())
            .flat_map(|z| z.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    /// Eval-mode logits without recording anything.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for blk in &self.hidden {
            let mut z = blk.dense.apply(&h)?;
            if let Some(bn) = &blk.bn {
                z = bn.apply_eval(&z)?;
            }
            h = relu(&z);
            outs.push(h.clone());
        }
        Ok(self.output.apply(&self.classifier_input(&outs)?)?)
    }

    /// Eval-mode class probabilities for pooled features `[B, C]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for h in &self.hidden {
            out.extend(h.dense.params());
            if let Some(bn) = &h.bn {
                out.extend(bn.params());
            }
        }
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for h in &mut self.hidden {
            out.extend(h.dense.params_mut());
            if let Some(bn) = &mut h.bn {
                out.extend(bn.params_mut());
            }
        }
        out.extend(self.output.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn clear_caches(&mut self) {
        for h in &mut self.hidden {
            h.dense.clear_cache();
            if let Some(bn) = &mut h.bn {
                bn.clear_cache();
            }
            h.dropout.clear_cache();
            h.pre_relu = None;
        }
        self.output.clear_cache();
        self.feature_hw = None;
    }

    /// Every learned value: parameters, then batch-norm running statistics.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let to_f64 = |v: &[T]| v.iter().map(|x| x.to_f64().expect("finite")).collect::<Vec<_>>();
        let mut out: Vec<_> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.shape.clone(), to_f64(&p.value)))
            .collect();
        for (i, h) in self.hidden.iter().enumerate() {
            if let Some(bn) = &h.bn {
                let name = format!("batch_norm_{}", i + 1);
                out.push((format!("{name}/moving_mean"), vec![bn.dim], to_f64(&bn.running_mean)));
                out.push((format!("{name}/moving_variance"), vec![bn.dim], to_f64(&bn.running_var)));
            }
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() {
            return Err(HeadError::BadCheckpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                state.len()
            )));
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let (dims, data) = state
                .get(name)
                .ok_or_else(|| HeadError::BadCheckpoint(format!("missing tensor {name:?}")))?;
            if dims != shape {
                return Err(HeadError::BadCheckpoint(format!(
                    "{name:?} has dims {dims:?}, expected {shape:?}"
                )));
            }
            Ok(data.iter().map(|&v| T::from_f64_lossy(v)).collect())
        };
        for p in self.params_mut() {
            let v = lookup(&p.name, &p.shape)?;
            p.value = v;
        }
        for (i, h) in self.hidden.iter_mut().enumerate() {
            if let Some(bn) = &mut h.bn {
                let name = format!("batch_norm_{}", i + 1);
                bn.running_mean = lookup(&format!("{name}/moving_mean"), &[bn.dim])?;
                bn.running_var = lookup(&format!("{name}/moving_variance"), &[bn.dim])?;
            }
        }
        self.clear_caches();
        Ok(())
    }

    /// Same head with every value converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> HeadModel<U> {
        let mut out = HeadModel::<U>::new(&self.spec, self.options, 0).expect("spec already validated");
        let state = self.state().into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        out.load_state(&state).expect("identical layout");
        out
    }

    /// SHA-256 over every learned value in `f32` little-endian form.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, data) in self.state() {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in data {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn add<T: Scalar>(mut a: Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = *x + y;
    }
    a
}

/// Metadata stored alongside checkpointed parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub backbone: Option<String>,
}

impl HeadModel<f32> {
    pub fn to_checkpoint(&self, meta: &CheckpointMeta) -> FmapContainer {
        let mut c = FmapContainer::default()
            .with_metadata("format", "culicid-head")
            .with_metadata("head_name", self.kind().name())
            .with_metadata("epoch", meta.epoch.to_string())
            .with_metadata("seed", meta.seed.to_string())
            .with_metadata("dropout_rate", self.options.dropout_rate.to_string())
            .with_metadata("batch_norm", self.options.batch_norm.to_string());
        if let Some(b) = &meta.backbone {
            c.metadata.insert("backbone".into(), b.clone());
        }
        for (name, dims, data) in self.state() {
            c.push(NamedTensor::new(name, dims, data.into_iter().map(|v| v as f32).collect()));
        }
        c
    }

    pub fn from_checkpoint(c: &FmapContainer) -> Result<(Self, CheckpointMeta)> {
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .ok_or_else(|| HeadError::BadCheckpoint(format!("missing metadata {k:?}")))
        };
        let kind: HeadKind = meta("head_name")?.parse()?;
        let bad = |k: &str| HeadError::BadCheckpoint(format!("unparsable metadata {k:?}"));
        let options = HeadOptions {
            dropout_rate: meta("dropout_rate")?.parse().map_err(|_| bad("dropout_rate"))?,
            batch_norm: meta("batch_norm")?.parse().map_err(|_| bad("batch_norm"))?,
        };
        let info = CheckpointMeta {
            epoch: meta("epoch")?.parse().map_err(|_| bad("epoch"))?,
            seed: meta("seed")?.parse().map_err(|_| bad("seed"))?,
            backbone: c.metadata.get("backbone").cloned(),
        };
        let mut model = HeadModel::new(&kind.spec(), options, 0)?;
        let state = c
            .entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    (e.dims.clone(), e.data.iter().map(|&v| f64::from(v)).collect()),
                )
            })
            .collect();
        model.load_state(&state)?;
        Ok((model, info))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint(&fmap_read(path)?)
    }

    /// Probabilities for one feature map.
    pub fn predict_features(&self, f: &Tensor<f32>) -> Result<Vec<f64>> {
        let pooled = global_average_pool(f)?;
        self.predict_pooled(pooled.data())
    }

    pub fn predict_pooled(&self, pooled: &[f32]) -> Result<Vec<f64>> {
        let x = Tensor::matrix(1, pooled.len(), pooled.to_vec())?;
        let logits = self.cast_logits(&x)?;
        Ok(crate::nn::softmax(&logits))
    }

    // softmax in f64 so probabilities sum to one at f64 precision
    fn cast_logits(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.data().iter().map(|&v| f64::from(v)).collect())
    }

    /// Probabilities for a preprocessed image.
    pub fn predict_image(&self, img: &ImageTensor, backbone: &dyn Backbone) -> Result<Vec<f64>> {
        self.predict_pooled(&backbone.pooled(img, self.endpoint())?)
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierarchicalResult {
    pub genus_probabilities: Vec<f64>,
    /// Within-genus probabilities from the routed species head.
    pub species_probabilities: Vec<f64>,
    pub label: TaxonLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectResult {
    pub probabilities: Vec<f64>,
    pub label: TaxonLabel,
}

/// Argmax genus, lowest index on ties.
pub fn route_genus(genus_scores: &[f64]) -> Genus {
    Genus::from_index(argmax(genus_scores)).expect("three genus scores")
}

fn expect_kind(model: &HeadModel<f32>, kind: HeadKind) -> Result<()> {
    if model.kind() == kind {
        Ok(())
    } else {
        Err(HeadError::WrongHead {
            expected: kind,
            actual: model.kind(),
        })
    }
}

/// Genus head, then the species head of the winning genus.
pub fn classify_hierarchical(
    img: &ImageTensor,
    genus_model: Option<&HeadModel<f32>>,
    species_models: &BTreeMap<Genus, HeadModel<f32>>,
    backbone: &dyn Backbone,
) -> Result<HierarchicalResult> {
    let genus_model = genus_model.ok_or_else(|| HeadError::ModelNotLoaded("genus".into()))?;
    expect_kind(genus_model, HeadKind::Genus)?;
    let genus_probabilities = genus_model.predict_image(img, backbone)?;
    let genus = route_genus(&genus_probabilities);
    let species_model = species_models
        .get(&genus)
        .ok_or_else(|| HeadError::ModelNotLoaded(genus.name().into()))?;
    expect_kind(species_model, HeadKind::for_genus(genus))?;
    let species_probabilities = species_model.predict_image(img, backbone)?;
    let species = Species::in_genus(genus, argmax(&species_probabilities)).expect("three species per genus");
    Ok(HierarchicalResult {
        genus_probabilities,
        species_probabilities,
        label: species.into(),
    })
}

/// Nine-way species head; the genus follows from the species.
pub fn classify_direct(
    img: &ImageTensor,
    species_only: Option<&HeadModel<f32>>,
    backbone: &dyn Backbone,
) -> Result<DirectResult> {
    let model = species_only.ok_or_else(|| HeadError::ModelNotLoaded("species_only".into()))?;
    expect_kind(model, HeadKind::SpeciesOnly)?;
    let probabilities = model.predict_image(img, backbone)?;
    let species = Species::from_index(argmax(&probabilities)).expect("nine species");
    Ok(DirectResult {
        probabilities,
        label: species.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Scale;
    use proptest::prelude::*;

    fn gray(v: f32) -> ImageTensor {
        ImageTensor::filled(MODEL_SIDE, MODEL_SIDE, Scale::Unit, [v, v, v])
    }

    #[test]
    fn registry_shapes() {
        let expect = [
            ("block17_10_conv", 1088),
            ("conv2d_93", 192),
            ("block17_8_conv", 1088),
            ("conv2d_111", 160),
        ];
        for (e, (name, c)) in BackboneEndpoint::ALL.iter().zip(expect) {
            assert_eq!(e.name(), name);
            assert_eq!(e.out_shape(), [17, 17, c]);
            assert_eq!(name.parse::<BackboneEndpoint>().unwrap(), *e);
        }
    }

    #[test]
    fn standin_shapes_zero_and_determinism() {
        let b = standin_backbone(3);
        let img = gray(0.4);
        for e in BackboneEndpoint::ALL {
            assert_eq!(b.extract(&img, e).unwrap().shape(), &e.out_shape()[..]);
        }
        let zero = b.extract(&gray(0.0), BackboneEndpoint::Block17_10Conv).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let again = standin_backbone(3).extract(&img, BackboneEndpoint::Conv2d93).unwrap();
        assert_eq!(b.extract(&img, BackboneEndpoint::Conv2d93).unwrap(), again);
        assert!(!b.trainable());
        assert!(matches!(
            b.extract(&ImageTensor::filled(20, 20, Scale::Unit, [0.0; 3]), BackboneEndpoint::Conv2d93),
            Err(HeadError::WrongInputSize { .. })
        ));
    }

    #[test]
    fn adaptive_pool_covers_image() {
        let mut img = ImageTensor::filled(MODEL_SIDE, MODEL_SIDE, Scale::Unit, [0.0; 3]);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(298, 298, [0.0, 0.0, 1.0]);
        let p = adaptive_pool(&img, 17);
        // 299/17 is not integral: the first cell spans rows 0..18
        assert!((p[0] - 1.0 / (18.0 * 18.0)).abs() < 1e-7);
        assert!((p[p.len() - 1] - 1.0 / (18.0 * 18.0)).abs() < 1e-7);
    }

    #[test]
    fn imported_lookup_round_trip_and_missing() {
        let img = gray(0.25);
        let f = standin_backbone(1).extract(&img, BackboneEndpoint::Conv2d111).unwrap();
        let mut c = FmapContainer::default();
        c.push(NamedTensor::new(
            ImportedBackbone::entry_name(&img.digest(), BackboneEndpoint::Conv2d111),
            f.shape().to_vec(),
            f.data().to_vec(),
        ));
        let bytes = c.encode().unwrap();
        let b = imported_backbone(&FmapContainer::decode(&bytes).unwrap()).unwrap();
        let got = b.extract(&img, BackboneEndpoint::Conv2d111).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(&f));
        assert!(matches!(
            b.extract(&gray(0.5), BackboneEndpoint::Conv2d111),
            Err(HeadError::MissingFeature { .. })
        ));
        assert_eq!(b.endpoints(), vec![BackboneEndpoint::Conv2d111]);
    }

    #[test]
    fn conformance() {
        let expect: [(HeadKind, &[(usize, usize)], usize); 5] = [
            (HeadKind::Genus, &[(1088, 512), (512, 256), (256, 128), (128, 256), (1152, 3)], 1152),
            (HeadKind::Aedes, &[(192, 512), (512, 512), (512, 256), (256, 128), (640, 3)], 640),
            (
                HeadKind::Anopheles,
                &[(1088, 512), (512, 512), (512, 256), (256, 256), (256, 256), (256, 3)],
                256,
            ),
            (
                HeadKind::Culex,
                &[(160, 512), (512, 128), (128, 256), (256, 512), (512, 256), (1664, 3)],
                1664,
            ),
            (HeadKind::SpeciesOnly, &[(1088, 512), (512, 256), (256, 128), (128, 256), (1152, 9)], 1152),
        ];
        for (kind, dims, width) in expect {
            let m = build_head::<f32>(&kind.spec(), 0).unwrap();
            let got: Vec<(usize, usize)> = m.dense_dims().iter().map(|d| (d.1, d.2)).collect();
            assert_eq!(got, dims, "{kind}");
            assert_eq!(m.spec().classifier_width(), width);
            assert_eq!(m.audit().notes.is_empty(), kind != HeadKind::Culex);
        }
    }

    #[test]
    fn unknown_specs_rejected() {
        let mut spec = HeadKind::Genus.spec();
        spec.dense[0] = 500;
        assert!(matches!(build_head::<f32>(&spec, 0), Err(HeadError::UnknownSpec(_))));
        assert!("family".parse::<HeadKind>().is_err());
    }

    #[test]
    fn forward_matches_infer_in_eval_mode() {
        use rand::Rng;
        let mut m = HeadModel::<f64>::new(&HeadKind::Aedes.spec(), HeadOptions::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::matrix(3, 192, (0..3 * 192).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = m.forward_pooled(&x, Mode::Eval).unwrap();
        let b = m.logits(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_head::<f32>(&HeadKind::Culex.spec(), 11).unwrap();
        let c = m.to_checkpoint(&CheckpointMeta {
            epoch: 3,
            seed: 11,
            backbone: Some("standin-1".into()),
        });
        let bytes = c.encode().unwrap();
        let (back, meta) = HeadModel::from_checkpoint(&FmapContainer::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        assert_eq!(meta.epoch, 3);
        assert_eq!(c.metadata["head_name"], "culex");
    }

    #[test]
    fn seeds_change_weights_deterministically() {
        let a = build_head::<f32>(&HeadKind::Genus.spec(), 1).unwrap();
        let b = build_head::<f32>(&HeadKind::Genus.spec(), 1).unwrap();
        let c = build_head::<f32>(&HeadKind::Genus.spec(), 2).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn routing_examples() {
        assert_eq!(route_genus(&[0.1, 0.85, 0.05]), Genus::Anopheles);
        let third = 1.0 / 3.0;
        assert_eq!(route_genus(&[third, third, third]), Genus::Aedes);
    }

    #[test]
    fn direct_and_hierarchical_classification() {
        let backbone = standin_backbone(0);
        let img = gray(0.6);
        let direct = build_head::<f32>(&HeadKind::SpeciesOnly.spec(), 5).unwrap();
        let r = classify_direct(&img, Some(&direct), &backbone).unwrap();
        assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(r.label.genus(), r.label.species().genus());
        assert_eq!(classify_direct(&img, Some(&direct), &backbone).unwrap(), r);
        assert!(matches!(
            classify_direct(&img, None, &backbone),
            Err(HeadError::ModelNotLoaded(_))
        ));

        let genus = build_head::<f32>(&HeadKind::Genus.spec(), 6).unwrap();
        let mut species = BTreeMap::new();
        for g in Genus::ALL {
            species.insert(g, build_head::<f32>(&HeadKind::for_genus(g).spec(), 7).unwrap());
        }
        let h = classify_hierarchical(&img, Some(&genus), &species, &backbone).unwrap();
        assert_eq!(h.label.genus(), route_genus(&h.genus_probabilities));
        assert_eq!(h.species_probabilities.len(), 3);
        species.remove(&h.label.genus());
        assert!(matches!(
            classify_hierarchical(&img, Some(&genus), &species, &backbone),
            Err(HeadError::ModelNotLoaded(_))
        ));
    }

    #[test]
    fn one_hot_favouring_logits_pick_that_species() {
        let mut m = build_head::<f32>(&HeadKind::SpeciesOnly.spec(), 0).unwrap();
        let out = &mut m.output;
        out.weights.value.iter_mut().for_each(|w| *w = 0.0);
        out.bias.value = vec![0.0; 9];
        out.bias.value[Species::Stephensi.index()] = 10.0;
        let r = classify_direct(&gray(0.3), Some(&m), &standin_backbone(0)).unwrap();
        assert_eq!(r.label.species(), Species::Stephensi);
        assert_eq!(r.label.genus(), Genus::Anopheles);
    }

    proptest! {
        #[test]
        fn routing_invariant_under_monotone_rescaling(
            z in proptest::collection::vec(-5.0f64..5.0, 3),
            a in 0.1f64..10.0,
            b in -3.0f64..3.0,
        ) {
            let scaled: Vec<f64> = z.iter().map(|v| a * v + b).collect();
            let cubed: Vec<f64> = z.iter().map(|v| v.powi(3)).collect();
            prop_assert_eq!(route_genus(&z), route_genus(&scaled));
            prop_assert_eq!(route_genus(&z), route_genus(&cubed));
            prop_assert_eq!(route_genus(&z), route_genus(&crate::nn::softmax(&z)));
        }
    }
}

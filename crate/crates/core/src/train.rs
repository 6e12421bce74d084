//! Head training: categorical cross-entropy, Adam, the triangular cyclical
//! learning rate and the two-phase schedule with early stopping.
//!
//! The backbone is frozen during phase 1, so training runs on pooled
//! endpoint features extracted once up front ([`FeatureSet`]); dropout and
//! batch norm both act after pooling, which makes this exact.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::fmap::{fmap_write, FmapError};
use crate::heads::{Backbone, BackboneEndpoint, CheckpointMeta, HeadError, HeadModel, HeadOptions};
use crate::image::ImageTensor;
use crate::nn::{argmax, mix_seed, softmax_cross_entropy, Mode, NnError, Param, Scalar, Tensor, PROB_FLOOR};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("backbone fine-tuning is not supported; backbone {0} reports itself trainable")]
    TrainableBackbone(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fmap(#[from] FmapError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

/// `-Σ y_k · ln(clamp(p_k, 1e-12, 1))`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(TrainError::ShapeMismatch(format!("{} probabilities, {} targets", p.len(), y.len())));
    }
    Ok(-p
        .iter()
        .zip(y)
        .map(|(&pk, &yk)| yk * pk.clamp(PROB_FLOOR, 1.0).ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.89,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || self.epsilon <= 0.0 {
            return Err(TrainError::Config(format!("adam {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, kept in `f64` for every parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update from each parameter's accumulated
/// gradient; `t` is the 1-based step index.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(TrainError::Config("adam step index starts at 1".into()));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.value.len() != m.len()) {
        return Err(TrainError::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.len() {
            let g = p.grad[i].to_f64().expect("finite gradient");
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            p.value[i] = p.value[i] - T::from_f64(step).expect("finite step");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half cycle.
    pub step_size: usize,
}

impl ClrSchedule {
    pub fn new(step_size: usize) -> Self {
        Self {
            base_lr: 2e-7,
            max_lr: 2e-5,
            step_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.base_lr && self.base_lr < self.max_lr) || self.step_size == 0 {
            return Err(TrainError::Config(format!("clr {self:?}")));
        }
        Ok(())
    }
}

/// Triangular wave between `base_lr` and `max_lr` with period
/// `2·step_size`, starting at `base_lr`. Written as `(1-a)·base + a·max`
/// so both endpoints are hit exactly.
pub fn clr_at(iteration: usize, s: &ClrSchedule) -> f64 {
    let phase = iteration % (2 * s.step_size);
    let dist = if phase <= s.step_size { phase } else { 2 * s.step_size - phase };
    let a = dist as f64 / s.step_size as f64;
    (1.0 - a) * s.base_lr + a * s.max_lr
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStoppingConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        Self {
            patience: 50,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase1_epochs: usize,
    /// CLR half-cycle in iterations; `None` means 8 epochs' worth.
    pub step_size: Option<usize>,
    pub base_lr: f64,
    pub max_lr: f64,
    pub phase2_epochs: usize,
    pub phase2_lr: f64,
    pub early_stopping: EarlyStoppingConfig,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            phase1_epochs: 50,
            step_size: None,
            base_lr: 2e-7,
            max_lr: 2e-5,
            phase2_epochs: 50,
            phase2_lr: 1e-5,
            early_stopping: EarlyStoppingConfig::default(),
        }
    }
}

impl PhasePlan {
    /// Full-length schedule: 500 frozen epochs, then 1200 more.
    pub fn full_scale() -> Self {
        Self {
            phase1_epochs: 500,
            phase2_epochs: 1200,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub plan: PhasePlan,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            plan: PhasePlan::default(),
            batch_size: 32,
            dropout_rate: 0.3,
            batch_norm: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn head_options(&self) -> HeadOptions {
        HeadOptions {
            dropout_rate: self.dropout_rate,
            batch_norm: self.batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.plan.early_stopping.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TrainError::Config(format!("dropout rate {}", self.dropout_rate)));
        }
        if !(self.plan.phase2_lr > 0.0) {
            return Err(TrainError::Config("phase 2 learning rate must be positive".into()));
        }
        Ok(())
    }

    /// CLR schedule for a training set of `n` items.
    pub fn clr(&self, n: usize) -> ClrSchedule {
        let per_epoch = n.div_ceil(self.batch_size).max(1);
        ClrSchedule {
            base_lr: self.plan.base_lr,
            max_lr: self.plan.max_lr,
            step_size: self.plan.step_size.unwrap_or(8 * per_epoch),
        }
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Pooled endpoint features, one row per item, with class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub x: Vec<f32>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, row: &[f32], label: usize) -> Result<()> {
        if row.len() != self.dim {
            return Err(TrainError::ShapeMismatch(format!("row of {} for dim {}", row.len(), self.dim)));
        }
        self.x.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let t = Tensor::matrix(idx.len(), self.dim, data).expect("consistent rows");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Pools backbone features for labeled images (in parallel, output in
    /// input order).
    pub fn from_images<'a>(
        backbone: &dyn Backbone,
        endpoint: BackboneEndpoint,
        items: impl IntoParallelIterator<Item = (&'a ImageTensor, usize)>,
    ) -> Result<Self> {
        let rows: Vec<(Vec<f32>, usize)> = items
            .into_par_iter()
            .map(|(img, label)| backbone.pooled(img, endpoint).map(|f| (f, label)))
            .collect::<std::result::Result<_, _>>()?;
        let mut set = Self::new(endpoint.channels());
        for (r, l) in rows {
            set.push(&r, l)?;
        }
        Ok(set)
    }
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    cfg: EarlyStoppingConfig,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(cfg: EarlyStoppingConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records one epoch's monitored loss; returns whether it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.cfg.min_delta {
            self.best = loss;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.wait >= self.cfg.patience
    }

    pub fn reset_wait(&mut self) {
        self.wait = 0;
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseLabel {
    #[serde(rename = "phase1")]
    Phase1,
    #[serde(rename = "phase2")]
    Phase2,
    /// Phase 2 with a frozen backbone: head-only at the phase-2 rate.
    #[serde(rename = "phase2-degraded")]
    Phase2Degraded,
}

impl PhaseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseLabel::Phase1 => "phase1",
            PhaseLabel::Phase2 => "phase2",
            PhaseLabel::Phase2Degraded => "phase2-degraded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: PhaseLabel,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best monitored loss.
    pub model: HeadModel<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean cross-entropy and accuracy of the model in eval mode.
pub fn evaluate_set(model: &HeadModel<f32>, set: &FeatureSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(256) {
        let (x, y) = set.batch(chunk);
        let logits = model.logits(&x)?;
        let k = logits.cols();
        for (row, &t) in logits.data().chunks(k).zip(&y) {
            let z: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            let p = crate::nn::softmax(&z);
            loss -= p[t].max(PROB_FLOOR).ln();
            correct += usize::from(argmax(&p) == t);
        }
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Trains `head` on pooled features. Phase 1 uses the CLR schedule; phase
/// 2 uses the fixed phase-2 rate and, since every backbone shipped here is
/// frozen, stays head-only and is labeled `phase2-degraded`. Early
/// stopping monitors validation loss (training loss when there is no
/// validation data) and the best weights are returned.
pub fn fit(
    mut head: HeadModel<f32>,
    backbone: &dyn Backbone,
    train: &FeatureSet,
    validation: &FeatureSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training set"));
    }
    if backbone.trainable() && cfg.plan.phase2_epochs > 0 {
        return Err(TrainError::TrainableBackbone(backbone.id()));
    }
    let dim = head.spec().input_width();
    for set in [train, validation] {
        if set.dim != dim && !set.is_empty() {
            return Err(TrainError::ShapeMismatch(format!("features of dim {} for head input {dim}", set.dim)));
        }
        if let Some(&bad) = set.labels.iter().find(|&&l| l >= head.num_classes()) {
            return Err(TrainError::ShapeMismatch(format!("label {bad} for {} classes", head.num_classes())));
        }
    }
    let clr = cfg.clr(train.len());
    clr.validate()?;

    let mut adam = AdamState::new();
    let mut stopper = EarlyStopping::new(cfg.plan.early_stopping);
    let mut best = head.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut iteration = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let phases = [
        (PhaseLabel::Phase1, cfg.plan.phase1_epochs),
        (PhaseLabel::Phase2Degraded, cfg.plan.phase2_epochs),
    ];
    let mut epoch = 0;
    for (phase, epochs) in phases {
        stopper.reset_wait();
        if phase != PhaseLabel::Phase1 && epochs > 0 {
            // continue from the best phase-1 weights
            head = best.clone();
        }
        for _ in 0..epochs {
            epoch += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
            for idx in order.chunks(cfg.batch_size) {
                iteration += 1;
                lr = match phase {
                    PhaseLabel::Phase1 => clr_at(iteration - 1, &clr),
                    _ => cfg.plan.phase2_lr,
                };
                let (x, y) = train.batch(idx);
                head.zero_grad();
                let mode = Mode::Train {
                    seed: mix_seed(cfg.seed ^ 0x5EED, iteration as u64),
                };
                let logits = head.forward_pooled(&x, mode)?;
                let (loss, probs, grad) = softmax_cross_entropy(&logits, &y)?;
                if !loss.is_finite() {
                    return Err(TrainError::DivergedLoss { epoch });
                }
                head.backward(&grad)?;
                adam_step(&mut head.params_mut(), &mut adam, lr, &cfg.adam, iteration as u64)?;
                loss_sum += f64::from(loss) * idx.len() as f64;
                let k = probs.cols();
                correct += probs
                    .data()
                    .chunks(k)
                    .zip(&y)
                    .filter(|(p, &t)| argmax(p) == t)
                    .count();
            }
            head.clear_caches();
            let train_loss = loss_sum / train.len() as f64;
            let train_acc = correct as f64 / train.len() as f64;
            let (val_loss, val_acc) = evaluate_set(&head, validation)?;
            let monitored = if validation.is_empty() { train_loss } else { val_loss };
            if !monitored.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            history.push(EpochRecord {
                epoch,
                phase,
                lr,
                train_loss,
                val_loss,
                train_acc,
                val_acc,
            });
            if stopper.observe(monitored) {
                best = head.clone();
                best_epoch = epoch;
            }
            if stopper.should_stop() {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Writes `config.json`, `history.csv` and `model.fmap` into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome, backbone_id: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config = serde_json::json!({
        "head": outcome.model.kind(),
        "backbone": backbone_id,
        "train": cfg,
    });
    std::fs::File::create(dir.join("config.json"))?.write_all(&serde_json::to_vec_pretty(&config)?)?;
    let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
    w.write_record(["epoch", "phase", "lr", "train_loss", "val_loss", "train_acc", "val_acc"])?;
    for r in &outcome.history {
        w.write_record([
            r.epoch.to_string(),
            r.phase.as_str().to_owned(),
            format!("{:e}", r.lr),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.train_acc.to_string(),
            r.val_acc.to_string(),
        ])?;
    }
    w.flush()?;
    let meta = CheckpointMeta {
        epoch: outcome.best_epoch,
        seed: cfg.seed,
        backbone: Some(backbone_id.to_owned()),
    };
    fmap_write(&outcome.model.to_checkpoint(&meta), dir.join("model.fmap"))?;
    Ok(())
}

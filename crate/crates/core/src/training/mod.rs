//! Pretraining, fine-tuning, evaluation and the masking-ratio sweep.

mod adamw;
mod metrics;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use metrics::{EpochMetrics, MetricsRecord, METRICS_HEADER};

use crate::model::tree::Tree;
use crate::model::{
    self, bind, classify_patches, pretrain_loss, EncoderParams, Model, ModelConfig, ModelError,
    Params,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::patching::{
    build_masking_plan, compute_valid_set, split_into_patches, ImageGrid, MaskImage,
    MaskingStrategy, PatchError, PatchGrid,
};
use crate::rng::{self, stream};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("sample {sample}: {source}")]
    Sample { sample: usize, source: PatchError },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("class {class} has no samples to draw a stratified subset from")]
    Stratification { class: usize },
    #[error("label {label} is outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid run config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup_epochs`, then cosine decay to zero.
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown schedule `{other}` (expected constant or cosine)")),
        }
    }
}

/// Hyperparameters of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub optimizer: AdamWConfig,
    pub sigma: f64,
    pub strategy: MaskingStrategy,
    pub overlap_threshold: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub warmup_epochs: usize,
    /// Fine-tuning only.
    pub label_fraction: f64,
    /// Fine-tuning only: train the head on a fixed encoder.
    pub freeze_encoder: bool,
}

impl RunConfig {
    pub fn pretrain_defaults() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            base_lr: 1.5e-4,
            optimizer: AdamWConfig::default(),
            sigma: 0.75,
            strategy: MaskingStrategy::RegionGuided,
            overlap_threshold: 0.0,
            seed: 0,
            schedule: Schedule::Constant,
            warmup_epochs: 0,
            label_fraction: 1.0,
            freeze_encoder: false,
        }
    }

    pub fn finetune_defaults() -> Self {
        Self {
            epochs: 30,
            ..Self::pretrain_defaults()
        }
    }

    /// `base_lr · batch_size / 256`
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Learning rate for optimizer step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        let peak = self.peak_lr();
        match self.schedule {
            Schedule::Constant => peak,
            Schedule::Cosine => {
                let warmup = self.warmup_epochs * steps_per_epoch;
                if step < warmup {
                    peak * (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let progress = (step - warmup) as f64 / span;
                    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad(format!("sigma {} must lie strictly between 0 and 1", self.sigma));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction {} must lie in (0, 1]", self.label_fraction));
        }
        if !(0.0..1.0).contains(&self.overlap_threshold) {
            return bad(format!("overlap_threshold {} must lie in [0, 1)", self.overlap_threshold));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be a finite non-negative number", self.base_lr));
        }
        Ok(())
    }
}

/// Image patches and organ-mask validity. Carries no label, so pretraining
/// cannot read one.
#[derive(Clone, Debug)]
pub struct UnlabeledSample {
    pub patches: PatchGrid,
    pub valid: Vec<usize>,
}

impl UnlabeledSample {
    pub fn new(img: &ImageGrid, mask: &MaskImage, patch_size: usize, threshold: f64) -> std::result::Result<Self, PatchError> {
        mask.ensure_matches(img)?;
        Ok(Self {
            patches: split_into_patches(img, patch_size)?,
            valid: compute_valid_set(mask, patch_size, threshold)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub patches: PatchGrid,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(img: &ImageGrid, label: usize, patch_size: usize) -> std::result::Result<Self, PatchError> {
        Ok(Self {
            patches: split_into_patches(img, patch_size)?,
            label,
        })
    }
}

/// Output of a training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub optimizer: AdamWState,
    pub metrics: MetricsRecord,
}

fn zeros_like(params: &Params) -> Params {
    params.map("", &mut |_, t| Tensor::zeros(t.shape()))
}

fn accumulate(acc: &mut Params, vars: &Model<Var>, grads: &crate::numerics::Gradients) {
    let handles = vars.named_leaves();
    let mut i = 0;
    acc.visit_mut("", &mut |_, t| {
        if let Some(g) = grads.get(*handles[i].1) {
            t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        i += 1;
    });
}

fn scale(acc: &mut Params, factor: f64) {
    acc.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= factor));
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    order
}

/// Self-supervised reconstruction training of a fresh encoder and decoder.
pub fn pretrain(samples: &[UnlabeledSample], cfg: &ModelConfig, run: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    run.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = model::init_parameters(cfg, run.seed);
    params.head = None;
    let mut optimizer = AdamWState::new(&params, run.optimizer.clone(), run.peak_lr());
    let mut metrics = MetricsRecord::default();

    let steps_per_epoch = samples.len().div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let mut step = 0;
    for epoch in 1..=run.epochs {
        let started = Instant::now();
        let order = shuffled(samples.len(), rng::derive_seed(run.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut clamped = 0;
        for batch in order.chunks(run.batch_size) {
            let mut grads = zeros_like(&params);
            for &idx in batch {
                let sample = &samples[idx];
                let plan_seed = rng::derive_seed(run.seed, &[stream::PLAN, epoch as u64, idx as u64]);
                let plan = build_masking_plan(sample.patches.len(), &sample.valid, run.sigma, run.strategy, plan_seed)
                    .map_err(|source| TrainError::Sample { sample: idx, source })?;
                clamped += usize::from(plan.clamped);
                let mut tape = Tape::new();
                let vars = bind(&mut tape, &params, |_| true);
                let loss = pretrain_loss(&mut tape, &sample.patches, &plan, &vars, cfg)?;
                loss_sum += tape.value(loss).item();
                let g = tape.backward(loss).map_err(ModelError::from)?;
                accumulate(&mut grads, &vars, &g);
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            optimizer.lr = run.lr_at(step, total_steps, steps_per_epoch);
            adamw_step(&mut params, &grads, &mut optimizer, |_| true)?;
            step += 1;
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        metrics.push(EpochMetrics {
            epoch,
            split: "pretrain".into(),
            loss,
            accuracy: None,
            seconds: started.elapsed().as_secs_f64(),
            clamped_plans: clamped,
        });
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        metrics,
    })
}

/// Indices of a per-class subset holding `ceil(fraction · n_c)` samples of
/// every class `c`, each class drawn with its own seeded shuffle. Returned
/// in ascending order.
pub fn stratified_subset(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::Config(format!("label fraction {fraction} must lie in (0, 1]")));
    }
    let mut picked = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
        if members.is_empty() {
            return Err(TrainError::Stratification { class });
        }
        let take = ((members.len() as f64) * fraction - 1e-9).ceil().max(1.0) as usize;
        members.shuffle(&mut rng::rng(rng::derive_seed(seed, &[stream::SUBSET, class as u64])));
        picked.extend_from_slice(&members[..take.min(members.len())]);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn argmax(row: &[f64]) -> usize {
    // First maximum wins, so ties go to the lowest class index.
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Supervised training of an encoder plus a fresh linear head on a
/// stratified label fraction. `encoder` is the pretrained encoder, or `None`
/// to start from a fresh initialization.
pub fn finetune(
    samples: &[LabeledSample],
    encoder: Option<&EncoderParams>,
    cfg: &ModelConfig,
    run: &RunConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    run.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.classes) {
        return Err(TrainError::Label {
            label: s.label,
            classes: cfg.classes,
        });
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let subset = stratified_subset(&labels, cfg.classes, run.label_fraction, run.seed)?;

    let mut params = Model {
        encoder: encoder.cloned().unwrap_or_else(|| model::init_encoder(cfg, run.seed)),
        decoder: None,
        head: Some(model::init_head(cfg, run.seed)),
    };
    let freeze = run.freeze_encoder;
    let trainable = move |name: &str| !freeze || name.starts_with("head.");
    let mut optimizer = AdamWState::new(&params, run.optimizer.clone(), run.peak_lr());
    let mut metrics = MetricsRecord::default();

    let steps_per_epoch = subset.len().div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let mut step = 0;
    for epoch in 1..=run.epochs {
        let started = Instant::now();
        let mut order = subset.clone();
        order.shuffle(&mut rng::rng(rng::derive_seed(run.seed, &[stream::SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(run.batch_size) {
            let mut grads = zeros_like(&params);
            for &idx in batch {
                let sample = &samples[idx];
                let mut tape = Tape::new();
                let vars = bind(&mut tape, &params, &trainable);
                let head = vars.head.as_ref().expect("head present");
                let logits = classify_patches(&mut tape, &sample.patches, &vars.encoder, head, cfg)?;
                correct += usize::from(argmax(tape.value(logits).data()) == sample.label);
                let loss = tape.cross_entropy(logits, &[sample.label]).map_err(ModelError::from)?;
                loss_sum += tape.value(loss).item();
                let g = tape.backward(loss).map_err(ModelError::from)?;
                accumulate(&mut grads, &vars, &g);
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            optimizer.lr = run.lr_at(step, total_steps, steps_per_epoch);
            adamw_step(&mut params, &grads, &mut optimizer, &trainable)?;
            step += 1;
        }
        let loss = loss_sum / subset.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        metrics.push(EpochMetrics {
            epoch,
            split: "finetune".into(),
            loss,
            accuracy: Some(correct as f64 / subset.len() as f64),
            seconds: started.elapsed().as_secs_f64(),
            clamped_plans: 0,
        });
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        metrics,
    })
}

/// Logits `[K]` for one image.
pub fn predict(params: &Params, patches: &PatchGrid, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, |_| false);
    let head = vars.head.as_ref().ok_or(ModelError::MissingPart("classifier head"))?;
    let logits = classify_patches(&mut tape, patches, &vars.encoder, head, cfg)?;
    Ok(tape.value(logits).data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy and confusion counts from predicted labels.
pub fn score(labels: &[usize], predictions: &[usize], classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0; classes]; classes];
    let mut correct = 0;
    for (&l, &p) in labels.iter().zip(predictions) {
        confusion[l][p] += 1;
        correct += usize::from(l == p);
    }
    Evaluation {
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        confusion,
        predictions: predictions.to_vec(),
    }
}

/// Top-1 accuracy of a fine-tuned model. Ties in the logits resolve to the
/// lowest class index.
pub fn evaluate(samples: &[LabeledSample], params: &Params, cfg: &ModelConfig) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label >= cfg.classes {
            return Err(TrainError::Label {
                label: s.label,
                classes: cfg.classes,
            });
        }
        predictions.push(argmax(&predict(params, &s.patches, cfg)?));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(score(&labels, &predictions, cfg.classes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strategy: MaskingStrategy,
    pub sigma: f64,
    pub accuracy: f64,
}

pub const SWEEP_HEADER: &str = "strategy,sigma,accuracy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{:.2},{:.6}\n", r.strategy, r.sigma, r.accuracy));
    }
    out
}

/// The masking ratios studied for both strategies.
pub const SWEEP_RATIOS: [f64; 6] = [0.15, 0.30, 0.45, 0.60, 0.75, 0.90];

/// For every `(strategy, ratio)`: pretrain, fine-tune and evaluate with the
/// same seeds. Rows are grouped by strategy, ratios ascending within each.
pub fn sweep_masking_ratio(
    unlabeled: &[UnlabeledSample],
    train: &[LabeledSample],
    test: &[LabeledSample],
    cfg: &ModelConfig,
    pretrain_run: &RunConfig,
    finetune_run: &RunConfig,
    ratios: &[f64],
    strategies: &[MaskingStrategy],
) -> Result<Vec<SweepRow>> {
    if let Some(&r) = ratios.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
        return Err(TrainError::Config(format!("sweep ratio {r} must lie strictly between 0 and 1")));
    }
    let mut rows = Vec::with_capacity(ratios.len() * strategies.len());
    for &strategy in strategies {
        for &sigma in ratios {
            let pre = RunConfig {
                sigma,
                strategy,
                ..pretrain_run.clone()
            };
            let pretrained = pretrain(unlabeled, cfg, &pre)?;
            let tuned = finetune(train, Some(&pretrained.params.encoder), cfg, finetune_run)?;
            let eval = evaluate(test, &tuned.params, cfg)?;
            rows.push(SweepRow {
                strategy,
                sigma,
                accuracy: eval.accuracy,
            });
        }
    }
    Ok(rows)
}

//! Two-stage codec training and classifier pre-training.
//!
//! Stage one trains encoder and decoder on pixel MSE. Stage two starts from
//! a stage-one checkpoint and optimizes a feature-level objective computed
//! through the frozen task network (uniform for APIC, weighted for SAIC).
//! Only θ2/θ3 are ever updated.
//!
//! Batches are drawn from a ChaCha8 stream keyed by `(seed, step)`, so the
//! data order depends only on the seed and the global step. Together with
//! the single-threaded engine this makes runs, and resumed runs,
//! bit-reproducible.

use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecNetwork;
use crate::data::{Dataset, Split};
use crate::error::{Result, SaicError};
use crate::gsw::SemanticWeights;
use crate::losses::{
    feature_loss_grad, pixel_loss_grad, semantic_loss_grad, LossConfig, LossKind,
};
use crate::nn::{softmax_rows, Adam, AdamConfig, AdamState, Network};
use crate::task::{
    argmax_rows, build_architecture, write_atomic, TaskCheckpoint, TaskNetwork,
    CHECKPOINT_VERSION as TASK_CHECKPOINT_VERSION,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub loss: LossKind,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale batch size and learning rate.
    pub fn pretrain(steps: u64) -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            loss: LossKind::Tdic,
            steps,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn finetune(loss: LossKind, steps: u64) -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            loss,
            ..Self::pretrain(steps)
        }
    }

    pub fn with_lr(mut self, lr: f32) -> Self {
        self.optimizer.lr = lr;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(SaicError::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(SaicError::Config("batch size must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(SaicError::Config("learning rate must be positive".into()));
        }
        match (self.stage, self.loss) {
            (Stage::Pretrain, LossKind::Tdic) => Ok(()),
            (Stage::Pretrain, other) => Err(SaicError::Config(format!(
                "pre-training uses the pixel loss, not {other}"
            ))),
            (Stage::Finetune, LossKind::Tdic) => Err(SaicError::Config(
                "fine-tuning needs the APIC or SAIC loss".into(),
            )),
            (Stage::Finetune, _) => Ok(()),
        }
    }
}

/// Codec weights plus everything needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecCheckpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Optimizer steps taken in this stage.
    pub step: u64,
    pub codec: CodecNetwork,
    pub optimizer: AdamState,
    pub final_loss: f64,
    /// Checksum of the frozen task network used during fine-tuning.
    pub task_checksum: Option<u32>,
    /// Mapped weights used by a SAIC fine-tune.
    pub weights: Option<Vec<f64>>,
    /// CRC-32 of the codec parameters, checked on load.
    pub param_checksum: u32,
}

impl CodecCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)
            .map_err(|e| SaicError::Format(format!("serializing checkpoint: {e}")))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SaicError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| {
            SaicError::Format(format!("{} is not a codec checkpoint: {e}", path.display()))
        })?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(SaicError::Format(format!(
                "checkpoint format version {version:?} needs migration to {CHECKPOINT_VERSION}"
            )));
        }
        let ck: CodecCheckpoint = serde_json::from_value(value).map_err(|e| {
            SaicError::Format(format!("{} is not a codec checkpoint: {e}", path.display()))
        })?;
        if ck.codec.checksum() != ck.param_checksum {
            return Err(SaicError::Format(format!(
                "{}: parameter checksum mismatch",
                path.display()
            )));
        }
        Ok(ck)
    }

    pub fn bpp(&self) -> f64 {
        self.codec.bpp().as_f64()
    }
}

/// Batch indices for a given global step.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Result<Vec<usize>> {
    if batch_size > n {
        return Err(SaicError::Config(format!(
            "batch size {batch_size} exceeds the {n} training samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    Ok(rand::seq::index::sample(&mut rng, n, batch_size).into_vec())
}

enum Objective<'a> {
    Pixel,
    Feature {
        task: &'a TaskNetwork,
        weights: Option<Vec<f32>>,
    },
}

/// Live training state.
pub struct Session<'a> {
    pub codec: CodecNetwork,
    pub optimizer: Adam,
    pub step: u64,
    pub losses: Vec<f64>,
    config: TrainConfig,
    objective: Objective<'a>,
}

impl<'a> Session<'a> {
    fn new(codec: CodecNetwork, config: TrainConfig, objective: Objective<'a>) -> Self {
        let optimizer = Adam::new(config.optimizer, &codec.params());
        Session {
            codec,
            optimizer,
            step: 0,
            losses: Vec::new(),
            config,
            objective,
        }
    }

    /// One optimizer step on `x`; returns the loss before the update.
    pub fn train_step(&mut self, x: &Tensor) -> Result<f64> {
        let (recon, trace) = self.codec.forward_train(x)?;
        let (loss, grad_recon) = match &self.objective {
            Objective::Pixel => pixel_loss_grad(x, &recon)?,
            Objective::Feature { task, weights } => {
                let target = task.feature_maps(x)?;
                let (feat, ttrace) = task.feature_maps_trace(&recon)?;
                let (loss, grad_feat) = match weights {
                    Some(w) => semantic_loss_grad(&target, &feat, w)?,
                    None => feature_loss_grad(&target, &feat)?,
                };
                (loss, task.features_backward(&ttrace, &grad_feat)?)
            }
        };
        if !loss.is_finite() {
            return Err(SaicError::Training(format!(
                "loss diverged to {loss} at step {}",
                self.step
            )));
        }
        let (grads, _) = self.codec.backward(&trace, &grad_recon)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(SaicError::Training(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        self.optimizer.update(self.codec.params_mut(), &grads)?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains until the stage step counter reaches `until`.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        observer: &mut dyn FnMut(u64, f64),
    ) -> Result<()> {
        let n = data.len(Split::Train);
        while self.step < until {
            let idx = batch_indices(self.config.seed, self.step, self.config.batch_size, n)?;
            let batch = data.batch(Split::Train, &idx)?;
            let loss = self.train_step(&batch.pixels)?;
            observer(self.step, loss);
        }
        Ok(())
    }

    fn checkpoint(&self) -> CodecCheckpoint {
        let (task_checksum, weights) = match &self.objective {
            Objective::Pixel => (None, None),
            Objective::Feature { task, weights } => (
                Some(task.checksum()),
                weights
                    .as_ref()
                    .map(|w| w.iter().map(|&v| v as f64).collect()),
            ),
        };
        CodecCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            codec: self.codec.clone(),
            optimizer: self.optimizer.state.clone(),
            final_loss: self.losses.last().copied().unwrap_or(f64::NAN),
            task_checksum,
            weights,
            param_checksum: self.codec.checksum(),
        }
    }
}

fn objective_for<'a>(
    loss: &LossConfig,
    task: Option<&'a TaskNetwork>,
) -> Result<Objective<'a>> {
    match loss.kind {
        LossKind::Tdic => Ok(Objective::Pixel),
        kind => {
            let task = task.ok_or_else(|| {
                SaicError::Config(format!("{kind} fine-tuning needs a task network"))
            })?;
            loss.validate_channels(task.feature_shape().0)?;
            let weights = match kind {
                LossKind::Saic => Some(loss.weights.as_ref().expect("validated").mapped_f32()),
                _ => None,
            };
            Ok(Objective::Feature { task, weights })
        }
    }
}

/// Stage one: pixel-loss training from a freshly initialized codec.
pub fn pretrain(
    codec: CodecNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(u64, f64),
) -> Result<CodecCheckpoint> {
    cfg.validate()?;
    if cfg.stage != Stage::Pretrain {
        return Err(SaicError::Config("pretrain needs a pretrain-stage config".into()));
    }
    let mut session = Session::new(codec, cfg.clone(), Objective::Pixel);
    session.run(data, cfg.steps, observer)?;
    info!(
        "pretrain finished: {} steps, final loss {:.6}",
        session.step,
        session.losses.last().unwrap()
    );
    Ok(session.checkpoint())
}

/// Stage two: feature-level fine-tuning of a pre-trained codec.
pub fn finetune(
    start: &CodecCheckpoint,
    task: &TaskNetwork,
    weights: Option<&SemanticWeights>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(u64, f64),
) -> Result<CodecCheckpoint> {
    cfg.validate()?;
    if cfg.stage != Stage::Finetune {
        return Err(SaicError::Config("finetune needs a finetune-stage config".into()));
    }
    if start.config.stage != Stage::Pretrain || start.step == 0 {
        return Err(SaicError::Config(
            "fine-tuning must start from a pre-trained codec checkpoint (run train-codec first)"
                .into(),
        ));
    }
    let loss = LossConfig::new(cfg.loss, weights.cloned())?;
    if cfg.loss == LossKind::Apic && weights.is_some() {
        warn!("APIC ignores the provided semantic weights");
    }
    let frozen = task.checksum();
    let objective = objective_for(&loss, Some(task))?;
    let mut session = Session::new(start.codec.clone(), cfg.clone(), objective);
    session.run(data, cfg.steps, observer)?;
    if task.checksum() != frozen {
        return Err(SaicError::Training(
            "task network parameters changed during fine-tuning".into(),
        ));
    }
    info!(
        "{} finetune finished: {} steps, final loss {:.6}",
        cfg.loss,
        session.step,
        session.losses.last().unwrap()
    );
    Ok(session.checkpoint())
}

/// Codec, optimizer and step counter from a checkpoint.
pub fn resume(ck: &CodecCheckpoint) -> Result<(CodecNetwork, Adam, u64)> {
    let adam = Adam::from_state(ck.config.optimizer, ck.optimizer.clone());
    if adam.state.m.len() != ck.codec.params().len() {
        return Err(SaicError::Format(
            "optimizer state does not match codec parameters".into(),
        ));
    }
    Ok((ck.codec.clone(), adam, ck.step))
}

/// Continues the run stored in `ck` for `extra_steps` more steps.
pub fn continue_training(
    ck: &CodecCheckpoint,
    task: Option<&TaskNetwork>,
    data: &Dataset,
    extra_steps: u64,
    observer: &mut dyn FnMut(u64, f64),
) -> Result<CodecCheckpoint> {
    let (codec, optimizer, step) = resume(ck)?;
    let weights = match &ck.weights {
        Some(w) => Some(SemanticWeights {
            format_version: crate::gsw::WEIGHTS_VERSION,
            k: w.len(),
            tau: f64::NAN,
            r: w.iter().sum(),
            raw: vec![0.0; w.len()],
            mapped: w.clone(),
            calibration: None,
        }),
        None => None,
    };
    let loss = LossConfig::new(ck.config.loss, weights)?;
    if let (Some(t), Some(expected)) = (task, ck.task_checksum) {
        if t.checksum() != expected {
            return Err(SaicError::Training(
                "task network differs from the one used by this checkpoint".into(),
            ));
        }
    }
    let objective = objective_for(&loss, task)?;
    let mut session = Session::new(codec, ck.config.clone(), objective);
    session.optimizer = optimizer;
    session.step = step;
    session.run(data, step + extra_steps, observer)?;
    Ok(session.checkpoint())
}

/// Line-oriented training log: `step<TAB>loss`, every `every` steps and at
/// step 1. Contains no timings, so logs of identical runs are identical.
pub struct LineLog<W: std::io::Write> {
    out: W,
    every: u64,
}

impl<W: std::io::Write> LineLog<W> {
    pub fn new(mut out: W, every: u64) -> Self {
        let _ = writeln!(out, "step\tloss");
        LineLog {
            out,
            every: every.max(1),
        }
    }

    pub fn record(&mut self, step: u64, loss: f64) {
        if step % self.every == 0 || step == 1 {
            let _ = writeln!(self.out, "{step}\t{loss:.8}");
        }
    }
}

// ---------------------------------------------------------------------------
// Classifier pre-training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainConfig {
    pub arch: String,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig {
            arch: "small-resnet".into(),
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    let probs = softmax_rows(logits)?;
    let mut grad = probs.clone();
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (probs.data()[i * c + y].max(1e-12) as f64).ln();
        grad.data_mut()[i * c + y] -= 1.0;
    }
    for g in grad.data_mut() {
        *g /= b as f32;
    }
    Ok((loss / b as f64, grad))
}

/// Trains a classifier on the training split and records its test accuracy.
pub fn train_task_network(
    data: &Dataset,
    cfg: &TaskTrainConfig,
    observer: &mut dyn FnMut(u64, f64),
) -> Result<TaskCheckpoint> {
    if cfg.steps < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0) {
        return Err(SaicError::Config("invalid classifier training config".into()));
    }
    let (h, w) = data.spec.image_size;
    let input = (data.spec.channels, h, w);
    let mut net: Network = build_architecture(&cfg.arch, input, data.num_classes(), cfg.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &net.params(),
    );
    let n = data.len(Split::Train);
    for step in 0..cfg.steps {
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, n)?;
        let batch = data.batch(Split::Train, &idx)?;
        let (logits, trace) = net.forward_trace(&batch.pixels)?;
        let (loss, grad) = cross_entropy_grad(&logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(SaicError::Training(format!("classifier loss diverged at step {step}")));
        }
        let mut grads = net.zero_grads();
        net.backward(&trace, &grad, Some(&mut grads), false)?;
        adam.update(net.params_mut(), &grads)?;
        observer(step + 1, loss);
    }
    let accuracy = if data.len(Split::Test) > 0 {
        let mut correct = 0usize;
        for batch in data.batches(Split::Test, 256) {
            let batch = batch?;
            let pred = argmax_rows(&net.forward(&batch.pixels)?);
            correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        }
        Some(correct as f64 / data.len(Split::Test) as f64)
    } else {
        None
    };
    Ok(TaskCheckpoint {
        format_version: TASK_CHECKPOINT_VERSION,
        arch: cfg.arch.clone(),
        input_shape: input,
        num_classes: data.num_classes(),
        class_names: data.class_names.clone(),
        network: net,
        documented_accuracy: accuracy,
        seed: cfg.seed,
        steps: cfg.steps,
    })
}

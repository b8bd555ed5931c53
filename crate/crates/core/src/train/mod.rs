//! Training orchestration: synthetic-ratio ramp, adaptive curriculum,
//! per-source task weighting, early stopping, Adam, and the unified
//! teacher/student epoch.

mod experiment;
mod utf;

pub use experiment::{median, run_toy_experiment, ToyExperiment, ToyReport, ToyStudentResult};
pub use utf::{
    infer_lattices, train, transcribe, utf_epoch, validate, EpochLosses, Teacher, TrainData, TrainReport, Validation,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::AugmentSpec;
use crate::distill::{LossWeights, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const SYNTHETIC_R0: f64 = 0.1;
pub const SYNTHETIC_RMAX: f64 = 0.4;
pub const STAGE_THRESHOLD: f64 = 0.75;
pub const STAGE_DELTA: f64 = 0.05;
pub const FIRST_STAGE: usize = 1;
pub const MAX_STAGE: usize = 5;
/// Longest transcription admitted before the long-sequence stage.
pub const SHORT_LINE: usize = 3;
pub const PATIENCE: usize = 10;
pub const MIN_IMPROVEMENT: f64 = 0.001;
/// Slack so an improvement of exactly `MIN_IMPROVEMENT`, up to rounding,
/// does not count.
const IMPROVEMENT_SLACK: f64 = 1e-12;
pub const LEARNING_RATE: f64 = 1e-3;
pub const CLIP_NORM: f64 = 5.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const BATCH_SIZE: usize = 16;
/// Student epochs in the desk-scale comparison.
pub const TOY_STUDENT_EPOCHS: usize = 15;

/// Share of synthetic lines at epoch `epoch` of `total`:
/// `min(r_max, r0 + (e/E)(r_max − r0))`.
pub fn synthetic_ratio(epoch: usize, total: usize, r0: f64, rmax: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("synthetic ratio needs at least one epoch".into()));
    }
    if !(0.0..1.0).contains(&r0) || !(r0..1.0).contains(&rmax) {
        return Err(Error::Config(format!("synthetic ratios need 0 <= r0 <= rmax < 1, got {r0}, {rmax}")));
    }
    let f = epoch.min(total) as f64 / total as f64;
    Ok(rmax.min(r0 + f * (rmax - r0)))
}

/// Adaptive curriculum position: current stage and the performance needed
/// to leave it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub stage: usize,
    pub threshold: f64,
    pub delta: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum::new(STAGE_THRESHOLD, STAGE_DELTA)
    }
}

impl Curriculum {
    pub fn new(threshold: f64, delta: f64) -> Self {
        Curriculum {
            stage: FIRST_STAGE,
            threshold,
            delta,
        }
    }

    /// Starts at the final stage, for runs without a curriculum.
    pub fn disabled() -> Self {
        Curriculum {
            stage: MAX_STAGE,
            ..Self::default()
        }
    }

    pub fn spec(&self) -> StageSpec {
        StageSpec::of(self.stage)
    }
}

/// One progression step: when `performance` (1 − validation CER) exceeds the
/// threshold, move up a stage and raise the threshold. The last stage is
/// absorbing.
pub fn acp_step(c: Curriculum, performance: f64) -> Curriculum {
    if c.stage < MAX_STAGE && performance > c.threshold {
        Curriculum {
            stage: c.stage + 1,
            threshold: c.threshold + c.delta,
            delta: c.delta,
        }
    } else {
        c
    }
}

/// What a curriculum stage admits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// Longest real transcription used, `None` for all.
    pub max_len: Option<usize>,
    /// Longest synthetic transcription used.
    pub synthetic_max_len: Option<usize>,
    /// Whether the synthetic share follows the ramp instead of staying at r0.
    pub ramp: bool,
    pub augment: bool,
}

impl StageSpec {
    /// 1: short clean lines; 2: synthetic ramp; 3: augmentation; 4: long
    /// real lines; 5: long synthetic lines too.
    pub fn of(stage: usize) -> Self {
        let short = Some(SHORT_LINE);
        StageSpec {
            max_len: if stage >= 4 { None } else { short },
            synthetic_max_len: if stage >= 5 { None } else { short },
            ramp: stage >= 2,
            augment: stage >= 3,
        }
    }

    pub fn admits(len: usize, cap: Option<usize>) -> bool {
        cap.is_none_or(|m| len <= m)
    }
}

/// How task weights follow validation results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaskWeighting {
    /// Proportional to each source's validation CER.
    Harder,
    Uniform,
}

/// Per-source loss weights, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    weights: BTreeMap<String, f64>,
}

impl TaskWeights {
    pub fn new(raw: BTreeMap<String, f64>) -> Result<Self> {
        if raw.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("task weights must be finite and non-negative: {raw:?}")));
        }
        let total: f64 = raw.values().sum();
        if total <= 0.0 {
            return Err(Error::Config("task weights are all zero".into()));
        }
        Ok(TaskWeights {
            weights: raw.into_iter().map(|(k, w)| (k, w / total)).collect(),
        })
    }

    pub fn uniform<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(names.iter().map(|n| (n.as_ref().to_string(), 1.0)).collect())
    }

    /// `λ_k ∝ CER_k`. When every source is already perfect the weights fall
    /// back to uniform.
    pub fn from_cers(cers: &BTreeMap<String, f64>) -> Result<Self> {
        if !cers.is_empty() && cers.values().all(|&c| c == 0.0) {
            return Self::uniform(&cers.keys().collect::<Vec<_>>());
        }
        Self::new(cers.clone())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.weights.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    /// Per-sample multiplier `K · λ_k`, so that balanced sources keep unit
    /// weight. Sources without a task (synthetic lines) get 1.
    pub fn sample_weight(&self, source: &str) -> f64 {
        self.get(source).map_or(1.0, |w| w * self.len() as f64)
    }
}

/// `Σ λ_k L_k` over named task losses. Every loss must have a weight.
pub fn multitask_loss(losses: &BTreeMap<String, f64>, weights: &TaskWeights) -> Result<f64> {
    losses
        .iter()
        .map(|(k, l)| {
            weights
                .get(k)
                .map(|w| w * l)
                .ok_or_else(|| Error::Config(format!("no weight for task {k:?}")))
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Stops after `patience` consecutive epochs in which the best validation
/// loss did not drop by more than `min_delta`. The best loss and its epoch
/// follow every new minimum, however small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub counter: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop::new(PATIENCE, MIN_IMPROVEMENT)
    }
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStop {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            counter: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let (new_best, significant) = match self.best {
            None => (true, true),
            Some(b) => (loss < b, loss.is_finite() && b - loss > self.min_delta + IMPROVEMENT_SLACK),
        };
        if new_best {
            self.best = Some(loss);
            self.best_epoch = epoch;
        }
        if significant {
            self.counter = 0;
            return StopDecision::Improved;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Wait
        }
    }
}

/// Result of one optimizer call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// Applied with the pre-clip global gradient norm and the clip factor.
    Applied { norm: f64, scale: f64 },
    /// Gradients were not finite; parameters and moments untouched.
    Skipped,
}

/// Adam with global-norm gradient clipping. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub step: u64,
    pub skipped: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, clip: f64) -> Self {
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            clip,
            step: 0,
            skipped: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` from `grads`, matched by position.
    pub fn update<F: Scalar>(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::Shape("optimizer: parameter and gradient shapes differ".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::Shape("optimizer: parameter layout changed".into()));
        }
        let sq: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| {
                let x = x.f64();
                x * x
            })
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            self.skipped += 1;
            log::warn!("optimizer: non-finite gradient, step skipped ({} so far)", self.skipped);
            return Ok(StepOutcome::Skipped);
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64() * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = F::of(w.f64() - update);
            }
        }
        Ok(StepOutcome::Applied { norm, scale })
    }
}

/// Hyperparameters for a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub tau: f64,
    /// Include the distillation term (needs a teacher).
    pub distill: bool,
    pub synthetic_r0: f64,
    pub synthetic_rmax: f64,
    pub curriculum: bool,
    pub stage_threshold: f64,
    pub stage_delta: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub task_weighting: TaskWeighting,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: BATCH_SIZE,
            lr: LEARNING_RATE,
            clip: CLIP_NORM,
            tau: DEFAULT_TAU,
            distill: false,
            synthetic_r0: SYNTHETIC_R0,
            synthetic_rmax: SYNTHETIC_RMAX,
            curriculum: true,
            stage_threshold: STAGE_THRESHOLD,
            stage_delta: STAGE_DELTA,
            patience: PATIENCE,
            min_delta: MIN_IMPROVEMENT,
            task_weighting: TaskWeighting::Harder,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("learning rate, clip norm and tau must be positive".into()));
        }
        synthetic_ratio(0, 1, self.synthetic_r0, self.synthetic_rmax)?;
        self.augment.validate()
    }
}

/// Mutable state carried from epoch to epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub total_epochs: usize,
    pub curriculum: Curriculum,
    pub synthetic_ratio: f64,
    pub weights: LossWeights,
    pub tasks: TaskWeights,
    pub early_stop: EarlyStop,
    pub seed: u64,
}

impl TrainState {
    pub fn new<S: AsRef<str>>(cfg: &TrainConfig, sources: &[S]) -> Result<Self> {
        cfg.validate()?;
        let curriculum = if cfg.curriculum {
            Curriculum::new(cfg.stage_threshold, cfg.stage_delta)
        } else {
            Curriculum::disabled()
        };
        let tasks = if sources.is_empty() {
            TaskWeights { weights: BTreeMap::new() }
        } else {
            TaskWeights::uniform(sources)?
        };
        Ok(TrainState {
            epoch: 0,
            total_epochs: cfg.epochs,
            curriculum,
            synthetic_ratio: cfg.synthetic_r0,
            weights: crate::distill::weight_schedule(0, cfg.epochs),
            tasks,
            early_stop: EarlyStop::new(cfg.patience, cfg.min_delta),
            seed: cfg.seed,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub r_s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub ctc: f64,
    pub ce: f64,
    pub kd: f64,
    pub aux: f64,
    pub total: f64,
    pub samples: usize,
    pub val_loss: f64,
    pub val_cer: f64,
    pub val_wer: f64,
    pub val_ser: f64,
    pub stage_cer: f64,
    pub task_weights: BTreeMap<String, f64>,
    pub skipped_steps: usize,
    pub seconds: f64,
}

impl EpochRecord {
    /// The record with metrics rounded to `f32` and wall time dropped, for
    /// reproducibility comparisons.
    pub fn fingerprint(&self) -> String {
        let r = |x: f64| x as f32;
        format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {:?} {}",
            self.epoch,
            self.stage,
            r(self.r_s),
            r(self.alpha),
            r(self.beta),
            r(self.gamma),
            r(self.delta),
            r(self.ctc),
            r(self.ce),
            r(self.kd),
            r(self.aux),
            r(self.total),
            self.samples,
            r(self.val_loss),
            r(self.val_cer),
            r(self.val_wer),
            r(self.val_ser),
            r(self.stage_cer),
            self.task_weights.values().map(|&w| r(w)).collect::<Vec<_>>(),
            self.skipped_steps
        )
    }
}

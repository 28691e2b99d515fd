//! Sequential-task continual training: per-task epochs with warm-up, task
//! type embedding allocation, decoupled-weight-decay adaptive steps, and
//! post-task evaluation rows.
//!
//! RNG discipline: one master seed fans out to per-(task, epoch) shuffle
//! streams, and the loss computation itself consumes no randomness, so every
//! loss-flag combination sees identical data order and differs only through
//! gradients.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_task, AccuracyMatrix};
use crate::losses::{total_loss, LossBreakdown, LossFlags, LossWeights};
use crate::model::{BindMode, ModelParams};
use crate::rng;
use crate::synthdata::{validate_permutation, TaskData, TaskStream};
use crate::Tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Cosine decay floor as a fraction of the base learning rate.
pub const LR_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub tau: f64,
    pub flags: LossFlags,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_task: 5,
            warmup_epochs: 2,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            gamma: 0.10,
            tau: 1.25,
            flags: LossFlags::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs_per_task {
            return Err(Error::BadConfig(format!(
                "warmup_epochs {} > epochs_per_task {}",
                self.warmup_epochs, self.epochs_per_task
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::BadConfig(format!("learning_rate {} <= 0", self.learning_rate)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::BadConfig(format!("weight_decay {} < 0", self.weight_decay)));
        }
        if self.tau <= 0.0 {
            return Err(Error::BadTemperature(self.tau));
        }
        Ok(())
    }
}

/// First/second moment accumulators, one buffer per learnable tensor in
/// [`ModelParams::learnable_tensors`] order. Frozen parameters have no state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.learnable_tensors().iter().map(|t| t.numel()).collect();
        OptimizerState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Gradient buffers aligned with the learnable tensor order.
#[derive(Debug, Clone)]
pub struct LearnableGrads {
    pub bufs: Vec<Vec<f64>>,
}

impl LearnableGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        LearnableGrads {
            bufs: params.learnable_tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Add this tape's gradients for every learnable var.
    pub fn accumulate(
        &mut self,
        tape: &Tape,
        grads: &crate::autodiff::Gradients,
        bound: &crate::model::BoundModel,
    ) {
        for (buf, var) in self.bufs.iter_mut().zip(bound.learnable_vars()) {
            if let Some(g) = grads.get(var) {
                for (b, v) in buf.iter_mut().zip(g.values()) {
                    *b += v;
                }
            }
            let _ = tape;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in &mut self.bufs {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Index of the task type embedding table in the learnable tensor order;
/// its unallocated rows are exempt from decay and never receive gradient.
const TASK_EMB_SLOT: usize = 2;

/// One decoupled-weight-decay adaptive step on the learnable parameters.
/// Decay is multiplicative with the scheduled rate (param *= 1 - lr_t * wd)
/// and independent of the adaptive update.
pub fn optimizer_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &LearnableGrads,
    lr_t: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("optimizer_step"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let allocated = params.learnable.task_embeddings.allocated;
    let dim = params.config.model_dim;
    let decay = 1.0 - lr_t * weight_decay;
    for (slot, tensor) in params.learnable_tensors_mut().into_iter().enumerate() {
        let active = if slot == TASK_EMB_SLOT { allocated * dim } else { tensor.numel() };
        let values = tensor.values_mut();
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        let g = &grads.bufs[slot];
        for j in 0..active {
            values[j] *= decay;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            values[j] -= lr_t * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then cosine decay to
/// `LR_FLOOR * base_lr` at the final step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::BadSchedule { warmup: warmup_steps, total: total_steps });
    }
    debug_assert!(step < total_steps);
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - 1).saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(base_lr * (LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())))
}

/// Permute the training order. Composes with the stream's existing order, so
/// applying a permutation and then its inverse restores the original.
pub fn set_task_order(stream: &TaskStream, perm: &[usize]) -> Result<TaskStream> {
    validate_permutation(perm, stream.num_tasks())?;
    let mut out = stream.clone();
    out.order = perm.iter().map(|&i| stream.order[i]).collect();
    Ok(out)
}

/// One optimizer step's averaged loss values.
#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: usize,
    pub l_answer: f64,
    pub l_question: f64,
    pub l_video: f64,
    pub l_prompt: f64,
    pub total: f64,
}

pub struct TrainRun {
    pub params: ModelParams,
    pub matrix: AccuracyMatrix,
    pub loss_log: Vec<LossRecord>,
    /// Parameter snapshot after each task, in training order.
    pub checkpoints: Vec<ModelParams>,
}

fn check_compatibility(params: &ModelParams, stream: &TaskStream) -> Result<()> {
    if stream.num_tasks() == 0 {
        return Err(Error::NoSamples);
    }
    if stream.num_tasks() > params.config.max_tasks {
        return Err(Error::DimensionMismatch(format!(
            "{} tasks exceed task embedding capacity {}",
            stream.num_tasks(),
            params.config.max_tasks
        )));
    }
    for task in &stream.tasks {
        for sample in task.train.iter().chain(&task.test) {
            if let Some(f) = sample.frames.first() {
                if f.len() != params.config.frame_feature_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "frame feature dim {} vs model {}",
                        f.len(),
                        params.config.frame_feature_dim
                    )));
                }
            }
            let max_tok = sample
                .question
                .iter()
                .chain(sample.candidates.iter().flatten())
                .max()
                .copied()
                .unwrap_or(0);
            if max_tok >= params.config.vocab_size {
                return Err(Error::DimensionMismatch(format!(
                    "token id {} vs vocab_size {}",
                    max_tok, params.config.vocab_size
                )));
            }
        }
    }
    Ok(())
}

/// Train through the stream's tasks in order: allocate a task type embedding,
/// run seeded-shuffled batched epochs with the configured losses, and after
/// each task evaluate the test splits of every task seen so far. Frozen
/// weights are untouched throughout; the optimizer restarts per task (each
/// task is a fresh fine-tuning phase, like the warm-up schedule).
pub fn train_continual(
    mut params: ModelParams,
    stream: &TaskStream,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    check_compatibility(&params, stream)?;
    let ordered: Vec<&TaskData> = stream.ordered().collect();

    let mut matrix = AccuracyMatrix::new();
    let mut loss_log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    let mut global_step = 0usize;

    for (position, task) in ordered.iter().enumerate() {
        params.learnable.task_embeddings.allocate_next()?;
        seen.push(position);

        let n = task.train.len();
        if config.epochs_per_task > 0 && n > 0 {
            let mut opt = OptimizerState::new(&params);
            let steps_per_epoch = n.div_ceil(config.batch_size);
            let total_steps = config.epochs_per_task * steps_per_epoch;
            let warmup_steps = config.warmup_epochs * steps_per_epoch;
            let mut step_in_task = 0usize;
            for epoch in 0..config.epochs_per_task {
                let mut indices: Vec<usize> = (0..n).collect();
                let mut shuffle_rng = rng::stream(
                    config.seed,
                    &format!("shuffle/task{position}/epoch{epoch}"),
                );
                indices.shuffle(&mut shuffle_rng);
                for chunk in indices.chunks(config.batch_size) {
                    let mut grads = LearnableGrads::zeros_like(&params);
                    let mut sums = LossBreakdown {
                        l_answer: 0.0,
                        l_question: 0.0,
                        l_video: 0.0,
                        l_prompt: 0.0,
                        total: 0.0,
                        gamma: config.gamma,
                        tau: config.tau,
                    };
                    for &idx in chunk {
                        let sample = &task.train[idx];
                        let mut tape = Tape::new();
                        let bound = params.bind(&mut tape, BindMode::Train);
                        let out = total_loss(
                            &mut tape,
                            &bound,
                            sample,
                            position,
                            &seen,
                            &config.flags,
                            &config.weights,
                            config.gamma,
                            config.tau,
                        )?;
                        if !out.breakdown.is_finite() {
                            return Err(Error::NonFiniteLoss { step: global_step });
                        }
                        let g = tape.backward(out.total)?;
                        grads.accumulate(&tape, &g, &bound);
                        sums.l_answer += out.breakdown.l_answer;
                        sums.l_question += out.breakdown.l_question;
                        sums.l_video += out.breakdown.l_video;
                        sums.l_prompt += out.breakdown.l_prompt;
                        sums.total += out.breakdown.total;
                    }
                    let inv = 1.0 / chunk.len() as f64;
                    grads.scale(inv);
                    let lr_t = lr_schedule(
                        step_in_task,
                        total_steps,
                        warmup_steps,
                        config.learning_rate,
                    )?;
                    optimizer_step(&mut params, &mut opt, &grads, lr_t, config.weight_decay)?;
                    loss_log.push(LossRecord {
                        step: global_step,
                        task: position,
                        l_answer: sums.l_answer * inv,
                        l_question: sums.l_question * inv,
                        l_video: sums.l_video * inv,
                        l_prompt: sums.l_prompt * inv,
                        total: sums.total * inv,
                    });
                    global_step += 1;
                    step_in_task += 1;
                }
            }
        }

        checkpoints.push(params.clone());
        let mut row = Vec::with_capacity(position + 1);
        for done in ordered.iter().take(position + 1) {
            row.push(evaluate_task(&params, &done.test)?);
        }
        matrix.push_row(row);
    }

    Ok(TrainRun { params, matrix, loss_log, checkpoints })
}

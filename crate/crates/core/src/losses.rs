//! The four training objectives and their weighted sum.
//!
//! - answer loss: autoregressive cross-entropy over the answer span given
//!   video and question;
//! - question loss: the same kernel over the question span given video and
//!   answer (auxiliary supervision);
//! - video InfoNCE: for each frame position, classify which of the sample's
//!   own frames comes next, from the hidden state just before it;
//! - prompt contrastive loss: align the question-reweighted prompt vector
//!   with the current task's type embedding against all previously seen
//!   tasks' embeddings.
//!
//! The total is answer + question + video + gamma * prompt; question and
//! video enter unweighted by default, with optional per-component overrides
//! for experiments.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{embed_inputs, forward_pass, BoundModel, InputOrder, Segment};
use crate::synthdata::Sample;

/// Which auxiliary objectives are active. `prompts_in_aux` controls whether
/// prompt injection is enabled during the question- and video-prediction
/// passes (the answer pass always injects).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    pub use_q: bool,
    pub use_v: bool,
    pub use_p: bool,
    pub prompts_in_aux: bool,
}

impl LossFlags {
    pub fn all() -> Self {
        LossFlags { use_q: true, use_v: true, use_p: true, prompts_in_aux: true }
    }

    pub fn none() -> Self {
        LossFlags { use_q: false, use_v: false, use_p: false, prompts_in_aux: true }
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags::all()
    }
}

/// Optional per-component weight overrides; (1, 1, 1) reproduces the
/// canonical total. Weights of exactly 1.0 add no tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub answer: f64,
    pub question: f64,
    pub video: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { answer: 1.0, question: 1.0, video: 1.0 }
    }
}

/// Per-sample loss values. `total` is always exactly
/// `w_a*l_answer + w_q*l_question + w_v*l_video + gamma*l_prompt` with the
/// summation performed in that order; disabled components are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_answer: f64,
    pub l_question: f64,
    pub l_video: f64,
    pub l_prompt: f64,
    pub total: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_answer.is_finite()
            && self.l_question.is_finite()
            && self.l_video.is_finite()
            && self.l_prompt.is_finite()
            && self.total.is_finite()
    }
}

pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Scalar tape node for backward.
    pub total: Var,
}

/// Shared teacher-forcing kernel: sum over the span of the cross-entropy at
/// the position immediately preceding each target token.
fn span_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    tokens: &[usize],
    span_start: usize,
    what: &'static str,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptySpan(what));
    }
    debug_assert!(span_start >= 1, "span must not start the sequence");
    let pairs: Vec<(usize, usize)> =
        tokens.iter().enumerate().map(|(k, &t)| (span_start + k - 1, t)).collect();
    tape.cross_entropy(logits, pairs)
}

/// -sum_k log P(a_{k+1} | context, A_{<=k}) over the answer span.
pub fn answer_loss(tape: &mut Tape, logits: Var, answer: &[usize], answer_start: usize) -> Result<Var> {
    span_cross_entropy(tape, logits, answer, answer_start, "answer")
}

/// -sum_k log P(q_{k+1} | context, Q_{<=k}) over the question span.
pub fn question_loss(
    tape: &mut Tape,
    logits: Var,
    question: &[usize],
    question_start: usize,
) -> Result<Var> {
    span_cross_entropy(tape, logits, question, question_start, "question")
}

/// Frame-level InfoNCE. With the visual segment at rows
/// [visual_start, visual_start + n_v), position k is scored by the hidden
/// state at visual_start + k - 1 (k = 0 uses the last pre-visual position)
/// against all n_v projected frames of the same sample; the target is frame
/// k + 1, i.e. column k.
pub fn video_infonce_loss(
    tape: &mut Tape,
    hidden: Var,
    visual: Var,
    visual_start: usize,
) -> Result<Var> {
    let n_v = tape.value(visual).shape()[0];
    if n_v < 2 {
        return Err(Error::TooFewFrames(n_v));
    }
    debug_assert!(visual_start >= 1);
    let h_rows: Vec<usize> = (visual_start - 1..visual_start + n_v - 1).collect();
    let h_sel = tape.lookup(hidden, h_rows)?;
    let scores = tape.matmul_bt(h_sel, visual)?;
    let pairs: Vec<(usize, usize)> = (0..n_v).map(|k| (k, k)).collect();
    tape.cross_entropy(scores, pairs)
}

/// p_tilde = (q . P^T) . P for an explicit query vector q.
pub fn reweight_from_query(tape: &mut Tape, query: Var, pool: Var) -> Result<Var> {
    let scores = tape.matmul_bt(query, pool)?;
    tape.matmul(scores, pool)
}

/// Question-conditioned reweighted prompt vector: q is the mean of the
/// question's input token embeddings, p_tilde = (q . P^T) . P over the full
/// prompt matrix.
pub fn reweight_prompts(tape: &mut Tape, bound: &BoundModel, question: &[usize]) -> Result<Var> {
    if question.is_empty() {
        return Err(Error::EmptySpan("question"));
    }
    let q_emb = tape.lookup(bound.token_embedding, question.to_vec())?;
    let q = tape.mean_pool(q_emb)?;
    reweight_from_query(tape, q, bound.prompt_pool)
}

/// -log( exp(p.e_t / tau) / sum_{t' in seen} exp(p.e_{t'} / tau) ).
/// `seen` lists the allocated task rows in A(t); `current` must be one of
/// them and every index must be an allocated row of the table.
pub fn prompt_contrastive_loss(
    tape: &mut Tape,
    p_tilde: Var,
    task_table: Var,
    allocated: usize,
    current: usize,
    seen: &[usize],
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::BadTemperature(tau));
    }
    for &t in seen {
        if t >= allocated {
            return Err(Error::UnallocatedTask { index: t, allocated });
        }
    }
    let pos = seen
        .iter()
        .position(|&t| t == current)
        .ok_or(Error::UnallocatedTask { index: current, allocated })?;
    let e_sel = tape.lookup(task_table, seen.to_vec())?;
    let dots = tape.matmul(e_sel, p_tilde)?;
    let scaled = tape.scale(dots, 1.0 / tau)?;
    tape.cross_entropy(scaled, vec![(0, pos)])
}

/// Compute the enabled components and their weighted sum for one sample.
/// Runs the answer pass always, the question pass iff `use_q`, and the video
/// pass iff `use_v`; the prompt loss needs no forward pass (it reads input
/// embeddings only). Gradients flow only into learnable parameters.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    sample: &Sample,
    current_task: usize,
    seen: &[usize],
    flags: &LossFlags,
    weights: &LossWeights,
    gamma: f64,
    tau: f64,
) -> Result<LossOutput> {
    let gold = sample.gold_answer().to_vec();

    let e_a = embed_inputs(tape, bound, sample, &gold, InputOrder::VideoQuestionAnswer)?;
    let f_a = forward_pass(tape, bound, e_a.seq, true)?;
    let (a_start, _) = e_a.span(Segment::Answer);
    let l_a = answer_loss(tape, f_a.logits, &gold, a_start)?;

    let weighted = |tape: &mut Tape, term: Var, w: f64| -> Result<Var> {
        if w == 1.0 {
            Ok(term)
        } else {
            tape.scale(term, w)
        }
    };

    let mut total = weighted(tape, l_a, weights.answer)?;
    let mut l_q_val = 0.0;
    let mut l_v_val = 0.0;
    let mut l_p_val = 0.0;

    if flags.use_q {
        let e_q = embed_inputs(tape, bound, sample, &gold, InputOrder::VideoAnswerQuestion)?;
        let f_q = forward_pass(tape, bound, e_q.seq, flags.prompts_in_aux)?;
        let (q_start, _) = e_q.span(Segment::Question);
        let l_q = question_loss(tape, f_q.logits, &sample.question, q_start)?;
        l_q_val = tape.value(l_q).item();
        let term = weighted(tape, l_q, weights.question)?;
        total = tape.add(total, term)?;
    }

    if flags.use_v {
        let e_v = embed_inputs(tape, bound, sample, &gold, InputOrder::QuestionAnswerVideo)?;
        let f_v = forward_pass(tape, bound, e_v.seq, flags.prompts_in_aux)?;
        let (v_start, _) = e_v.span(Segment::Video);
        let l_v = video_infonce_loss(tape, f_v.hidden, e_v.visual, v_start)?;
        l_v_val = tape.value(l_v).item();
        let term = weighted(tape, l_v, weights.video)?;
        total = tape.add(total, term)?;
    }

    if flags.use_p {
        let p_tilde = reweight_prompts(tape, bound, &sample.question)?;
        let l_p = prompt_contrastive_loss(
            tape,
            p_tilde,
            bound.task_embeddings,
            bound.allocated,
            current_task,
            seen,
            tau,
        )?;
        l_p_val = tape.value(l_p).item();
        let term = tape.scale(l_p, gamma)?;
        total = tape.add(total, term)?;
    }

    let breakdown = LossBreakdown {
        l_answer: tape.value(l_a).item(),
        l_question: l_q_val,
        l_video: l_v_val,
        l_prompt: l_p_val,
        total: tape.value(total).item(),
        gamma,
        tau,
    };
    Ok(LossOutput { breakdown, total })
}

/// Central-difference verification of the full loss against the analytic
/// gradients of every learnable parameter. Returns the maximum over all
/// coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
#[allow(clippy::too_many_arguments)]
pub fn grad_check_total_loss(
    params: &crate::model::ModelParams,
    sample: &Sample,
    current_task: usize,
    seen: &[usize],
    flags: &LossFlags,
    gamma: f64,
    tau: f64,
    epsilon: f64,
) -> Result<f64> {
    use crate::model::BindMode;
    let weights = LossWeights::default();

    let loss_value = |p: &crate::model::ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, BindMode::Inference);
        let out =
            total_loss(&mut tape, &bound, sample, current_task, seen, flags, &weights, gamma, tau)?;
        Ok(out.breakdown.total)
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, BindMode::Train);
    let out = total_loss(&mut tape, &bound, sample, current_task, seen, flags, &weights, gamma, tau)?;
    let grads = tape.backward(out.total)?;
    let analytic: Vec<Vec<f64>> = bound
        .learnable_vars()
        .iter()
        .map(|&v| grads.get_or_zero(v, &tape).values().to_vec())
        .collect();

    let mut max_err: f64 = 0.0;
    for (slot, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.len() {
            let mut plus = params.clone();
            plus.learnable_tensors_mut()[slot].values_mut()[coord] += epsilon;
            let mut minus = params.clone();
            minus.learnable_tensors_mut()[slot].values_mut()[coord] -= epsilon;
            let numeric = (loss_value(&plus)? - loss_value(&minus)?) / (2.0 * epsilon);
            let a = grad[coord];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

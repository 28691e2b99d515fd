//! A miniature decoder-only transformer with a frozen backbone and a small
//! learnable set: a visual projection, a shared prompt pool injected into the
//! topmost layers through zero-initialized gates, and per-task type
//! embeddings.
//!
//! Prompts join attention as extra key/value entries only; queries and output
//! length never change, and a per-layer scalar gate (initialized to exactly
//! zero) scales the prompt attention weights, so a freshly built model is
//! bit-for-bit unaffected by prompt injection.

use std::path::Path;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::Sample;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Prompt rows injected per layer.
    pub prompt_len: usize,
    /// Number of (topmost) layers receiving prompts.
    pub prompt_layers: usize,
    pub num_frames: usize,
    pub frame_feature_dim: usize,
    /// Capacity of the task type embedding table.
    pub max_tasks: usize,
    /// Optional next-token warm-fit steps applied to the backbone before it
    /// is frozen. 0 keeps the backbone purely random.
    pub warmfit_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 32,
            num_layers: 4,
            num_heads: 2,
            vocab_size: 64,
            max_seq_len: 64,
            prompt_len: 4,
            prompt_layers: 4,
            num_frames: 8,
            frame_feature_dim: 16,
            max_tasks: 8,
            warmfit_steps: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::BadConfig(msg));
        if self.model_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
            || self.prompt_len == 0
            || self.prompt_layers == 0
            || self.num_frames == 0
            || self.frame_feature_dim == 0
            || self.max_tasks == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if self.prompt_layers > self.num_layers {
            return fail(format!(
                "prompt_layers {} > num_layers {}",
                self.prompt_layers, self.num_layers
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Index of the first layer that receives prompts.
    pub fn first_prompt_layer(&self) -> usize {
        self.num_layers - self.prompt_layers
    }
}

/// Shared learnable prompt matrix: (prompt_len * prompt_layers) rows by
/// model_dim columns. Row block k*N_p..(k+1)*N_p belongs to the k-th injected
/// layer; reweighting always uses the full matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPool {
    pub matrix: Tensor,
    pub prompt_len: usize,
}

impl PromptPool {
    pub fn layer_rows(&self, block: usize) -> Vec<usize> {
        (block * self.prompt_len..(block + 1) * self.prompt_len).collect()
    }
}

/// Per-task anchor vectors. Rows at index >= allocated are never touched by
/// gradients or decay; `allocated` grows by one per newly encountered task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskTypeEmbeddings {
    pub matrix: Tensor,
    pub allocated: usize,
}

impl TaskTypeEmbeddings {
    pub fn capacity(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn allocate_next(&mut self) -> Result<usize> {
        if self.allocated >= self.capacity() {
            return Err(Error::BadConfig(format!(
                "task embedding capacity {} exhausted",
                self.capacity()
            )));
        }
        self.allocated += 1;
        Ok(self.allocated - 1)
    }

    pub fn row(&self, t: usize) -> Result<&[f64]> {
        if t >= self.allocated {
            return Err(Error::UnallocatedTask { index: t, allocated: self.allocated });
        }
        Ok(self.matrix.row(t))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Per-head projections; storing heads separately keeps every attention
    /// product a plain 2-D matmul.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff1: Tensor,
    pub ff2: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenParams {
    /// vocab_size x D; also the output head (stored transposed below).
    pub token_embedding: Tensor,
    pub pos_embedding: Tensor,
    /// D x vocab_size, tied to the token table by construction at build time.
    pub head: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl FrozenParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.token_embedding, &self.pos_embedding, &self.head];
        for l in &self.layers {
            v.extend(l.wq.iter());
            v.extend(l.wk.iter());
            v.extend(l.wv.iter());
            v.extend(l.wo.iter());
            v.push(&l.ln1_gamma);
            v.push(&l.ln1_beta);
            v.push(&l.ln2_gamma);
            v.push(&l.ln2_beta);
            v.push(&l.ff1);
            v.push(&l.ff2);
        }
        v.push(&self.final_gamma);
        v.push(&self.final_beta);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> =
            vec![&mut self.token_embedding, &mut self.pos_embedding, &mut self.head];
        for l in &mut self.layers {
            v.extend(l.wq.iter_mut());
            v.extend(l.wk.iter_mut());
            v.extend(l.wv.iter_mut());
            v.extend(l.wo.iter_mut());
            v.push(&mut l.ln1_gamma);
            v.push(&mut l.ln1_beta);
            v.push(&mut l.ln2_gamma);
            v.push(&mut l.ln2_beta);
            v.push(&mut l.ff1);
            v.push(&mut l.ff2);
        }
        v.push(&mut self.final_gamma);
        v.push(&mut self.final_beta);
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnableParams {
    /// frame_feature_dim x D, the only trainable path from pixels-stand-ins
    /// into the backbone.
    pub visual_proj: Tensor,
    pub prompt_pool: PromptPool,
    pub task_embeddings: TaskTypeEmbeddings,
    /// One scalar gate per injected layer, zero at build time.
    pub gates: Vec<Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub frozen: FrozenParams,
    pub learnable: LearnableParams,
    pub build_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub frozen: usize,
    pub learnable: usize,
}

/// Draw a rows x cols matrix with N(0, std^2) entries.
fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let values = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Tensor::new(vec![rows, cols], values).expect("valid shape")
}

/// Build a model from a seeded init. Frozen weights use fan-in scaled
/// normals, the prompt pool a small normal, task type embeddings unit
/// normals row-normalized, and gates exactly zero. Bit-identical for
/// identical (config, seed).
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(ModelParams, ParamCounts)> {
    config.validate()?;
    let d = config.model_dim;
    let dh = config.head_dim();
    let ffn = config.ffn_dim();

    let mut frozen_rng = rng::stream(seed, "init/frozen");
    let emb_std = 1.0 / (d as f64).sqrt();
    let token_embedding = normal_matrix(&mut frozen_rng, config.vocab_size, d, emb_std);
    let pos_embedding = normal_matrix(&mut frozen_rng, config.max_seq_len, d, emb_std);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut wq = Vec::with_capacity(config.num_heads);
        let mut wk = Vec::with_capacity(config.num_heads);
        let mut wv = Vec::with_capacity(config.num_heads);
        let mut wo = Vec::with_capacity(config.num_heads);
        for _ in 0..config.num_heads {
            wq.push(normal_matrix(&mut frozen_rng, d, dh, proj_std));
            wk.push(normal_matrix(&mut frozen_rng, d, dh, proj_std));
            wv.push(normal_matrix(&mut frozen_rng, d, dh, proj_std));
            wo.push(normal_matrix(&mut frozen_rng, dh, d, 1.0 / (dh as f64).sqrt()));
        }
        layers.push(LayerWeights {
            wq,
            wk,
            wv,
            wo,
            ln1_gamma: Tensor::new(vec![d], vec![1.0; d])?,
            ln1_beta: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::new(vec![d], vec![1.0; d])?,
            ln2_beta: Tensor::zeros(vec![d]),
            ff1: normal_matrix(&mut frozen_rng, d, ffn, proj_std),
            ff2: normal_matrix(&mut frozen_rng, ffn, d, 1.0 / (ffn as f64).sqrt()),
        });
    }
    // output head tied to the token table: head = token_embedding^T
    let mut head_values = vec![0.0; d * config.vocab_size];
    for v in 0..config.vocab_size {
        for j in 0..d {
            head_values[j * config.vocab_size + v] = token_embedding.row(v)[j];
        }
    }
    let mut frozen = FrozenParams {
        token_embedding,
        pos_embedding,
        head: Tensor::new(vec![d, config.vocab_size], head_values)?,
        layers,
        final_gamma: Tensor::new(vec![d], vec![1.0; d])?,
        final_beta: Tensor::zeros(vec![d]),
    };

    let mut proj_rng = rng::stream(seed, "init/visual_proj");
    let visual_proj = normal_matrix(
        &mut proj_rng,
        config.frame_feature_dim,
        d,
        1.0 / (config.frame_feature_dim as f64).sqrt(),
    );

    let mut prompt_rng = rng::stream(seed, "init/prompt_pool");
    let pool_rows = config.prompt_len * config.prompt_layers;
    let prompt_pool = PromptPool {
        matrix: normal_matrix(&mut prompt_rng, pool_rows, d, 0.1),
        prompt_len: config.prompt_len,
    };

    let mut task_rng = rng::stream(seed, "init/task_embeddings");
    let mut task_matrix = normal_matrix(&mut task_rng, config.max_tasks, d, 1.0);
    for r in 0..config.max_tasks {
        let norm: f64 = task_matrix.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut task_matrix.values_mut()[r * d..(r + 1) * d] {
            *v /= norm;
        }
    }

    let learnable = LearnableParams {
        visual_proj,
        prompt_pool,
        task_embeddings: TaskTypeEmbeddings { matrix: task_matrix, allocated: 0 },
        gates: (0..config.prompt_layers).map(|_| Tensor::scalar(0.0)).collect(),
    };

    if config.warmfit_steps > 0 {
        warm_fit(&mut frozen, config, seed, config.warmfit_steps)?;
    }

    let params = ModelParams { config: config.clone(), frozen, learnable, build_seed: seed };
    let counts = params.counts();
    Ok((params, counts))
}

impl ModelParams {
    pub fn counts(&self) -> ParamCounts {
        let frozen = self.frozen.tensors().iter().map(|t| t.numel()).sum();
        let learnable = self.learnable.visual_proj.numel()
            + self.learnable.prompt_pool.matrix.numel()
            + self.learnable.task_embeddings.matrix.numel()
            + self.learnable.gates.len();
        ParamCounts { frozen, learnable }
    }

    /// FNV-1a over the bit patterns of every frozen tensor, in a fixed order.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.frozen.tensors() {
            for v in t.values() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> BoundModel {
        let grad_frozen = matches!(mode, BindMode::WarmFit);
        let grad_learn = matches!(mode, BindMode::Train);
        let put = |tape: &mut Tape, t: &Tensor, g: bool| {
            let t = t.clone();
            tape.leaf(if g { t.with_grad() } else { t })
        };
        let layers = self
            .frozen
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: l.wq.iter().map(|t| put(tape, t, grad_frozen)).collect(),
                wk: l.wk.iter().map(|t| put(tape, t, grad_frozen)).collect(),
                wv: l.wv.iter().map(|t| put(tape, t, grad_frozen)).collect(),
                wo: l.wo.iter().map(|t| put(tape, t, grad_frozen)).collect(),
                ln1_gamma: put(tape, &l.ln1_gamma, grad_frozen),
                ln1_beta: put(tape, &l.ln1_beta, grad_frozen),
                ln2_gamma: put(tape, &l.ln2_gamma, grad_frozen),
                ln2_beta: put(tape, &l.ln2_beta, grad_frozen),
                ff1: put(tape, &l.ff1, grad_frozen),
                ff2: put(tape, &l.ff2, grad_frozen),
            })
            .collect();
        BoundModel {
            config: self.config.clone(),
            token_embedding: put(tape, &self.frozen.token_embedding, grad_frozen),
            pos_embedding: put(tape, &self.frozen.pos_embedding, grad_frozen),
            head: put(tape, &self.frozen.head, grad_frozen),
            layers,
            final_gamma: put(tape, &self.frozen.final_gamma, grad_frozen),
            final_beta: put(tape, &self.frozen.final_beta, grad_frozen),
            visual_proj: put(tape, &self.learnable.visual_proj, grad_learn),
            prompt_pool: put(tape, &self.learnable.prompt_pool.matrix, grad_learn),
            task_embeddings: put(tape, &self.learnable.task_embeddings.matrix, grad_learn),
            gates: self.learnable.gates.iter().map(|g| put(tape, g, grad_learn)).collect(),
            allocated: self.learnable.task_embeddings.allocated,
        }
    }
}

impl ModelParams {
    /// Learnable tensors in a fixed order: visual projection, prompt pool,
    /// task type embeddings, then one gate per injected layer. Aligned with
    /// [`BoundModel::learnable_vars`].
    pub fn learnable_tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.learnable.visual_proj,
            &self.learnable.prompt_pool.matrix,
            &self.learnable.task_embeddings.matrix,
        ];
        v.extend(self.learnable.gates.iter());
        v
    }

    pub fn learnable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.learnable.visual_proj,
            &mut self.learnable.prompt_pool.matrix,
            &mut self.learnable.task_embeddings.matrix,
        ];
        v.extend(self.learnable.gates.iter_mut());
        v
    }
}

impl BoundModel {
    /// Tape handles for the learnable set, aligned with
    /// [`ModelParams::learnable_tensors`].
    pub fn learnable_vars(&self) -> Vec<Var> {
        let mut v = vec![self.visual_proj, self.prompt_pool, self.task_embeddings];
        v.extend(self.gates.iter().copied());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Nothing requires gradient; forward passes record no backward nodes.
    Inference,
    /// The learnable set requires gradient; the backbone stays constant.
    Train,
    /// Backbone warm-fit: frozen weights require gradient instead.
    WarmFit,
}

/// Tape handles for one bound copy of the parameters.
pub struct BoundModel {
    pub config: ModelConfig,
    pub token_embedding: Var,
    pub pos_embedding: Var,
    pub head: Var,
    pub layers: Vec<BoundLayer>,
    pub final_gamma: Var,
    pub final_beta: Var,
    pub visual_proj: Var,
    pub prompt_pool: Var,
    pub task_embeddings: Var,
    pub gates: Vec<Var>,
    pub allocated: usize,
}

pub struct BoundLayer {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ff1: Var,
    pub ff2: Var,
}

/// Segment orderings for the three supervision directions: answer prediction
/// (video, question -> answer), question prediction (video, answer ->
/// question), and video prediction (question, answer -> video).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputOrder {
    VideoQuestionAnswer,
    VideoAnswerQuestion,
    QuestionAnswerVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Video,
    Question,
    Answer,
}

impl InputOrder {
    pub fn segments(self) -> [Segment; 3] {
        match self {
            InputOrder::VideoQuestionAnswer => [Segment::Video, Segment::Question, Segment::Answer],
            InputOrder::VideoAnswerQuestion => [Segment::Video, Segment::Answer, Segment::Question],
            InputOrder::QuestionAnswerVideo => [Segment::Question, Segment::Answer, Segment::Video],
        }
    }

}

/// An embedded input sequence plus segment geometry.
pub struct Embedded {
    pub seq: Var,
    /// Projected visual tokens (num_frames x D), kept for the InfoNCE loss.
    pub visual: Var,
    pub order: InputOrder,
    /// Start index of each segment, in sequence order.
    pub bounds: [usize; 3],
    /// Length of each segment, in sequence order.
    pub lens: [usize; 3],
}

impl Embedded {
    /// (start, len) of the given segment kind.
    pub fn span(&self, seg: Segment) -> (usize, usize) {
        let segs = self.order.segments();
        let i = segs.iter().position(|&s| s == seg).expect("segment present");
        (self.bounds[i], self.lens[i])
    }

    pub fn seq_len(&self) -> usize {
        self.lens.iter().sum()
    }
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    for &t in tokens {
        if t >= vocab {
            return Err(Error::OutOfVocab { id: t, vocab });
        }
    }
    Ok(())
}

/// Embed a sample as [segments in `order`]: projected frames, question token
/// embeddings, answer token embeddings. `answer` is passed explicitly so
/// candidate scoring can substitute alternatives for the gold answer.
pub fn embed_inputs(
    tape: &mut Tape,
    bound: &BoundModel,
    sample: &Sample,
    answer: &[usize],
    order: InputOrder,
) -> Result<Embedded> {
    let cfg = &bound.config;
    if sample.frames.is_empty() {
        return Err(Error::EmptySpan("video"));
    }
    if sample.question.is_empty() {
        return Err(Error::EmptySpan("question"));
    }
    if answer.is_empty() {
        return Err(Error::EmptySpan("answer"));
    }
    check_tokens(&sample.question, cfg.vocab_size)?;
    check_tokens(answer, cfg.vocab_size)?;
    let frame_dim = sample.frames[0].len();
    if frame_dim != cfg.frame_feature_dim || sample.frames.iter().any(|f| f.len() != frame_dim) {
        return Err(Error::DimensionMismatch(format!(
            "frame feature dim {} vs model {}",
            frame_dim, cfg.frame_feature_dim
        )));
    }
    let total = sample.frames.len() + sample.question.len() + answer.len();
    if total > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: total, max: cfg.max_seq_len });
    }

    let frames =
        Tensor::from_rows(&sample.frames).map_err(|_| Error::EmptySpan("video"))?;
    let frames = tape.constant(frames);
    let visual = tape.matmul(frames, bound.visual_proj)?;
    let q_emb = tape.lookup(bound.token_embedding, sample.question.clone())?;
    let a_emb = tape.lookup(bound.token_embedding, answer.to_vec())?;

    let seg_var = |s: Segment| match s {
        Segment::Video => visual,
        Segment::Question => q_emb,
        Segment::Answer => a_emb,
    };
    let seg_len = |s: Segment| match s {
        Segment::Video => sample.frames.len(),
        Segment::Question => sample.question.len(),
        Segment::Answer => answer.len(),
    };
    let segs = order.segments();
    let parts: Vec<Var> = segs.iter().map(|&s| seg_var(s)).collect();
    let seq = tape.concat_rows(&parts)?;
    let lens = [seg_len(segs[0]), seg_len(segs[1]), seg_len(segs[2])];
    let bounds = [0, lens[0], lens[0] + lens[1]];
    Ok(Embedded { seq, visual, order, bounds, lens })
}

pub struct ForwardOut {
    /// Final-layer hidden states after the last norm, seq_len x D.
    pub hidden: Var,
    /// seq_len x vocab_size.
    pub logits: Var,
}

/// Causal transformer forward pass. When `use_prompts` is set, each injected
/// layer also attends to its prompt rows as extra key/value entries, scaled
/// by that layer's gate.
pub fn forward_pass(
    tape: &mut Tape,
    bound: &BoundModel,
    seq: Var,
    use_prompts: bool,
) -> Result<ForwardOut> {
    let cfg = &bound.config;
    let len = tape.value(seq).shape()[0];
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len, max: cfg.max_seq_len });
    }
    let pos = tape.lookup(bound.pos_embedding, (0..len).collect())?;
    let mut x = tape.add(seq, pos)?;
    for (l, layer) in bound.layers.iter().enumerate() {
        let normed = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
        let block = if use_prompts && l >= cfg.first_prompt_layer() {
            Some(l - cfg.first_prompt_layer())
        } else {
            None
        };
        let mut attn: Option<Var> = None;
        for h in 0..cfg.num_heads {
            let q = tape.matmul(normed, layer.wq[h])?;
            let k = tape.matmul(normed, layer.wk[h])?;
            let v = tape.matmul(normed, layer.wv[h])?;
            let scores = tape.causal_scores(q, k, 0)?;
            let weights = tape.softmax(scores)?;
            let ctx = tape.matmul(weights, v)?;
            let mut head_out = tape.matmul(ctx, layer.wo[h])?;
            if let Some(block) = block {
                let rows: Vec<usize> =
                    (block * cfg.prompt_len..(block + 1) * cfg.prompt_len).collect();
                let prompts = tape.lookup(bound.prompt_pool, rows)?;
                let pk = tape.matmul(prompts, layer.wk[h])?;
                let pv = tape.matmul(prompts, layer.wv[h])?;
                let p_scores = tape.causal_scores(q, pk, cfg.prompt_len)?;
                let p_weights = tape.softmax(p_scores)?;
                let gated = tape.mul_scalar(p_weights, bound.gates[block])?;
                let p_ctx = tape.matmul(gated, pv)?;
                let p_out = tape.matmul(p_ctx, layer.wo[h])?;
                head_out = tape.add(head_out, p_out)?;
            }
            attn = Some(match attn {
                Some(acc) => tape.add(acc, head_out)?,
                None => head_out,
            });
        }
        x = tape.add(x, attn.expect("at least one head"))?;
        let normed2 = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
        let ff_in = tape.matmul(normed2, layer.ff1)?;
        let ff_act = tape.silu(ff_in)?;
        let ff_out = tape.matmul(ff_act, layer.ff2)?;
        x = tape.add(x, ff_out)?;
    }
    let hidden = tape.layer_norm(x, bound.final_gamma, bound.final_beta, LN_EPS)?;
    let logits = tape.matmul(hidden, bound.head)?;
    Ok(ForwardOut { hidden, logits })
}

/// Length-normalized autoregressive log-likelihood of `candidate` as the
/// answer, under the video-question-answer ordering with prompts enabled.
pub fn answer_log_likelihood(
    params: &ModelParams,
    sample: &Sample,
    candidate: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, BindMode::Inference);
    let embedded =
        embed_inputs(&mut tape, &bound, sample, candidate, InputOrder::VideoQuestionAnswer)?;
    let out = forward_pass(&mut tape, &bound, embedded.seq, true)?;
    let lsm = tape.log_softmax(out.logits)?;
    let lsm = tape.value(lsm);
    let (start, len) = embedded.span(Segment::Answer);
    let mut total = 0.0;
    for (k, &tok) in candidate.iter().enumerate() {
        total += lsm.row(start + k - 1)[tok];
    }
    Ok(total / len as f64)
}

/// Score every candidate and return (argmax index, per-candidate scores).
/// Ties break toward the lowest candidate index.
pub fn score_candidates(params: &ModelParams, sample: &Sample) -> Result<(usize, Vec<f64>)> {
    if sample.candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut scores = Vec::with_capacity(sample.candidates.len());
    for cand in &sample.candidates {
        scores.push(answer_log_likelihood(params, sample, cand)?);
    }
    Ok((argmax_lowest(&scores), scores))
}

/// First index attaining the maximum.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced greedy decode of an answer of the given length: each step
/// picks the argmax next token given video, question, and the tokens chosen
/// so far.
pub fn greedy_answer(params: &ModelParams, sample: &Sample, len: usize) -> Result<Vec<usize>> {
    let mut chosen: Vec<usize> = Vec::with_capacity(len);
    for step in 0..len {
        let mut candidate = chosen.clone();
        candidate.push(0); // placeholder; logits at the decision position cannot see it
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, BindMode::Inference);
        let embedded =
            embed_inputs(&mut tape, &bound, sample, &candidate, InputOrder::VideoQuestionAnswer)?;
        let out = forward_pass(&mut tape, &bound, embedded.seq, true)?;
        let logits = tape.value(out.logits);
        let (start, _) = embedded.span(Segment::Answer);
        let row = logits.row(start + step - 1);
        chosen.push(argmax_lowest(row));
    }
    Ok(chosen)
}

/// Write a checkpoint document: config, every weight, allocation state, and
/// the build seed. JSON round-trips f64 values bit-exactly.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer(std::io::BufWriter::new(file), params)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let file = std::fs::File::open(path.as_ref())?;
    let params: ModelParams = serde_json::from_reader(std::io::BufReader::new(file))?;
    params.config.validate()?;
    Ok(params)
}

/// Pre-freeze next-token fit of the backbone on a deterministic token stream
/// (arithmetic progressions over the vocabulary). Plain Adam, no decay.
fn warm_fit(frozen: &mut FrozenParams, config: &ModelConfig, seed: u64, steps: usize) -> Result<()> {
    let mut data_rng = rng::stream(seed, "warmfit/data");
    let seq_len = 16.min(config.max_seq_len);
    let sizes: Vec<usize> = frozen.tensors().iter().map(|t| t.numel()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let (lr, b1, b2, eps): (f64, f64, f64, f64) = (1e-2, 0.9, 0.999, 1e-8);

    for step in 1..=steps {
        let start = data_rng.gen_range(0..config.vocab_size);
        let stride = 1 + data_rng.gen_range(0..4);
        let tokens: Vec<usize> =
            (0..seq_len).map(|i| (start + i * stride) % config.vocab_size).collect();

        let mut tape = Tape::new();
        let params_view = ModelParams {
            config: config.clone(),
            frozen: frozen.clone(),
            learnable: LearnableParams {
                visual_proj: Tensor::zeros(vec![config.frame_feature_dim, config.model_dim]),
                prompt_pool: PromptPool {
                    matrix: Tensor::zeros(vec![
                        config.prompt_len * config.prompt_layers,
                        config.model_dim,
                    ]),
                    prompt_len: config.prompt_len,
                },
                task_embeddings: TaskTypeEmbeddings {
                    matrix: Tensor::zeros(vec![config.max_tasks, config.model_dim]),
                    allocated: 0,
                },
                gates: vec![Tensor::scalar(0.0); config.prompt_layers],
            },
            build_seed: seed,
        };
        let bound = params_view.bind(&mut tape, BindMode::WarmFit);
        let emb = tape.lookup(bound.token_embedding, tokens.clone())?;
        let out = forward_pass(&mut tape, &bound, emb, false)?;
        let pairs: Vec<(usize, usize)> =
            (0..seq_len - 1).map(|i| (i, tokens[i + 1])).collect();
        let loss = tape.cross_entropy(out.logits, pairs)?;
        let grads = tape.backward(loss)?;

        let vars: Vec<Var> = {
            let mut vs = vec![bound.token_embedding, bound.pos_embedding, bound.head];
            for l in &bound.layers {
                vs.extend(&l.wq);
                vs.extend(&l.wk);
                vs.extend(&l.wv);
                vs.extend(&l.wo);
                vs.push(l.ln1_gamma);
                vs.push(l.ln1_beta);
                vs.push(l.ln2_gamma);
                vs.push(l.ln2_beta);
                vs.push(l.ff1);
                vs.push(l.ff2);
            }
            vs.push(bound.final_gamma);
            vs.push(bound.final_beta);
            vs
        };
        let t = step as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for ((tensor, var), (mi, vi)) in
            frozen.tensors_mut().into_iter().zip(&vars).zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = grads.get_or_zero(*var, &tape);
            for (j, gv) in g.values().iter().enumerate() {
                mi[j] = b1 * mi[j] + (1.0 - b1) * gv;
                vi[j] = b2 * vi[j] + (1.0 - b2) * gv * gv;
                let update = lr * (mi[j] / bc1) / ((vi[j] / bc2).sqrt() + eps);
                tensor.values_mut()[j] -= update;
            }
        }
    }
    Ok(())
}

/// Average next-token cross-entropy of the backbone on the warm-fit stream;
/// exposed so tests can confirm the warm-fit actually fits.
pub fn warmfit_eval_loss(params: &ModelParams, seed: u64, batches: usize) -> Result<f64> {
    let mut data_rng = rng::stream(seed, "warmfit/eval");
    let cfg = &params.config;
    let seq_len = 16.min(cfg.max_seq_len);
    let mut total = 0.0;
    for _ in 0..batches {
        let start = data_rng.gen_range(0..cfg.vocab_size);
        let stride = 1 + data_rng.gen_range(0..4);
        let tokens: Vec<usize> =
            (0..seq_len).map(|i| (start + i * stride) % cfg.vocab_size).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, BindMode::Inference);
        let emb = tape.lookup(bound.token_embedding, tokens.clone())?;
        let out = forward_pass(&mut tape, &bound, emb, false)?;
        let pairs: Vec<(usize, usize)> =
            (0..seq_len - 1).map(|i| (i, tokens[i + 1])).collect();
        let loss = tape.cross_entropy(out.logits, pairs)?;
        total += tape.value(loss).item() / (seq_len - 1) as f64;
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{default_specs, generate_task_stream};

    fn toy_sample() -> Sample {
        let mut specs = default_specs();
        for s in &mut specs {
            s.train_size = 2;
            s.test_size = 1;
        }
        let stream = generate_task_stream(&specs, &[0, 1, 2, 3], 0).unwrap();
        stream.tasks[0].train[0].clone()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default();
        let (a, _) = build_model(&cfg, 5).unwrap();
        let (b, _) = build_model(&cfg, 5).unwrap();
        assert_eq!(a.frozen_hash(), b.frozen_hash());
        assert_eq!(a.learnable.visual_proj, b.learnable.visual_proj);
        assert_eq!(a.learnable.prompt_pool.matrix, b.learnable.prompt_pool.matrix);
        let (c, _) = build_model(&cfg, 6).unwrap();
        assert_ne!(a.frozen_hash(), c.frozen_hash());
    }

    #[test]
    fn learnable_count_matches_formula() {
        let cfg = ModelConfig {
            model_dim: 16,
            num_layers: 2,
            num_heads: 2,
            prompt_len: 2,
            prompt_layers: 2,
            frame_feature_dim: 8,
            max_tasks: 4,
            ..ModelConfig::default()
        };
        let (_, counts) = build_model(&cfg, 0).unwrap();
        // count-by-formula: visual projection + prompt pool + task type
        // embeddings + one gate per injected layer
        let expected = 8 * 16 + (2 * 2) * 16 + 4 * 16 + 2;
        assert_eq!(counts.learnable, expected);
    }

    #[test]
    fn learnable_fraction_is_small_at_default_config() {
        let cfg = ModelConfig::default();
        let (_, counts) = build_model(&cfg, 0).unwrap();
        // formula oracle for both sides
        let d = cfg.model_dim;
        let expected_learnable =
            cfg.frame_feature_dim * d + cfg.prompt_len * cfg.prompt_layers * d + cfg.max_tasks * d
                + cfg.prompt_layers;
        assert_eq!(counts.learnable, expected_learnable);
        let per_layer = cfg.num_heads * (3 * d * cfg.head_dim() + cfg.head_dim() * d)
            + 4 * d
            + d * cfg.ffn_dim()
            + cfg.ffn_dim() * d;
        let expected_frozen =
            2 * cfg.vocab_size * d + cfg.max_seq_len * d + cfg.num_layers * per_layer + 2 * d;
        assert_eq!(counts.frozen, expected_frozen);
        assert!((counts.learnable as f64) / (counts.frozen as f64) < 0.1);
    }

    #[test]
    fn embed_boundaries_follow_ordering() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 1).unwrap();
        let mut sample = toy_sample();
        sample.question = vec![30, 31, 14, 32, 33];
        let answer = vec![1, 2];

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, BindMode::Inference);
        let e = embed_inputs(&mut tape, &bound, &sample, &answer, InputOrder::VideoQuestionAnswer)
            .unwrap();
        assert_eq!(e.seq_len(), 15);
        assert_eq!(e.bounds, [0, 8, 13]);
        assert_eq!(tape.value(e.seq).shape(), &[15, cfg.model_dim]);

        let e2 = embed_inputs(&mut tape, &bound, &sample, &answer, InputOrder::QuestionAnswerVideo)
            .unwrap();
        assert_eq!(e2.bounds, [0, 5, 7]);
        assert_eq!(e2.span(Segment::Video), (7, 8));
    }

    #[test]
    fn zero_frame_projects_to_zero() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 1).unwrap();
        let mut sample = toy_sample();
        sample.frames = vec![vec![0.0; cfg.frame_feature_dim]; 3];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, BindMode::Inference);
        let e = embed_inputs(&mut tape, &bound, &sample, &[1], InputOrder::VideoQuestionAnswer)
            .unwrap();
        assert!(tape.value(e.visual).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_rejects_out_of_vocab_and_long_sequences() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, BindMode::Inference);

        let mut sample = toy_sample();
        sample.question = vec![cfg.vocab_size];
        assert!(matches!(
            embed_inputs(&mut tape, &bound, &sample, &[1], InputOrder::VideoQuestionAnswer),
            Err(Error::OutOfVocab { .. })
        ));

        let mut sample = toy_sample();
        sample.question = vec![30; cfg.max_seq_len];
        assert!(matches!(
            embed_inputs(&mut tape, &bound, &sample, &[1], InputOrder::VideoQuestionAnswer),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn prompt_injection_is_noop_at_zero_gates() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 3).unwrap();
        let sample = toy_sample();
        let run = |use_prompts: bool| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, BindMode::Inference);
            let e = embed_inputs(&mut tape, &bound, &sample, sample.gold_answer(), InputOrder::VideoQuestionAnswer)
                .unwrap();
            let out = forward_pass(&mut tape, &bound, e.seq, use_prompts).unwrap();
            tape.value(out.logits).values().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 3).unwrap();
        let sample = toy_sample();
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, BindMode::Inference);
            let e = embed_inputs(&mut tape, &bound, &sample, sample.gold_answer(), InputOrder::VideoQuestionAnswer)
                .unwrap();
            let out = forward_pass(&mut tape, &bound, e.seq, true).unwrap();
            tape.value(out.logits)
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 4).unwrap();
        let base = toy_sample();
        let mut rng = crate::rng::stream(0, "causality-test");
        for trial in 0..20 {
            let ans_len = 2;
            let qlen = base.question.len();
            let total = base.frames.len() + qlen + ans_len;
            let k = rng.gen_range(1..total);
            let a = base.clone();
            let mut b = base.clone();
            // perturb exactly position k (frame content or token identity)
            if k < a.frames.len() {
                for v in b.frames[k].iter_mut() {
                    *v += 1.0;
                }
            } else if k < a.frames.len() + qlen {
                let qi = k - a.frames.len();
                b.question[qi] = (b.question[qi] + 1) % cfg.vocab_size;
            }
            let ans_a = vec![1, 2];
            let mut ans_b = ans_a.clone();
            if k >= a.frames.len() + qlen {
                let ai = k - a.frames.len() - qlen;
                ans_b[ai] = (ans_b[ai] + 1) % cfg.vocab_size;
            }
            let logits = |s: &Sample, ans: &[usize]| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, BindMode::Inference);
                let e = embed_inputs(&mut tape, &bound, s, ans, InputOrder::VideoQuestionAnswer)
                    .unwrap();
                let out = forward_pass(&mut tape, &bound, e.seq, true).unwrap();
                tape.value(out.logits).values().to_vec()
            };
            let la = logits(&a, &ans_a);
            let lb = logits(&b, &ans_b);
            for pos in 0..k {
                let row_a = &la[pos * cfg.vocab_size..(pos + 1) * cfg.vocab_size];
                let row_b = &lb[pos * cfg.vocab_size..(pos + 1) * cfg.vocab_size];
                assert_eq!(row_a, row_b, "trial {trial}: position {pos} changed by perturbing {k}");
            }
        }
    }

    #[test]
    fn identical_candidates_tie_break_to_lowest_index() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 2).unwrap();
        let mut sample = toy_sample();
        sample.candidates = vec![vec![3, 4], vec![3, 4], vec![3, 4]];
        sample.gold_index = 0;
        let (idx, scores) = score_candidates(&params, &sample).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(scores[0], scores[1]);
        assert_eq!(scores[0], scores[2]);
    }

    #[test]
    fn argmax_is_invariant_to_constant_shift() {
        let scores = vec![-3.0, -1.5, -2.0, -7.0];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.25).collect();
        assert_eq!(argmax_lowest(&scores), argmax_lowest(&shifted));
    }

    #[test]
    fn empty_candidates_error() {
        let cfg = ModelConfig::default();
        let (params, _) = build_model(&cfg, 2).unwrap();
        let mut sample = toy_sample();
        sample.candidates = vec![];
        assert!(matches!(score_candidates(&params, &sample), Err(Error::NoCandidates)));
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let cfg = ModelConfig {
            model_dim: 16,
            num_layers: 2,
            prompt_layers: 2,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let (mut params, _) = build_model(&cfg, 9).unwrap();
        params.learnable.task_embeddings.allocated = 2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.frozen_hash(), params.frozen_hash());
        assert_eq!(loaded.learnable.task_embeddings.allocated, 2);
        assert_eq!(loaded.build_seed, params.build_seed);
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded.learnable.visual_proj), bits(&params.learnable.visual_proj));
        assert_eq!(
            bits(&loaded.learnable.prompt_pool.matrix),
            bits(&params.learnable.prompt_pool.matrix)
        );
        // a second save of the loaded params is byte-identical
        let path2 = dir.path().join("ckpt2.json");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn warmfit_reduces_next_token_loss() {
        let base = ModelConfig {
            model_dim: 16,
            num_layers: 2,
            prompt_layers: 2,
            vocab_size: 32,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let (random_model, _) = build_model(&base, 11).unwrap();
        let warm_cfg = ModelConfig { warmfit_steps: 120, ..base.clone() };
        let (warm_model, _) = build_model(&warm_cfg, 11).unwrap();
        let before = warmfit_eval_loss(&random_model, 99, 8).unwrap();
        let after = warmfit_eval_loss(&warm_model, 99, 8).unwrap();
        assert!(after < before, "warm-fit should reduce loss: {after} vs {before}");
    }
}

//! Deterministic synthetic multimodal QA task streams, plus JSONL ingestion
//! of externally tokenized datasets.
//!
//! A "video" is a sequence of frame feature vectors encoding a symbol
//! sequence (one-hot plus seeded Gaussian noise). Four question families
//! cover descriptive, temporal, and causal reasoning:
//!
//! - COUNT: how many frames show symbol s?
//! - FIRST: which symbol appears in the first frame?
//! - AFTER: which symbol immediately follows the first occurrence of s?
//! - CAUSE: which trigger symbol produced effect w (two frames later)?
//!
//! Families use disjoint question-template tokens, so the task stream has a
//! real distribution shift; symbol alphabets overlap deliberately so tasks
//! compete for the same learnable parameters.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Token layout shared by the generator and the toy tokenizer. Any model
/// vocabulary of at least `MIN_VOCAB` tokens can embed these streams.
pub mod vocab {
    /// Number answers: token for count n is `NUM_BASE + n`.
    pub const NUM_BASE: usize = 1;
    /// Highest representable count.
    pub const NUM_MAX: usize = 12;
    /// Symbol s (an index into frame one-hot dimensions) is `SYM_BASE + s`.
    pub const SYM_BASE: usize = 14;
    pub const SYM_COUNT: usize = 16;
    /// Question template tokens, disjoint across families.
    pub const TMPL_COUNT: [usize; 3] = [30, 31, 32];
    pub const TMPL_FIRST: [usize; 3] = [33, 34, 35];
    pub const TMPL_AFTER: [usize; 3] = [36, 37, 38];
    pub const TMPL_CAUSE: [usize; 3] = [39, 40, 41];
    /// Questions refer to symbol s through `QSYM_BASE + s`, a separate token
    /// space from answer symbols, the way questions and answers phrase the
    /// same entity differently.
    pub const QSYM_BASE: usize = 42;
    /// Smallest vocabulary that fits every generated token.
    pub const MIN_VOCAB: usize = 58;

    pub fn number_token(n: usize) -> usize {
        debug_assert!(n <= NUM_MAX);
        NUM_BASE + n
    }

    pub fn symbol_token(s: usize) -> usize {
        debug_assert!(s < SYM_COUNT);
        SYM_BASE + s
    }

    /// Inverse of `symbol_token`, if the token is a symbol.
    pub fn token_symbol(tok: usize) -> Option<usize> {
        (SYM_BASE..SYM_BASE + SYM_COUNT).contains(&tok).then(|| tok - SYM_BASE)
    }

    pub fn q_symbol_token(s: usize) -> usize {
        debug_assert!(s < SYM_COUNT);
        QSYM_BASE + s
    }

    pub fn token_q_symbol(tok: usize) -> Option<usize> {
        (QSYM_BASE..QSYM_BASE + SYM_COUNT).contains(&tok).then(|| tok - QSYM_BASE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskFamily {
    Count,
    First,
    After,
    Cause,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskFamily::Count => "COUNT",
            TaskFamily::First => "FIRST",
            TaskFamily::After => "AFTER",
            TaskFamily::Cause => "CAUSE",
        };
        f.write_str(s)
    }
}

/// One task's generating rule and sizes. `symbols` are indices into the frame
/// one-hot dimensions; CAUSE uses `cause_rules` (a trigger -> effect bijection)
/// plus a disjoint `filler` alphabet instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    #[serde(default)]
    pub symbols: Vec<usize>,
    #[serde(default)]
    pub cause_rules: Vec<[usize; 2]>,
    #[serde(default)]
    pub filler: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    pub seed: u64,
    #[serde(default = "default_num_frames")]
    pub num_frames: usize,
    #[serde(default = "default_frame_dim")]
    pub frame_dim: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_candidates() -> usize {
    5
}
fn default_num_frames() -> usize {
    8
}
fn default_frame_dim() -> usize {
    16
}
fn default_noise() -> f64 {
    0.05
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::BadConfig(msg));
        if self.num_frames < 2 {
            return fail(format!("num_frames {} < 2", self.num_frames));
        }
        if self.candidates < 2 {
            return fail(format!("candidates {} < 2", self.candidates));
        }
        let check_symbols = |symbols: &[usize]| -> Result<()> {
            for &s in symbols {
                if s >= self.frame_dim.min(vocab::SYM_COUNT) {
                    return Err(Error::BadConfig(format!(
                        "symbol {s} exceeds frame_dim {} / symbol table {}",
                        self.frame_dim,
                        vocab::SYM_COUNT
                    )));
                }
            }
            Ok(())
        };
        let pool = match self.family {
            TaskFamily::Count => {
                if self.symbols.len() < 2 {
                    return fail("COUNT needs at least 2 symbols".into());
                }
                check_symbols(&self.symbols)?;
                self.max_count() // distractor counts: 0..=max_count minus gold
            }
            TaskFamily::First | TaskFamily::After => {
                if self.symbols.len() < 2 {
                    return fail(format!("{} needs at least 2 symbols", self.family));
                }
                if self.family == TaskFamily::After {
                    if self.num_frames < 4 {
                        return fail("AFTER needs num_frames >= 4".into());
                    }
                    // every scene is 2-3 frames with a distinct symbol
                    if self.symbols.len() < self.num_frames.div_ceil(2) {
                        return fail(format!(
                            "AFTER needs at least {} symbols for {} frames",
                            self.num_frames.div_ceil(2),
                            self.num_frames
                        ));
                    }
                }
                check_symbols(&self.symbols)?;
                self.symbols.len() - 1
            }
            TaskFamily::Cause => {
                if self.cause_rules.is_empty() {
                    return fail("CAUSE needs a rule table".into());
                }
                if self.num_frames < 3 {
                    return fail("CAUSE needs num_frames >= 3".into());
                }
                if self.filler.is_empty() {
                    return fail("CAUSE needs a filler alphabet".into());
                }
                let triggers: Vec<usize> = self.cause_rules.iter().map(|r| r[0]).collect();
                let effects: Vec<usize> = self.cause_rules.iter().map(|r| r[1]).collect();
                check_symbols(&triggers)?;
                check_symbols(&effects)?;
                check_symbols(&self.filler)?;
                let distinct = |v: &[usize]| {
                    let mut s = v.to_vec();
                    s.sort_unstable();
                    s.dedup();
                    s.len() == v.len()
                };
                if !distinct(&triggers) || !distinct(&effects) {
                    return fail("CAUSE rule table must be a bijection".into());
                }
                let clash = triggers.iter().any(|t| effects.contains(t))
                    || self.filler.iter().any(|f| triggers.contains(f) || effects.contains(f));
                if clash {
                    return fail("CAUSE triggers, effects, filler must be disjoint".into());
                }
                triggers.len() - 1
            }
        };
        if pool < self.candidates - 1 {
            return Err(Error::DistractorPool { pool, needed: self.candidates - 1 });
        }
        Ok(())
    }

    /// Largest prescribed count for COUNT tasks; keeps gold answers uniform
    /// and the candidate pool exactly the answer space.
    pub fn max_count(&self) -> usize {
        (self.candidates - 1).min(self.num_frames).min(vocab::NUM_MAX)
    }

    /// Template tokens of this family (the non-slot question tokens).
    pub fn template_tokens(&self) -> &'static [usize; 3] {
        match self.family {
            TaskFamily::Count => &vocab::TMPL_COUNT,
            TaskFamily::First => &vocab::TMPL_FIRST,
            TaskFamily::After => &vocab::TMPL_AFTER,
            TaskFamily::Cause => &vocab::TMPL_CAUSE,
        }
    }
}

/// The canonical 4-task stream: COUNT, FIRST, AFTER, CAUSE with overlapping
/// symbol alphabets, 256 train / 64 test samples each, 5-way candidates.
pub fn default_specs() -> Vec<TaskSpec> {
    let base = |family, seed| TaskSpec {
        family,
        symbols: Vec::new(),
        cause_rules: Vec::new(),
        filler: Vec::new(),
        train_size: 256,
        test_size: 64,
        candidates: 5,
        seed,
        num_frames: default_num_frames(),
        frame_dim: default_frame_dim(),
        noise_sigma: default_noise(),
    };
    let mut count = base(TaskFamily::Count, 0);
    count.symbols = (0..6).collect();
    let mut first = base(TaskFamily::First, 1);
    first.symbols = (0..6).collect();
    let mut after = base(TaskFamily::After, 2);
    after.symbols = (0..8).collect();
    let mut cause = base(TaskFamily::Cause, 3);
    cause.cause_rules = vec![[10, 4], [11, 5], [12, 6], [13, 7], [14, 8], [15, 9]];
    cause.filler = (0..4).collect();
    vec![count, first, after, cause]
}

/// One training/evaluation unit: frames, a tokenized question, answer
/// candidates, and the gold candidate index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: usize,
    pub frames: Vec<Vec<f64>>,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gold_index: usize,
}

impl Sample {
    pub fn gold_answer(&self) -> &[usize] {
        &self.candidates[self.gold_index]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    pub task_id: usize,
    pub spec: Option<TaskSpec>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// An ordered stream of tasks. `order[i]` is the index (into `tasks`) of the
/// i-th task to be trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub order: Vec<usize>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Tasks in training order.
    pub fn ordered(&self) -> impl Iterator<Item = &TaskData> {
        self.order.iter().map(|&i| &self.tasks[i])
    }
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::BadPermutation(perm.to_vec(), n));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::BadPermutation(perm.to_vec(), n));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Generate a full stream. Pure function of (specs, order, master_seed):
/// the same inputs always produce a byte-identical stream.
pub fn generate_task_stream(
    specs: &[TaskSpec],
    order: &[usize],
    master_seed: u64,
) -> Result<TaskStream> {
    if specs.is_empty() {
        return Err(Error::BadConfig("need at least one task spec".into()));
    }
    validate_permutation(order, specs.len())?;
    let mut tasks = Vec::with_capacity(specs.len());
    for (idx, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut rng = rng::stream(master_seed, &format!("task/{idx}/seed/{}", spec.seed));
        let total = spec.train_size + spec.test_size;
        let mut samples = Vec::with_capacity(total);
        for _ in 0..total {
            samples.push(generate_sample(&mut rng, spec, idx)?);
        }
        let test = samples.split_off(spec.train_size);
        tasks.push(TaskData { task_id: idx, spec: Some(spec.clone()), train: samples, test });
    }
    Ok(TaskStream { tasks, order: order.to_vec() })
}

fn encode_frames(rng: &mut impl Rng, symbols: &[usize], frame_dim: usize, sigma: f64) -> Vec<Vec<f64>> {
    let gauss = rand_distr::Normal::new(0.0, sigma).expect("sigma >= 0");
    symbols
        .iter()
        .map(|&s| {
            (0..frame_dim)
                .map(|d| {
                    let base = if d == s { 1.0 } else { 0.0 };
                    base + rng.sample(gauss)
                })
                .collect()
        })
        .collect()
}

/// Assemble the candidate list: gold at a random index, distractors drawn
/// without replacement from `pool` (none of which may equal the gold answer).
fn place_candidates(
    rng: &mut impl Rng,
    gold: Vec<usize>,
    pool: &[Vec<usize>],
    k: usize,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let pool: Vec<&Vec<usize>> = pool.iter().filter(|c| **c != gold).collect();
    if pool.len() < k - 1 {
        return Err(Error::DistractorPool { pool: pool.len(), needed: k - 1 });
    }
    let mut chosen: Vec<Vec<usize>> = pool
        .choose_multiple(rng, k - 1)
        .map(|c| (*c).clone())
        .collect();
    let gold_index = rng.gen_range(0..k);
    chosen.insert(gold_index, gold);
    Ok((chosen, gold_index))
}

/// Run-structured symbol sequence: scenes of 2-3 identical frames, adjacent
/// scenes showing different symbols. Gives the synthetic videos the temporal
/// continuity the frame-prediction loss feeds on.
fn run_sequence(rng: &mut impl Rng, symbols: &[usize], nv: usize) -> Vec<usize> {
    let mut seq = Vec::with_capacity(nv);
    let mut prev: Option<usize> = None;
    while seq.len() < nv {
        let mut sym = *symbols.choose(rng).unwrap();
        while symbols.len() > 1 && Some(sym) == prev {
            sym = *symbols.choose(rng).unwrap();
        }
        let len = rng.gen_range(2..=3usize).min(nv - seq.len());
        seq.extend(std::iter::repeat(sym).take(len));
        prev = Some(sym);
    }
    seq
}

/// Run-structured walk along a fixed symbol ring: scene k+1 shows the ring
/// successor of scene k's symbol. Transitions are predictable once the ring
/// is known, so frame prediction has a learnable structure.
fn ring_sequence(rng: &mut impl Rng, symbols: &[usize], nv: usize) -> Vec<usize> {
    let mut idx = rng.gen_range(0..symbols.len());
    let mut seq = Vec::with_capacity(nv);
    while seq.len() < nv {
        let len = rng.gen_range(2..=3usize).min(nv - seq.len());
        seq.extend(std::iter::repeat(symbols[idx]).take(len));
        idx = (idx + 1) % symbols.len();
    }
    seq
}

/// Scene lengths (2-3 frames) covering nv positions.
fn run_lengths(rng: &mut impl Rng, nv: usize) -> Vec<usize> {
    let mut lens = Vec::new();
    let mut total = 0;
    while total < nv {
        let len = rng.gen_range(2..=3usize).min(nv - total);
        lens.push(len);
        total += len;
    }
    lens
}

fn generate_sample(rng: &mut impl Rng, spec: &TaskSpec, task_id: usize) -> Result<Sample> {
    use vocab::*;
    let nv = spec.num_frames;
    let (symbols_seq, question, gold): (Vec<usize>, Vec<usize>, Vec<usize>) = match spec.family {
        TaskFamily::Count => {
            // prescribe the count so gold answers are uniform over 0..=max_count
            let max_count = spec.max_count();
            let count = rng.gen_range(0..=max_count);
            let queried = *spec.symbols.choose(rng).unwrap();
            let others: Vec<usize> =
                spec.symbols.iter().copied().filter(|&s| s != queried).collect();
            let mut seq = ring_sequence(rng, &others, nv);
            if count > 0 {
                let start = rng.gen_range(0..=nv - count);
                for slot in &mut seq[start..start + count] {
                    *slot = queried;
                }
            }
            let q = vec![TMPL_COUNT[0], q_symbol_token(queried)];
            (seq, q, vec![number_token(count)])
        }
        TaskFamily::First => {
            // the question cites the closing scene, so question prediction
            // stays grounded in the video
            let seq = run_sequence(rng, &spec.symbols, nv);
            let q = vec![TMPL_FIRST[0], q_symbol_token(seq[nv - 1])];
            let gold = vec![symbol_token(seq[0])];
            (seq, q, gold)
        }
        TaskFamily::After => {
            let lens = run_lengths(rng, nv);
            let scene_syms: Vec<usize> =
                spec.symbols.choose_multiple(rng, lens.len()).copied().collect();
            let mut seq = Vec::with_capacity(nv);
            for (len, &sym) in lens.iter().zip(&scene_syms) {
                seq.extend(std::iter::repeat(sym).take(*len));
            }
            let i = rng.gen_range(0..scene_syms.len() - 1);
            let queried = scene_syms[i];
            let q = vec![TMPL_AFTER[0], q_symbol_token(queried)];
            let gold = vec![symbol_token(scene_syms[i + 1])];
            (seq, q, gold)
        }
        TaskFamily::Cause => {
            let mut seq = ring_sequence(rng, &spec.filler, nv);
            let rule = spec.cause_rules.choose(rng).unwrap();
            let p = rng.gen_range(0..nv - 2);
            seq[p] = rule[0];
            seq[p + 2] = rule[1];
            let q = vec![TMPL_CAUSE[0], q_symbol_token(rule[1])];
            let gold = vec![symbol_token(rule[0])];
            (seq, q, gold)
        }
    };
    let frames = encode_frames(rng, &symbols_seq, spec.frame_dim, spec.noise_sigma);
    let pool = distractor_pool(spec);
    let (candidates, gold_index) = place_candidates(rng, gold, &pool, spec.candidates)?;
    Ok(Sample { task_id, frames, question, candidates, gold_index })
}

/// Same-type answer pool distractors may be drawn from.
fn distractor_pool(spec: &TaskSpec) -> Vec<Vec<usize>> {
    use vocab::*;
    match spec.family {
        TaskFamily::Count => (0..=spec.max_count()).map(|n| vec![number_token(n)]).collect(),
        TaskFamily::First | TaskFamily::After => {
            spec.symbols.iter().map(|&s| vec![symbol_token(s)]).collect()
        }
        TaskFamily::Cause => {
            spec.cause_rules.iter().map(|r| vec![symbol_token(r[0])]).collect()
        }
    }
}

/// Recover the symbol sequence a frame encoding was built from (argmax).
pub fn decode_symbols(frames: &[Vec<f64>]) -> Vec<usize> {
    frames
        .iter()
        .map(|f| {
            f.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Independent re-derivation of the gold answer from frames + question by the
/// family's rule. Used by the answerability tests.
pub fn oracle_answer(spec: &TaskSpec, sample: &Sample) -> Option<Vec<usize>> {
    use vocab::*;
    let seq = decode_symbols(&sample.frames);
    match spec.family {
        TaskFamily::Count => {
            let queried = token_q_symbol(sample.question[1])?;
            let count = seq.iter().filter(|&&s| s == queried).count();
            Some(vec![number_token(count)])
        }
        TaskFamily::First => Some(vec![symbol_token(seq[0])]),
        TaskFamily::After => {
            let queried = token_q_symbol(sample.question[1])?;
            let first = seq.iter().position(|&s| s == queried)?;
            let next = seq[first..].iter().find(|&&s| s != queried)?;
            Some(vec![symbol_token(*next)])
        }
        TaskFamily::Cause => {
            let effect = token_q_symbol(sample.question[1])?;
            let pos = seq.iter().position(|&s| s == effect)?;
            if pos < 2 {
                return None;
            }
            Some(vec![symbol_token(seq[pos - 2])])
        }
    }
}

/// Per-task (train, test) sizes, in stream task order.
pub fn split_sizes(stream: &TaskStream) -> Vec<(usize, usize)> {
    stream.tasks.iter().map(|t| (t.train.len(), t.test.len())).collect()
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    task_id: usize,
    frames: Vec<Vec<f64>>,
    question: Vec<usize>,
    candidates: Vec<Vec<usize>>,
    gold_index: usize,
    split: String,
}

/// Load a stream from a JSONL file: one object per line with fields task_id,
/// frames, question, candidates, gold_index, split in {train, test}. Tasks
/// appear in the order their ids are first seen.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<TaskStream> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut tasks: Vec<TaskData> = Vec::new();
    let mut id_to_slot: Vec<(usize, usize)> = Vec::new();
    let mut any = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let n = lineno + 1;
        let rec: JsonlRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Jsonl { line: n, msg: e.to_string() })?;
        let fail = |msg: String| Error::Jsonl { line: n, msg };
        if rec.candidates.len() < 2 {
            return Err(fail(format!("candidates: need >= 2, got {}", rec.candidates.len())));
        }
        if rec.gold_index >= rec.candidates.len() {
            return Err(fail(format!(
                "gold_index: {} out of range for {} candidates",
                rec.gold_index,
                rec.candidates.len()
            )));
        }
        if rec.candidates.iter().any(Vec::is_empty) {
            return Err(fail("candidates: empty candidate token list".into()));
        }
        if rec.question.is_empty() {
            return Err(fail("question: empty".into()));
        }
        if rec.frames.is_empty() {
            return Err(fail("frames: empty".into()));
        }
        let dim = rec.frames[0].len();
        if dim == 0 || rec.frames.iter().any(|f| f.len() != dim) {
            return Err(fail("frames: inconsistent feature dimensions".into()));
        }
        let split_train = match rec.split.as_str() {
            "train" => true,
            "test" => false,
            other => return Err(fail(format!("split: expected train|test, got {other:?}"))),
        };
        let slot = match id_to_slot.iter().find(|(id, _)| *id == rec.task_id) {
            Some(&(_, slot)) => slot,
            None => {
                let slot = tasks.len();
                id_to_slot.push((rec.task_id, slot));
                tasks.push(TaskData {
                    task_id: rec.task_id,
                    spec: None,
                    train: Vec::new(),
                    test: Vec::new(),
                });
                slot
            }
        };
        let sample = Sample {
            task_id: rec.task_id,
            frames: rec.frames,
            question: rec.question,
            candidates: rec.candidates,
            gold_index: rec.gold_index,
        };
        if split_train {
            tasks[slot].train.push(sample);
        } else {
            tasks[slot].test.push(sample);
        }
    }
    if !any {
        return Err(Error::NoSamples);
    }
    let order = (0..tasks.len()).collect();
    Ok(TaskStream { tasks, order })
}

/// Serialize a stream to the same JSONL schema `load_jsonl` reads.
/// Deterministic: tasks in slot order, train split before test split.
pub fn write_jsonl(stream: &TaskStream, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for task in &stream.tasks {
        for (samples, split) in [(&task.train, "train"), (&task.test, "test")] {
            for s in samples.iter() {
                let rec = JsonlRecord {
                    task_id: s.task_id,
                    frames: s.frames.clone(),
                    question: s.question.clone(),
                    candidates: s.candidates.clone(),
                    gold_index: s.gold_index,
                    split: split.into(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

use thiserror::Error;

/// Errors shared across the crate. Shape errors always name the offending
/// operation and the shapes involved so failures at toy scale stay loud.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported input shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("tensor rank must be 1..=3, got shape {0:?}")]
    BadRank(Vec<usize>),
    #[error("shape {shape:?} does not match {len} values")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of bounds for {bound} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("token id {id} out of vocabulary (vocab_size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{0} span is empty")]
    EmptySpan(&'static str),
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("InfoNCE needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("task index {index} is not allocated (allocated {allocated})")]
    UnallocatedTask { index: usize, allocated: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("invalid permutation {0:?} of {1} tasks")]
    BadPermutation(Vec<usize>, usize),
    #[error("distractor pool of {pool} cannot supply {needed} distractors")]
    DistractorPool { pool: usize, needed: usize },
    #[error("line {line}: {msg}")]
    Jsonl { line: usize, msg: String },
    #[error("no samples")]
    NoSamples,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("warmup_steps {warmup} must be < total_steps {total}")]
    BadSchedule { warmup: usize, total: usize },
    #[error("accuracy matrix incomplete: row {row} has {got} entries, expected {expected}")]
    IncompleteMatrix {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("silhouette needs at least 2 distinct labels")]
    SingleLabel,
    #[error("test split is empty")]
    EmptySplit,
    #[error("stream and model disagree: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

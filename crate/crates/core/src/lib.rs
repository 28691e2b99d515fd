//! Desk-scale continual learning for multimodal question answering.
//!
//! A miniature frozen transformer answers multiple-choice questions about
//! synthetic "videos" (sequences of frame feature vectors). Only a visual
//! projection, a shared prompt pool with per-layer gates, and per-task type
//! embeddings are learnable. Training on a sequence of tasks combines four
//! objectives: answer prediction, question prediction from (video, answer),
//! frame-level InfoNCE from (question, answer), and a contrastive loss that
//! aligns question-reweighted prompts with their task's type embedding.
//! Forgetting is quantified from the lower-triangular accuracy matrix.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use autodiff::{grad_check, Gradients, OpKind, Tape, Tensor, Var};
pub use error::{Error, Result};

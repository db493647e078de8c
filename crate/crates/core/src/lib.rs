//! Generative pretraining over structured behavioral event sequences.
//!
//! The crate covers the full offline/online loop: event ingestion and
//! synthetic corpora, structured tokenization, a small reverse-mode tensor
//! engine, the pattern-aware causal transformer, its generative and
//! contrastive training objectives, full-ranking evaluation, downstream
//! deviation and merchant-risk scoring, and a cached-embedding scoring
//! service.

pub mod downstream;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod model;
pub mod serving;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{PantherError, Result};

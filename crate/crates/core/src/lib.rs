//! Aspect-controllable product summarization.
//!
//! The crate covers the whole pipeline: corpus construction from
//! professional multi-aspect summaries, LCS-based extractor supervision,
//! an aspect-conditioned pointer-generator whose word attention is
//! reweighted by a sentence extractor, beam-search decoding, and
//! character-level evaluation (ROUGE, Distinct-n).

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod exec;
pub mod labeling;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;

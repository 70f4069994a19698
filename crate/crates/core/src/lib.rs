//! Joint triple extraction with a single shared transformer.
//!
//! One set of transformer weights serves two roles, selected by the
//! attention mask: with a partial causal mask it is a sequence-to-sequence
//! generator that writes out linearized triples, and with an all-zero mask it
//! is a bidirectional classifier that judges whether a single triple is
//! faithful to its sentence. The classifier is then reused at inference time
//! to filter generated triples.
//!
//! Module map:
//!
//! * [`tensor`] dense f64 tensors, tape-based reverse-mode differentiation, Adam
//! * [`tokenizer`] greedy longest-match WordPiece vocabulary
//! * [`codec`] triple linearization, parsing and negative construction
//! * [`model`] embeddings, attention masks, transformer, losses, checkpoints
//! * [`training`] dynamic-mask batching and the joint training loop
//! * [`decoding`] beam search, match scoring and calibration
//! * [`eval`] datasets, synthetic corpora and exact-match metrics
//! * [`cli`] the `cgt` command-line front end

pub mod cli;
pub mod codec;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

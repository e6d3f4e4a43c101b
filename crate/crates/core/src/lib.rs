//! A from-scratch transformer text classifier, desk scale.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`] — dense tensors with a reverse-mode gradient tape.
//! - [`corpus`] — TSV ingestion, WordPiece tokenization, fixed-length encoding.
//! - [`encoder`] — BERT-style transformer blocks with optional bottleneck
//!   adapters, emitting per-layer CLS vectors.
//! - [`heads`] — vertical attention pooling over the per-layer CLS stack and
//!   the softmax classification head.
//! - [`training`] — dual-LR AdamW, warmup + inverse-square-root decay,
//!   macro-F1 early stopping, checkpointing.
//! - [`eval`] — multiplicative softmax ensembling, classification metrics,
//!   and sequence-length analyses.

pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod heads;
pub mod numerics;
pub mod training;

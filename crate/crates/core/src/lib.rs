//! Core library for training a bidirectional multilingual transformer
//! language model whose hidden states are aligned across languages by
//! unsupervised regularizers, and for transferring an LSTM-CRF sequence
//! labeler from a source language to a target language with zero target
//! annotations.
//!
//! Module map:
//! - [`tensor`]: dense tensors over `f32`/`f64` plus the shared kernels.
//! - [`graph`]: reverse-mode automatic differentiation over a recorded
//!   computation graph.
//! - [`params`]: named parameter sets and gradient stores.
//! - [`optim`]: Adam with global-norm clipping, and a finite-difference
//!   gradient checker.
//! - [`checkpoint`]: the binary tensor container and key=value sidecar.
//! - [`corpus`]: corpus loading, vocabularies, batch planning, and the
//!   synthetic bilingual pair generator.
//! - [`model`]: the bidirectional transformer LM with per-language
//!   embeddings and shared blocks.
//! - [`align`]: the identical-string, mean/variance and average-linkage
//!   regularizers and the combined training objective.
//! - [`clcr`]: frozen contextual-representation extraction and the two
//!   layer-combination schemes.
//! - [`tagger`]: char-LSTM + word-LSTM + linear-chain CRF labeler.
//! - [`eval`]: entity-level F1 and token accuracy.
//! - [`pipeline`]: run configuration and the train/evaluate/neighbors
//!   entry points used by the CLI.

pub mod align;
pub mod checkpoint;
pub mod clcr;
pub mod config;
pub mod corpus;
pub mod model;
pub mod error;
pub mod eval;
pub mod graph;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tagger;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

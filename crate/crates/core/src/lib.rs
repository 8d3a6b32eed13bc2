//! Sequence-labeling engine for scholarly entity tagging.
//!
//! The crate provides, end to end:
//!
//! - a canonical entity-type schema with alias normalization and BIO algebra
//!   ([`schema`]);
//! - corpus construction: CoNLL I/O, merging heterogeneous sources,
//!   distance labeling from lexicons, stratified selection, splits
//!   ([`corpus`]);
//! - a minimal f64 reverse-mode autodiff tape ([`autodiff`]);
//! - token encoders (embeddings, char CNN, word CNN/LSTM/BiLSTM) projected to
//!   per-tag emission scores ([`encoders`]);
//! - a linear-chain CRF output layer with exact inference ([`crf`]);
//! - training, span-level evaluation and inter-annotator agreement
//!   ([`train`], [`eval`]);
//! - model persistence and text annotation ([`model`]).

pub mod autodiff;
pub mod corpus;
pub mod crf;
pub mod encoders;
pub mod eval;
pub mod model;
pub mod train;
pub mod schema;

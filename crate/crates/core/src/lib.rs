//! Detection of machine-generated text through factual structure.
//!
//! The pipeline turns a document into a graph of entity mentions, runs a
//! small graph-convolutional classifier over it, and separately exposes
//! entity/sentence consistency statistics that contrast human-written and
//! generated text. Everything is plain `f64` on the CPU; gradients come from
//! the reverse-mode tape in [`tape`].
//!
//! Stages, in dependency order:
//!
//! * [`text`] - tokenization, sentence segmentation, JSONL corpus loading
//! * [`entity`] - mention extraction and surface normalization
//! * [`graph`] - entity graph construction and normalized adjacency
//! * [`consistency`] - consistency counts and kernel density profiles
//! * [`tensor`] / [`tape`] - dense matrices and reverse-mode autodiff
//! * [`optim`] - AdamW with decoupled weight decay and gradient clipping
//! * [`embed`] - token representation providers and entity vector store
//! * [`nsp`] - next-sentence-prediction dataset, scorer, and training
//! * [`model`] - the document classifier itself
//! * [`train`] - training loop, evaluation, checkpointing
//! * [`synth`] - paired synthetic corpus generator

pub mod checkpoint;
pub mod consistency;
pub mod embed;
pub mod entity;
pub mod error;
pub mod graph;
pub mod model;
pub mod nsp;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};

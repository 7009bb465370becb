//! Point-or-generate dialogue state tracking.
//!
//! The crate provides the full pipeline: corpus ingestion, weak-supervision
//! label generation, a neural tracker (pointer, generator, switcher, and
//! per-slot classifier sharing two recurrent encoders) built on a
//! self-contained reverse-mode autodiff core, multi-task training with ADAM,
//! and an evaluation/experiment harness.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod evaluation;
pub mod labelgen;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod training;

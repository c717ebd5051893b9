//! Promptable open-vocabulary object detection on synthetic scenes.
//!
//! The crate trains and runs a small DETR-style detector end to end on a
//! procedurally generated shape corpus: text, visual-exemplar and customized
//! prompts share one fused image/prompt encoder, and task heads decode boxes,
//! masks, keypoints and captions from the same object queries. Everything is
//! deterministic given a seed, CPU-only, and sized so the full pipeline
//! (data synthesis, two training stages, distillation, evaluation) runs in
//! test suites.

pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod edge;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod heads;
pub mod keypoints;
pub mod language;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod tensor;
pub mod train;

pub use cli::cli_main;
pub use error::{Error, Result};

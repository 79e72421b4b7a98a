//! Adversarial training for attention mechanisms.
//!
//! The crate bundles a small reverse-mode autodiff engine, a BiLSTM model
//! with additive attention for single- and pair-sequence classification,
//! perturbation builders for word-embedding and attention-score adversarial
//! training, an Adam trainer, data tooling including a synthetic bAbI-style
//! task generator, and attention/saliency analysis.

pub mod adversary;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};

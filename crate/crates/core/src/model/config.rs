use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-sequence (classification) or pair-sequence (QA / NLI) input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Single,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

/// Shape of the model.
///
/// `hidden_dim` is the width of the concatenated bidirectional state, so
/// each direction has `hidden_dim / 2` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub label_count: usize,
    pub task_kind: TaskKind,
    pub output_activation: OutputActivation,
}

impl ModelConfig {
    /// Config with the attention width set to `hidden_dim / 2` and the
    /// output activation implied by the task kind.
    pub fn new(
        task_kind: TaskKind,
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        label_count: usize,
    ) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            attn_dim: (hidden_dim / 2).max(1),
            label_count,
            task_kind,
            output_activation: match task_kind {
                TaskKind::Single => OutputActivation::Sigmoid,
                TaskKind::Pair => OutputActivation::Softmax,
            },
        }
    }

    pub fn with_attn_dim(mut self, attn_dim: usize) -> Self {
        self.attn_dim = attn_dim;
        self
    }

    /// Units per LSTM direction.
    pub fn direction_dim(&self) -> usize {
        self.hidden_dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("label_count", self.label_count),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if !self.hidden_dim.is_multiple_of(2) {
            bad.push(format!("hidden_dim must be even, got {}", self.hidden_dim));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

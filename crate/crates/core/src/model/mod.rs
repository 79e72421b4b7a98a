//! BiLSTM encoder with additive attention for single- and pair-sequence
//! classification.
//!
//! The public functions here work on one instance at a time and return
//! plain values. Training and evaluation go through [`graph`], which builds
//! the same computation for a padded batch on an autodiff tape.

mod config;
pub(crate) mod graph;
mod params;

pub use config::{ModelConfig, OutputActivation, TaskKind};
pub use graph::{Batch, SeqBatch};
pub use params::{AttentionParams, BiLstmParams, LstmParams, ModelParameters, PAD_ID, UNK_ID};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{shape_err, Error, Result};
use graph::{EncodeOptions, ParamVars};

/// Token ids of one instance plus its label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInstance {
    /// `X_S` for single tasks, `X_P` for pair tasks.
    pub tokens: Vec<usize>,
    /// `X_Q`, pair tasks only.
    pub query: Option<Vec<usize>>,
    pub label: usize,
}

/// Pre-softmax scores, attention weights and validity mask of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Output probabilities, one per class.
    pub prediction: Vec<f64>,
    pub attention: AttentionState,
    /// `T × m` encoder states.
    pub hidden: Tensor,
    /// Attention-weighted sum of the hidden states.
    pub context: Vec<f64>,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.prediction)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Which bidirectional encoder to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// The single-sequence encoder.
    Enc,
    /// Passage encoder of a pair model.
    EncP,
    /// Question / premise encoder of a pair model.
    EncQ,
}

/// `T × d` embedding rows for `token_ids`.
///
/// This is a plain table lookup. The padding row of a table built by
/// [`ModelParameters::init`] is zero and never receives a gradient, so the
/// padding id yields a zero row.
pub fn embed(token_ids: &[usize], params: &ModelParameters) -> Result<Tensor> {
    let table = &params.embedding;
    let mut data = Vec::with_capacity(token_ids.len() * table.cols());
    for &id in token_ids {
        if id >= table.rows() {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: id,
                len: table.rows(),
            });
        }
        data.extend_from_slice(table.row_slice(id));
    }
    Tensor::new(token_ids.len(), table.cols(), data)
}

/// Runs a bidirectional encoder over `T × d` embeddings and returns the
/// `T × m` concatenated states, starting from zero states in both directions.
pub fn encode(embeddings: &Tensor, params: &ModelParameters, which: EncoderKind) -> Result<Tensor> {
    let [steps, d] = embeddings.shape();
    if steps == 0 {
        return Err(Error::Empty("sequence"));
    }
    let expected_d = params.embedding.cols();
    if d != expected_d {
        return Err(shape_err("encode", format!("embedding width {d}, model expects {expected_d}")));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let lstm = match which {
        EncoderKind::Enc | EncoderKind::EncP => &pv.encoder,
        EncoderKind::EncQ => pv
            .query_encoder
            .as_ref()
            .ok_or_else(|| shape_err("encode", "model has no query encoder"))?,
    };
    let seq = SeqBatch::dense(1, steps);
    let inputs: Vec<_> = (0..steps)
        .map(|t| tape.constant(Tensor::row(embeddings.row_slice(t).to_vec())))
        .collect();
    let hidden = graph::run_bilstm(&mut tape, lstm, graph::StepInputs::Vectors(&inputs), &seq)?;
    stack_rows(&tape, &hidden, 0)
}

/// `ã_t = c·tanh(W h_t + b)` for every row of `hidden`.
pub fn attention_scores_single(hidden: &Tensor, params: &ModelParameters) -> Result<Vec<f64>> {
    scores_impl(hidden, None, params)
}

/// `ã_t = c·tanh(W1 h_t + W2 q + b)` where `q` is the final query state.
pub fn attention_scores_pair(hidden_p: &Tensor, q_final: &[f64], params: &ModelParameters) -> Result<Vec<f64>> {
    if params.attention.w_query.is_none() {
        return Err(shape_err("attention_scores_pair", "model has no query projection"));
    }
    scores_impl(hidden_p, Some(q_final), params)
}

fn scores_impl(hidden: &Tensor, q: Option<&[f64]>, params: &ModelParameters) -> Result<Vec<f64>> {
    let m = params.attention.w.cols();
    if hidden.cols() != m || q.is_some_and(|q| q.len() != m) {
        return Err(shape_err("attention_scores", format!("hidden {:?}, model width {m}", hidden.shape())));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let rows: Vec<_> = (0..hidden.rows())
        .map(|t| tape.constant(Tensor::row(hidden.row_slice(t).to_vec())))
        .collect();
    let q = q.map(|q| tape.constant(Tensor::row(q.to_vec())));
    let scores = graph::attention_scores(&mut tape, &pv, &rows, q)?;
    Ok(tape.value(scores).data().to_vec())
}

/// Full forward pass for one instance.
///
/// When `score_perturbation` is given it is added to the attention scores
/// before the softmax; its length must equal the sequence length.
pub fn forward(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    score_perturbation: Option<&[f64]>,
) -> Result<ForwardOutput> {
    let batch = Batch::new(&[instance], config)?;
    let offsets = match score_perturbation {
        Some(r) if r.len() != batch.steps() => {
            return Err(shape_err(
                "forward",
                format!("perturbation of length {} for a sequence of length {}", r.len(), batch.steps()),
            ))
        }
        Some(r) => Some(Tensor::row(r.to_vec())),
        None => None,
    };
    let mut out = forward_outputs(params, config, &batch, offsets.as_ref(), None)?;
    Ok(out.remove(0))
}

/// Forward pass for several instances at once; outputs are in input order
/// and cropped to each instance's own length.
pub fn forward_batch(
    instances: &[&EncodedInstance],
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Vec<ForwardOutput>> {
    let batch = Batch::new(instances, config)?;
    forward_outputs(params, config, &batch, None, None)
}

pub(crate) fn forward_outputs(
    params: &ModelParameters,
    config: &ModelConfig,
    batch: &Batch,
    score_offsets: Option<&Tensor>,
    emb_offsets: Option<&[Tensor]>,
) -> Result<Vec<ForwardOutput>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let opts = EncodeOptions {
        emb_offsets,
        watch_embeddings: false,
    };
    let enc = graph::encode_batch(&mut tape, &pv, batch, opts)?;
    let scores = match score_offsets {
        Some(r) => {
            let r = tape.constant(r.clone());
            tape.add(enc.scores, r)?
        }
        None => enc.scores,
    };
    let head = graph::head(&mut tape, &pv, &enc, scores, batch.passage.mask(), config.output_activation)?;
    let steps = batch.steps();
    let (scores_v, weights_v, probs_v, ctx_v) = (
        tape.value(scores),
        tape.value(head.weights),
        tape.value(head.probs),
        tape.value(head.context),
    );
    let mut outs = Vec::with_capacity(batch.rows());
    for r in 0..batch.rows() {
        let len = batch.passage.lengths()[r];
        let mask = batch.passage.mask()[r * steps..r * steps + len].to_vec();
        outs.push(ForwardOutput {
            prediction: probs_v.row_slice(r).to_vec(),
            attention: AttentionState {
                scores: scores_v.row_slice(r)[..len].to_vec(),
                weights: weights_v.row_slice(r)[..len].to_vec(),
                mask,
            },
            hidden: stack_rows(&tape, &enc.hidden[..len], r)?,
            context: ctx_v.row_slice(r).to_vec(),
        });
    }
    Ok(outs)
}

/// Row `r` of each per-step matrix, stacked into a `T × m` tensor.
fn stack_rows(tape: &Tape, steps: &[crate::autodiff::Var], r: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = steps.iter().map(|&v| tape.value(v).row_slice(r).to_vec()).collect();
    Tensor::from_rows(&rows)
}

//! Builds the model's computation on a [`Tape`] for a padded batch.
//!
//! Sequences are right-padded. The forward LSTM simply runs over the
//! padding (those states are masked out of attention and never selected
//! as a query state); the backward LSTM zeroes its state on padded steps so
//! each row starts from a zero state at its own last token.

use std::collections::HashMap;

use super::config::{ModelConfig, OutputActivation, TaskKind};
use super::params::{ModelParameters, PAD_ID};
use super::EncodedInstance;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// Right-padded batch of token-id sequences.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    rows: usize,
    steps: usize,
    ids: Vec<usize>,
    lengths: Vec<usize>,
    mask: Vec<bool>,
}

impl SeqBatch {
    /// Trailing padding ids are dropped; a sequence must keep at least one
    /// non-padding token. Inner padding ids stay but are masked.
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let lengths: Vec<usize> = seqs
            .iter()
            .map(|s| s.iter().rposition(|&id| id != PAD_ID).map_or(0, |p| p + 1))
            .collect();
        if lengths.contains(&0) {
            return Err(Error::Empty("sequence"));
        }
        let rows = seqs.len();
        let steps = *lengths.iter().max().expect("non-empty");
        let mut ids = vec![PAD_ID; rows * steps];
        let mut mask = vec![false; rows * steps];
        for (r, s) in seqs.iter().enumerate() {
            for t in 0..lengths[r] {
                ids[r * steps + t] = s[t];
                mask[r * steps + t] = s[t] != PAD_ID;
            }
        }
        Ok(Self {
            rows,
            steps,
            ids,
            lengths,
            mask,
        })
    }

    /// All-live batch of dense (non-token) inputs.
    pub(crate) fn dense(rows: usize, steps: usize) -> Self {
        Self {
            rows,
            steps,
            ids: vec![PAD_ID + 1; rows * steps],
            lengths: vec![steps; rows],
            mask: vec![true; rows * steps],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Row-major `rows × steps` validity mask.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn id(&self, row: usize, step: usize) -> usize {
        self.ids[row * self.steps + step]
    }

    fn step_ids(&self, t: usize) -> Vec<Option<usize>> {
        (0..self.rows)
            .map(|r| Some(self.id(r, t)).filter(|&id| id != PAD_ID))
            .collect()
    }

    /// `rows × 1` indicator of `t < length`, or `None` when every row is live.
    fn live_col(&self, t: usize) -> Option<Tensor> {
        if self.lengths.iter().all(|&l| t < l) {
            return None;
        }
        Some(Tensor::column(
            self.lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect(),
        ))
    }

    fn max_id(&self) -> usize {
        self.ids.iter().copied().max().unwrap_or(0)
    }
}

/// Model inputs for a group of instances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub passage: SeqBatch,
    pub query: Option<SeqBatch>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(instances: &[&EncodedInstance], config: &ModelConfig) -> Result<Self> {
        let passage = SeqBatch::new(&instances.iter().map(|i| i.tokens.as_slice()).collect::<Vec<_>>())?;
        let query = match config.task_kind {
            TaskKind::Single => None,
            TaskKind::Pair => {
                let qs = instances
                    .iter()
                    .map(|i| i.query.as_deref().ok_or(Error::Config("pair task instance without query".into())))
                    .collect::<Result<Vec<_>>>()?;
                Some(SeqBatch::new(&qs)?)
            }
        };
        for s in std::iter::once(&passage).chain(query.as_ref()) {
            let max = s.max_id();
            if max >= config.vocab_size {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: max,
                    len: config.vocab_size,
                });
            }
        }
        let labels: Vec<usize> = instances.iter().map(|i| i.label).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= config.label_count) {
            return Err(Error::OutOfRange {
                what: "label set",
                index: bad,
                len: config.label_count,
            });
        }
        Ok(Self { passage, query, labels })
    }

    pub fn rows(&self) -> usize {
        self.passage.rows
    }

    pub fn steps(&self) -> usize {
        self.passage.steps
    }
}

pub(crate) struct LstmVars {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

pub(crate) struct BiLstmVars {
    forward: LstmVars,
    backward: LstmVars,
}

/// Model parameters registered on a tape.
pub(crate) struct ParamVars {
    pub embedding: Var,
    pub encoder: BiLstmVars,
    pub query_encoder: Option<BiLstmVars>,
    attn_w: Var,
    attn_w_query: Option<Var>,
    attn_b: Var,
    attn_c: Var,
    dec_w: Var,
    dec_b: Var,
    /// Same order as [`ModelParameters::named`].
    pub ordered: Vec<Var>,
}

impl ParamVars {
    /// Registers every parameter as a leaf: trainable leaves when gradients
    /// with respect to θ are wanted, constants otherwise.
    pub fn register(tape: &mut Tape, params: &ModelParameters, trainable: bool) -> Self {
        let mut by_name = HashMap::new();
        let mut ordered = Vec::new();
        for (name, t) in params.named() {
            let v = if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            };
            ordered.push(v);
            by_name.insert(name, (v, t.cols()));
        }
        let get = |n: &str| by_name[n].0;
        let lstm = |prefix: &str, dir: &str| LstmVars {
            w_ih: get(&format!("{prefix}.{dir}.w_ih")),
            w_hh: get(&format!("{prefix}.{dir}.w_hh")),
            bias: get(&format!("{prefix}.{dir}.bias")),
            hidden: by_name[&format!("{prefix}.{dir}.w_hh")].1,
        };
        let bilstm = |prefix: &str| BiLstmVars {
            forward: lstm(prefix, "fwd"),
            backward: lstm(prefix, "bwd"),
        };
        let pair = params.query_encoder.is_some();
        Self {
            embedding: get("embedding"),
            encoder: bilstm(if pair { "enc_p" } else { "enc" }),
            query_encoder: pair.then(|| bilstm("enc_q")),
            attn_w: get("attn.w"),
            attn_w_query: by_name.get("attn.w_query").map(|x| x.0),
            attn_b: get("attn.b"),
            attn_c: get("attn.c"),
            dec_w: get("dec.w"),
            dec_b: get("dec.b"),
            ordered,
        }
    }
}

/// One cell update from the already projected input `x·W_ihᵀ`.
fn lstm_step(tape: &mut Tape, p: &LstmVars, xw: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
    let n = p.hidden;
    let pre = match state {
        Some((h, _)) => {
            let hh = tape.matmul_nt(h, p.w_hh)?;
            tape.add(xw, hh)?
        }
        None => xw,
    };
    let hc = tape.lstm_cell(pre, p.bias, state.map(|s| s.1))?;
    Ok((tape.slice_cols(hc, 0, n)?, tape.slice_cols(hc, n, 2 * n)?))
}

/// What the encoder reads at each step.
#[derive(Clone, Copy)]
pub(crate) enum StepInputs<'a> {
    /// One `rows × d` input per step.
    Vectors(&'a [Var]),
    /// The batch's token ids looked up in this embedding table. The
    /// input projection is applied to the whole table once and its rows
    /// are gathered, which is cheaper when the vocabulary is small.
    Tokens(Var),
}

/// `x_t·W_ihᵀ` for every step.
fn project_inputs(tape: &mut Tape, p: &LstmVars, inputs: StepInputs<'_>, seq: &SeqBatch) -> Result<Vec<Var>> {
    match inputs {
        StepInputs::Vectors(xs) => xs.iter().map(|&x| tape.matmul_nt(x, p.w_ih)).collect(),
        StepInputs::Tokens(table) => {
            let projected = tape.matmul_nt(table, p.w_ih)?;
            (0..seq.steps).map(|t| tape.gather_rows(projected, &seq.step_ids(t))).collect()
        }
    }
}

/// Runs both directions and returns the concatenated state per step.
pub(crate) fn run_bilstm(tape: &mut Tape, p: &BiLstmVars, inputs: StepInputs<'_>, seq: &SeqBatch) -> Result<Vec<Var>> {
    let steps = seq.steps;
    if let StepInputs::Vectors(xs) = inputs {
        if xs.len() != steps {
            return Err(shape_err("bilstm", format!("{} inputs for {steps} steps", xs.len())));
        }
    }
    let xw = project_inputs(tape, &p.forward, inputs, seq)?;
    let mut fwd = Vec::with_capacity(steps);
    let mut state = None;
    for x in xw {
        let s = lstm_step(tape, &p.forward, x, state)?;
        fwd.push(s.0);
        state = Some(s);
    }
    let xw = project_inputs(tape, &p.backward, inputs, seq)?;
    let mut bwd = vec![None; steps];
    let mut state = None;
    for t in (0..steps).rev() {
        let (mut h, mut c) = lstm_step(tape, &p.backward, xw[t], state)?;
        if let Some(live) = seq.live_col(t) {
            let live = tape.constant(live);
            h = tape.mul_col(h, live)?;
            c = tape.mul_col(c, live)?;
        }
        bwd[t] = Some(h);
        state = Some((h, c));
    }
    fwd.into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat_cols(&[f, b.expect("filled")]))
        .collect()
}

/// `rows × d` embedding inputs, one per step.
fn embed_steps(tape: &mut Tape, table: Var, seq: &SeqBatch) -> Result<Vec<Var>> {
    (0..seq.steps).map(|t| tape.gather_rows(table, &seq.step_ids(t))).collect()
}

/// Selects each row's state at its own last token.
fn last_states(tape: &mut Tape, hidden: &[Var], seq: &SeqBatch) -> Result<Var> {
    if seq.lengths.iter().all(|&l| l == seq.steps) {
        return Ok(hidden[seq.steps - 1]);
    }
    let mut acc: Option<Var> = None;
    for (t, &h) in hidden.iter().enumerate().take(seq.steps) {
        if !seq.lengths.contains(&(t + 1)) {
            continue;
        }
        let pick = Tensor::column(seq.lengths.iter().map(|&l| if l == t + 1 { 1.0 } else { 0.0 }).collect());
        let pick = tape.constant(pick);
        let part = tape.mul_col(h, pick)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("at least one length matches"))
}

/// Encoder side of a pass: everything up to the pre-softmax scores.
pub(crate) struct Encoded {
    /// Clean passage embeddings per step, before offsets. Empty when the
    /// lookup was fused into the input projection.
    pub emb_clean: Vec<Var>,
    pub hidden: Vec<Var>,
    pub scores: Var,
    pub rows: usize,
    pub steps: usize,
}

#[derive(Default)]
pub(crate) struct EncodeOptions<'a> {
    /// Per-step `rows × d` constants added to the passage embeddings.
    pub emb_offsets: Option<&'a [Tensor]>,
    /// Watch the clean passage embeddings so their gradient can be read.
    pub watch_embeddings: bool,
}

pub(crate) fn encode_batch(tape: &mut Tape, pv: &ParamVars, batch: &Batch, opts: EncodeOptions<'_>) -> Result<Encoded> {
    let seq = &batch.passage;
    let plain = opts.emb_offsets.is_none() && !opts.watch_embeddings;
    if plain && tape.shape(pv.embedding)[0] <= seq.rows * seq.steps {
        let hidden = run_bilstm(tape, &pv.encoder, StepInputs::Tokens(pv.embedding), seq)?;
        let query_final = encode_query(tape, pv, batch)?;
        let scores = attention_scores(tape, pv, &hidden, query_final)?;
        return Ok(Encoded {
            emb_clean: Vec::new(),
            hidden,
            scores,
            rows: seq.rows,
            steps: seq.steps,
        });
    }
    let mut emb_clean = embed_steps(tape, pv.embedding, seq)?;
    if opts.watch_embeddings {
        for e in &mut emb_clean {
            *e = tape.watch(*e)?;
        }
    }
    let emb = match opts.emb_offsets {
        None => emb_clean.clone(),
        Some(offsets) => {
            if offsets.len() != seq.steps {
                return Err(shape_err("embedding perturbation", format!("{} steps for {}", offsets.len(), seq.steps)));
            }
            let mut out = Vec::with_capacity(seq.steps);
            for (&e, off) in emb_clean.iter().zip(offsets) {
                let off = tape.constant(off.clone());
                out.push(tape.add(e, off)?);
            }
            out
        }
    };
    let hidden = run_bilstm(tape, &pv.encoder, StepInputs::Vectors(&emb), seq)?;
    let query_final = encode_query(tape, pv, batch)?;
    let scores = attention_scores(tape, pv, &hidden, query_final)?;
    Ok(Encoded {
        emb_clean,
        hidden,
        scores,
        rows: seq.rows,
        steps: seq.steps,
    })
}

/// Final query state for pair tasks. The query is never perturbed.
fn encode_query(tape: &mut Tape, pv: &ParamVars, batch: &Batch) -> Result<Option<Var>> {
    match (&batch.query, &pv.query_encoder) {
        (Some(q), Some(qenc)) => {
            let emb;
            let inputs = if tape.shape(pv.embedding)[0] <= q.rows * q.steps {
                StepInputs::Tokens(pv.embedding)
            } else {
                emb = embed_steps(tape, pv.embedding, q)?;
                StepInputs::Vectors(&emb)
            };
            let qhidden = run_bilstm(tape, qenc, inputs, q)?;
            Ok(Some(last_states(tape, &qhidden, q)?))
        }
        (None, None) => Ok(None),
        _ => Err(shape_err("encode", "query input does not match model kind")),
    }
}

/// `rows × T` additive attention scores.
pub(crate) fn attention_scores(tape: &mut Tape, pv: &ParamVars, hidden: &[Var], query_final: Option<Var>) -> Result<Var> {
    let qproj = match (query_final, pv.attn_w_query) {
        (Some(q), Some(w2)) => Some(tape.matmul_nt(q, w2)?),
        (None, _) => None,
        (Some(_), None) => return Err(shape_err("attention", "query state given to a single-sequence model")),
    };
    let mut cols = Vec::with_capacity(hidden.len());
    for &h in hidden {
        let mut pre = tape.matmul_nt(h, pv.attn_w)?;
        if let Some(q) = qproj {
            pre = tape.add(pre, q)?;
        }
        let pre = tape.add_row(pre, pv.attn_b)?;
        let u = tape.tanh(pre)?;
        cols.push(tape.matmul_nt(u, pv.attn_c)?);
    }
    tape.concat_cols(&cols)
}

pub(crate) struct Head {
    pub weights: Var,
    pub context: Var,
    pub probs: Var,
}

/// Softmax over `scores`, pooling, decoder and output activation.
pub(crate) fn head(
    tape: &mut Tape,
    pv: &ParamVars,
    enc: &Encoded,
    scores: Var,
    mask: &[bool],
    activation: OutputActivation,
) -> Result<Head> {
    if tape.shape(scores) != [enc.rows, enc.steps] {
        return Err(shape_err("head", format!("scores {:?} for {}x{}", tape.shape(scores), enc.rows, enc.steps)));
    }
    let weights = tape.softmax_rows(scores, Some(mask))?;
    let mut context: Option<Var> = None;
    for (t, &h) in enc.hidden.iter().enumerate() {
        let a = tape.slice_cols(weights, t, t + 1)?;
        let part = tape.mul_col(h, a)?;
        context = Some(match context {
            Some(c) => tape.add(c, part)?,
            None => part,
        });
    }
    let context = context.ok_or(Error::Empty("sequence"))?;
    let logits = tape.matmul_nt(context, pv.dec_w)?;
    let logits = tape.add_row(logits, pv.dec_b)?;
    let probs = match activation {
        OutputActivation::Sigmoid => tape.sigmoid(logits)?,
        OutputActivation::Softmax => tape.softmax_rows(logits, None)?,
    };
    Ok(Head { weights, context, probs })
}

/// `rows × 1` negative log-likelihood per instance. Probabilities are
/// clamped to `[1e-12, 1 - 1e-12]` before the log.
pub(crate) fn instance_losses(tape: &mut Tape, probs: Var, labels: &[usize], activation: OutputActivation) -> Result<Var> {
    let [rows, classes] = tape.shape(probs);
    if labels.len() != rows {
        return Err(shape_err("nll", format!("{} labels for {rows} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(rows, classes);
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::OutOfRange {
                what: "label set",
                index: l,
                len: classes,
            });
        }
        onehot.set(r, l, 1.0);
    }
    let (lo, hi) = (PROB_FLOOR, 1.0 - PROB_FLOOR);
    let logp = tape.log_clamped(probs, lo, hi)?;
    let picked = match activation {
        OutputActivation::Softmax => {
            let y = tape.constant(onehot);
            tape.mul(logp, y)?
        }
        OutputActivation::Sigmoid => {
            let complement = onehot.data().iter().map(|v| 1.0 - v).collect();
            let not_y = tape.constant(Tensor::new(rows, classes, complement)?);
            let y = tape.constant(onehot);
            let one_minus = tape.affine(probs, -1.0, 1.0)?;
            let logq = tape.log_clamped(one_minus, lo, hi)?;
            let pos = tape.mul(logp, y)?;
            let neg = tape.mul(logq, not_y)?;
            tape.add(pos, neg)?
        }
    };
    let total = tape.sum_cols(picked)?;
    tape.scale(total, -1.0)
}

/// Mean of a `rows × 1` loss column.
pub(crate) fn mean(tape: &mut Tape, losses: Var) -> Result<Var> {
    let rows = tape.shape(losses)[0];
    let s = tape.sum(losses)?;
    tape.scale(s, 1.0 / rows as f64)
}

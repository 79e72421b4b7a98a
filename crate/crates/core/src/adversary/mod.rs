//! Adversarial perturbations of attention scores and word embeddings, and
//! the combined clean + adversarial training objective.
//!
//! Six training methods are supported: vanilla (no perturbation), random
//! perturbation of attention scores, and adversarial / interpretable
//! adversarial perturbation of either attention scores or word embeddings.
//! Every perturbation is built from a single gradient (fast gradient
//! method), normalized per instance, and treated as a constant with respect
//! to the model parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::graph::{self, EncodeOptions, Encoded, ParamVars};
use crate::model::{
    forward_outputs, Batch, EncodedInstance, ForwardOutput, ModelConfig, ModelParameters, OutputActivation, PAD_ID,
};

/// Gradient norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Largest vocabulary word iAT accepts.
pub const WORD_IAT_VOCAB_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    WordAt,
    WordIat,
    AttentionRp,
    AttentionAt,
    AttentionIat,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::WordAt,
        Method::WordIat,
        Method::AttentionRp,
        Method::AttentionAt,
        Method::AttentionIat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::WordAt => "word_at",
            Method::WordIat => "word_iat",
            Method::AttentionRp => "attention_rp",
            Method::AttentionAt => "attention_at",
            Method::AttentionIat => "attention_iat",
        }
    }

    pub fn target(self) -> Option<PerturbationTarget> {
        match self {
            Method::Vanilla => None,
            Method::WordAt | Method::WordIat => Some(PerturbationTarget::WordEmbeddings),
            _ => Some(PerturbationTarget::AttentionScores),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Perturbation method, norm bound `epsilon` and loss balance `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub method: Method,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self::vanilla()
    }
}

impl AdvConfig {
    pub fn new(method: Method, epsilon: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { method, epsilon, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vanilla() -> Self {
        Self {
            method: Method::Vanilla,
            epsilon: 0.0,
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether the adversarial term contributes to the objective. With a
    /// zero bound or zero weight the objective is the clean loss alone.
    pub fn is_active(&self) -> bool {
        self.method != Method::Vanilla && self.epsilon > 0.0 && self.lambda > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationTarget {
    AttentionScores,
    WordEmbeddings,
}

/// A perturbation for one instance: `1 × T` for scores, `T × d` for
/// embeddings. `degenerate` is set when the gradient (or the direction
/// basis) vanished and the values are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub target: PerturbationTarget,
    pub values: Tensor,
    pub degenerate: bool,
}

impl Perturbation {
    fn zero(target: PerturbationTarget, rows: usize, cols: usize, degenerate: bool) -> Self {
        Self {
            target,
            values: Tensor::zeros(rows, cols),
            degenerate,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
}

/// Normalized score-difference vectors: row `t` holds `d̃_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceVectors {
    vectors: Tensor,
}

impl DifferenceVectors {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn get(&self, t: usize) -> &[f64] {
        self.vectors.row_slice(t)
    }

    /// `T × T` matrix with `d̃_t` in row `t`.
    pub fn as_tensor(&self) -> &Tensor {
        &self.vectors
    }

    /// `r_t = α_t · d̃_t` for a `T × T` coefficient block.
    pub fn apply(&self, alpha: &Tensor) -> Result<Vec<f64>> {
        if alpha.shape() != self.vectors.shape() {
            return Err(shape_err(
                "difference vectors",
                format!("coefficients {:?} for {:?}", alpha.shape(), self.vectors.shape()),
            ));
        }
        Ok((0..self.len())
            .map(|t| dot(alpha.row_slice(t), self.get(t)))
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Raw differences `d_t[k] = ã_t − ã_k` over unmasked `t` and `k`; every
/// other entry is zero.
pub fn score_differences(scores: &[f64], mask: Option<&[bool]>) -> Result<Tensor> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Empty("difference vectors"));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(shape_err("difference vectors", format!("mask of length {} for {n} scores", m.len())));
        }
    }
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let mut d = Tensor::zeros(n, n);
    for t in (0..n).filter(|&t| live(t)) {
        let row = d.row_slice_mut(t);
        for k in (0..n).filter(|&k| live(k)) {
            row[k] = scores[t] - scores[k];
        }
    }
    Ok(d)
}

/// Rows of [`score_differences`] normalized to unit length, or left at zero
/// when their norm vanishes.
pub fn difference_vectors(scores: &[f64], mask: Option<&[bool]>) -> Result<DifferenceVectors> {
    let mut vectors = score_differences(scores, mask)?;
    for t in 0..scores.len() {
        let row = vectors.row_slice_mut(t);
        let norm = l2(row);
        if norm < DEGENERATE_NORM {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(DifferenceVectors { vectors })
}

/// Negative log-likelihood of `label` under an already computed prediction.
/// Probabilities are clamped to `[1e-12, 1 − 1e-12]`.
pub fn nll_loss(prediction: &ForwardOutput, label: usize, config: &ModelConfig) -> Result<f64> {
    let p = &prediction.prediction;
    if label >= p.len() {
        return Err(Error::OutOfRange {
            what: "label set",
            index: label,
            len: p.len(),
        });
    }
    let (lo, hi) = (graph::PROB_FLOOR, 1.0 - graph::PROB_FLOOR);
    let total: f64 = match config.output_activation {
        OutputActivation::Softmax => p.iter().enumerate().map(|(c, &v)| if c == label { v.clamp(lo, hi).ln() } else { 0.0 }).sum(),
        OutputActivation::Sigmoid => p
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                if c == label {
                    v.clamp(lo, hi).ln()
                } else {
                    (-v + 1.0).clamp(lo, hi).ln()
                }
            })
            .sum(),
    };
    Ok(-total)
}

/// Forward pass with a `T × d` offset added to the embedded passage.
pub fn forward_with_embedding_perturbation(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    offset: &Tensor,
) -> Result<ForwardOutput> {
    let batch = Batch::new(&[instance], config)?;
    let d = params.embedding.cols();
    if offset.shape() != [batch.steps(), d] {
        return Err(shape_err(
            "embedding perturbation",
            format!("{:?} for a {}x{d} embedded sequence", offset.shape(), batch.steps()),
        ));
    }
    let steps: Vec<Tensor> = (0..batch.steps())
        .map(|t| Tensor::row(offset.row_slice(t).to_vec()))
        .collect();
    let mut out = forward_outputs(params, config, &batch, None, Some(&steps))?;
    Ok(out.remove(0))
}

/// Fast-gradient perturbation of the attention scores: `ε·g/‖g‖` with
/// `g` the loss gradient at the scores.
pub fn attention_at_perturbation(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    epsilon: f64,
) -> Result<Perturbation> {
    single_perturbation(instance, params, config, Method::AttentionAt, epsilon)
}

/// Interpretable perturbation of the attention scores: the worst-case
/// combination coefficients of the difference vectors, mapped back to a
/// score offset.
pub fn attention_iat_perturbation(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    epsilon: f64,
) -> Result<Perturbation> {
    single_perturbation(instance, params, config, Method::AttentionIat, epsilon)
}

/// Fast-gradient perturbation of the embedded passage.
pub fn word_at_perturbation(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    epsilon: f64,
) -> Result<Perturbation> {
    single_perturbation(instance, params, config, Method::WordAt, epsilon)
}

/// Interpretable perturbation of the embedded passage along normalized
/// directions towards the other vocabulary words.
pub fn word_iat_perturbation(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    epsilon: f64,
) -> Result<Perturbation> {
    single_perturbation(instance, params, config, Method::WordIat, epsilon)
}

/// Random direction on the unit sphere over the unmasked positions, scaled
/// to `epsilon`. Draws nothing from `rng` when `epsilon` is zero.
pub fn attention_rp_perturbation<R: Rng + ?Sized>(
    steps: usize,
    mask: Option<&[bool]>,
    epsilon: f64,
    rng: &mut R,
) -> Result<Perturbation> {
    if let Some(m) = mask {
        if m.len() != steps {
            return Err(shape_err("random perturbation", format!("mask of length {} for {steps} steps", m.len())));
        }
    }
    check_epsilon(epsilon)?;
    let mut values = vec![0.0; steps];
    let mut degenerate = false;
    if epsilon > 0.0 {
        let live: Vec<usize> = (0..steps).filter(|&t| mask.is_none_or(|m| m[t])).collect();
        for &t in &live {
            values[t] = rng.sample(StandardNormal);
        }
        degenerate = !normalize_into(&mut values, epsilon);
    }
    Ok(Perturbation {
        target: PerturbationTarget::AttentionScores,
        values: Tensor::row(values),
        degenerate,
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be a nonnegative number, got {epsilon}")));
    }
    Ok(())
}

/// Rescales `v` to norm `epsilon`; zeroes it and returns false when its
/// norm is degenerate.
fn normalize_into(v: &mut [f64], epsilon: f64) -> bool {
    let n = l2(v);
    if n < DEGENERATE_NORM {
        v.fill(0.0);
        return false;
    }
    let k = epsilon / n;
    v.iter_mut().for_each(|x| *x *= k);
    true
}

fn single_perturbation(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    method: Method,
    epsilon: f64,
) -> Result<Perturbation> {
    check_epsilon(epsilon)?;
    let batch = Batch::new(&[instance], config)?;
    let target = method.target().expect("perturbing method");
    let cols = match target {
        PerturbationTarget::AttentionScores => batch.steps(),
        PerturbationTarget::WordEmbeddings => params.embedding.cols(),
    };
    let rows = match target {
        PerturbationTarget::AttentionScores => 1,
        PerturbationTarget::WordEmbeddings => batch.steps(),
    };
    if epsilon == 0.0 {
        return Ok(Perturbation::zero(target, rows, cols, false));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let clean = clean_pass(&mut tape, &pv, &batch, config, method)?;
    let mut found = perturb_from_clean(&tape, &pv, &batch, &clean, method, epsilon, &mut NoRng)?;
    let row = found.rows.remove(0);
    let values = match target {
        PerturbationTarget::AttentionScores => Tensor::row(row.values),
        PerturbationTarget::WordEmbeddings => Tensor::new(rows, cols, row.values)?,
    };
    Ok(Perturbation {
        target,
        values,
        degenerate: row.degenerate,
    })
}

/// Batch-mean clean loss, adversarial loss and the combined objective
/// `clean + λ·adversarial`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objective: f64,
    pub clean: f64,
    /// `None` when the adversarial term is inactive.
    pub adversarial: Option<f64>,
    /// Instances whose perturbation came out zero for lack of a gradient.
    pub degenerate: usize,
}

/// The training objective recorded on a tape.
pub(crate) struct Objective {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Records the batch objective on `tape`. Perturbations are computed from
/// the clean pass and enter the adversarial pass as constants.
pub(crate) fn build_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &Batch,
    config: &ModelConfig,
    adv: &AdvConfig,
    rng: &mut R,
) -> Result<Objective> {
    adv.validate()?;
    let rows = batch.rows() as f64;
    let method = if adv.is_active() { adv.method } else { Method::Vanilla };
    let clean = clean_pass(tape, pv, batch, config, method)?;
    let clean_mean = tape.value(clean.total).item() / rows;
    if method == Method::Vanilla {
        let loss = tape.scale(clean.total, 1.0 / rows)?;
        return Ok(Objective {
            loss,
            breakdown: LossBreakdown {
                objective: tape.value(loss).item(),
                clean: clean_mean,
                adversarial: None,
                degenerate: 0,
            },
        });
    }

    let found = perturb_from_clean(tape, pv, batch, &clean, method, adv.epsilon, rng)?;
    let degenerate = found.rows.iter().filter(|r| r.degenerate).count();
    let (steps, mask) = (batch.steps(), batch.passage.mask());
    let adv_losses = match method.target().expect("perturbing method") {
        PerturbationTarget::AttentionScores => {
            let flat: Vec<f64> = found.rows.into_iter().flat_map(|r| r.values).collect();
            let r = tape.constant(Tensor::new(batch.rows(), steps, flat)?);
            let scores = tape.add(clean.enc.scores, r)?;
            let head = graph::head(tape, pv, &clean.enc, scores, mask, config.output_activation)?;
            graph::instance_losses(tape, head.probs, &batch.labels, config.output_activation)?
        }
        PerturbationTarget::WordEmbeddings => {
            let d = tape.shape(pv.embedding)[1];
            let offsets = (0..steps)
                .map(|t| {
                    let data = found.rows.iter().flat_map(|r| r.values[t * d..(t + 1) * d].iter().copied()).collect();
                    Tensor::new(batch.rows(), d, data)
                })
                .collect::<Result<Vec<_>>>()?;
            let opts = EncodeOptions {
                emb_offsets: Some(&offsets),
                watch_embeddings: false,
            };
            let enc = graph::encode_batch(tape, pv, batch, opts)?;
            let head = graph::head(tape, pv, &enc, enc.scores, mask, config.output_activation)?;
            graph::instance_losses(tape, head.probs, &batch.labels, config.output_activation)?
        }
    };
    let adv_total = tape.sum(adv_losses)?;
    let adv_mean = tape.value(adv_total).item() / rows;
    let weighted = tape.scale(adv_losses, adv.lambda)?;
    let combined = tape.add(clean.losses, weighted)?;
    let loss = graph::mean(tape, combined)?;
    Ok(Objective {
        loss,
        breakdown: LossBreakdown {
            objective: tape.value(loss).item(),
            clean: clean_mean,
            adversarial: Some(adv_mean),
            degenerate,
        },
    })
}

/// Batch objective `mean(L_clean + λ·L_adv)` at the current parameters.
/// Vanilla, `ε = 0` and `λ = 0` all give the mean clean loss.
pub fn adversarial_loss<R: Rng + ?Sized>(
    instances: &[&EncodedInstance],
    params: &ModelParameters,
    config: &ModelConfig,
    adv: &AdvConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let batch = Batch::new(instances, config)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    Ok(build_objective(&mut tape, &pv, &batch, config, adv, rng)?.breakdown)
}

/// Placeholder generator for gradient-based methods, which never sample.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("gradient-based perturbations draw no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("gradient-based perturbations draw no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("gradient-based perturbations draw no random numbers")
    }
}

/// Gradient probe inserted between the encoder and the attention softmax.
enum Probe {
    None,
    /// Zero offset on the scores; its gradient is the score gradient.
    Scores(Var),
    /// Zero `rows × T²` coefficient block with the constant difference
    /// vectors of every row.
    Alpha { alpha: Var, dirs: Vec<DifferenceVectors> },
}

struct CleanPass {
    enc: Encoded,
    probe: Probe,
    /// `rows × 1` clean losses.
    losses: Var,
    /// Sum of `losses`; each row's gradient is that row's own loss gradient.
    total: Var,
}

fn clean_pass(tape: &mut Tape, pv: &ParamVars, batch: &Batch, config: &ModelConfig, method: Method) -> Result<CleanPass> {
    let opts = EncodeOptions {
        emb_offsets: None,
        watch_embeddings: matches!(method, Method::WordAt | Method::WordIat),
    };
    let enc = graph::encode_batch(tape, pv, batch, opts)?;
    let (rows, steps) = (batch.rows(), batch.steps());
    let mask = batch.passage.mask();
    let (scores, probe) = match method {
        Method::AttentionAt => {
            let z = tape.variable(Tensor::zeros(rows, steps));
            (tape.add(enc.scores, z)?, Probe::Scores(z))
        }
        Method::AttentionIat => {
            let values = tape.value(enc.scores).clone();
            let dirs = (0..rows)
                .map(|r| difference_vectors(values.row_slice(r), Some(&mask[r * steps..(r + 1) * steps])))
                .collect::<Result<Vec<_>>>()?;
            let mut flat = Vec::with_capacity(rows * steps * steps);
            for d in &dirs {
                flat.extend_from_slice(d.as_tensor().data());
            }
            let dmat = tape.constant(Tensor::new(rows, steps * steps, flat)?);
            let alpha = tape.variable(Tensor::zeros(rows, steps * steps));
            let weighted = tape.mul(alpha, dmat)?;
            let per_step = tape.reshape(weighted, rows * steps, steps)?;
            let r = tape.sum_cols(per_step)?;
            let r = tape.reshape(r, rows, steps)?;
            (tape.add(enc.scores, r)?, Probe::Alpha { alpha, dirs })
        }
        _ => (enc.scores, Probe::None),
    };
    let head = graph::head(tape, pv, &enc, scores, mask, config.output_activation)?;
    let losses = graph::instance_losses(tape, head.probs, &batch.labels, config.output_activation)?;
    let total = tape.sum(losses)?;
    Ok(CleanPass {
        enc,
        probe,
        losses,
        total,
    })
}

struct RowPerturbation {
    /// `T` score offsets, or `T·d` row-major embedding offsets.
    values: Vec<f64>,
    degenerate: bool,
}

struct BatchPerturbation {
    rows: Vec<RowPerturbation>,
}

fn perturb_from_clean<R: Rng + ?Sized>(
    tape: &Tape,
    pv: &ParamVars,
    batch: &Batch,
    clean: &CleanPass,
    method: Method,
    epsilon: f64,
    rng: &mut R,
) -> Result<BatchPerturbation> {
    let (rows, steps) = (batch.rows(), batch.steps());
    let mask = batch.passage.mask();
    let row_mask = |r: usize| &mask[r * steps..(r + 1) * steps];
    let mut out = Vec::with_capacity(rows);
    match (method, &clean.probe) {
        (Method::AttentionRp, _) => {
            for r in 0..rows {
                let p = attention_rp_perturbation(steps, Some(row_mask(r)), epsilon, rng)?;
                out.push(RowPerturbation {
                    values: p.values.into_data(),
                    degenerate: p.degenerate,
                });
            }
        }
        (Method::AttentionAt, Probe::Scores(z)) => {
            let g = row_gradients(tape, clean.total, *z)?;
            for r in 0..rows {
                let mut v = g.row_slice(r).to_vec();
                for (x, &live) in v.iter_mut().zip(row_mask(r)) {
                    if !live {
                        *x = 0.0;
                    }
                }
                let ok = normalize_into(&mut v, epsilon);
                out.push(RowPerturbation { values: v, degenerate: !ok });
            }
        }
        (Method::AttentionIat, Probe::Alpha { alpha, dirs }) => {
            let g = row_gradients(tape, clean.total, *alpha)?;
            for (r, d) in dirs.iter().enumerate() {
                let mut a = g.row_slice(r).to_vec();
                let ok = normalize_into(&mut a, epsilon);
                let values = if ok {
                    d.apply(&Tensor::new(steps, steps, a)?)?
                } else {
                    vec![0.0; steps]
                };
                out.push(RowPerturbation { values, degenerate: !ok });
            }
        }
        (Method::WordAt | Method::WordIat, _) => {
            let grads = embedding_gradients(tape, clean.total, &clean.enc.emb_clean)?;
            let d = tape.shape(pv.embedding)[1];
            for r in 0..rows {
                let live = row_mask(r);
                let g: Vec<Vec<f64>> = (0..steps)
                    .map(|t| if live[t] { grads[t].row_slice(r).to_vec() } else { vec![0.0; d] })
                    .collect();
                out.push(if method == Method::WordAt {
                    let mut v: Vec<f64> = g.concat();
                    let ok = normalize_into(&mut v, epsilon);
                    RowPerturbation { values: v, degenerate: !ok }
                } else {
                    let ids: Vec<usize> = (0..steps).map(|t| batch.passage.id(r, t)).collect();
                    word_iat_row(tape.value(pv.embedding), &ids, live, &g, epsilon)?
                });
            }
        }
        _ => unreachable!("probe matches method"),
    }
    Ok(BatchPerturbation { rows: out })
}

/// Gradient of `total` with respect to `target`, zero when no path exists.
fn row_gradients(tape: &Tape, total: Var, target: Var) -> Result<Tensor> {
    let mut g = tape.gradients_for(total, &[target])?;
    Ok(g.remove(target).unwrap_or_else(|| Tensor::zeros(tape.shape(target)[0], tape.shape(target)[1])))
}

fn embedding_gradients(tape: &Tape, total: Var, emb: &[Var]) -> Result<Vec<Tensor>> {
    let mut g = tape.gradients_for(total, emb)?;
    Ok(emb
        .iter()
        .map(|&e| g.remove(e).unwrap_or_else(|| Tensor::zeros(tape.shape(e)[0], tape.shape(e)[1])))
        .collect())
}

/// Word iAT for one row: coefficients over normalized directions from each
/// word to every other vocabulary word (padding excluded).
fn word_iat_row(table: &Tensor, ids: &[usize], live: &[bool], g: &[Vec<f64>], epsilon: f64) -> Result<RowPerturbation> {
    let [vocab, d] = table.shape();
    if vocab > WORD_IAT_VOCAB_CAP {
        return Err(Error::VocabularyTooLarge {
            size: vocab,
            cap: WORD_IAT_VOCAB_CAP,
        });
    }
    let steps = ids.len();
    // directions[t][k], `None` where the direction is undefined.
    let mut dirs: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(steps);
    let mut alpha = vec![0.0; steps * vocab];
    for t in 0..steps {
        let mut row = vec![None; vocab];
        if live[t] {
            let w = table.row_slice(ids[t]);
            for (k, slot) in row.iter_mut().enumerate() {
                if k == PAD_ID {
                    continue;
                }
                let diff: Vec<f64> = table.row_slice(k).iter().zip(w).map(|(e, x)| e - x).collect();
                let n = l2(&diff);
                if n < DEGENERATE_NORM {
                    continue;
                }
                let unit: Vec<f64> = diff.into_iter().map(|x| x / n).collect();
                alpha[t * vocab + k] = dot(&g[t], &unit);
                *slot = Some(unit);
            }
        }
        dirs.push(row);
    }
    let ok = normalize_into(&mut alpha, epsilon);
    let mut values = vec![0.0; steps * d];
    if ok {
        for t in 0..steps {
            let out = &mut values[t * d..(t + 1) * d];
            for (k, dir) in dirs[t].iter().enumerate() {
                if let Some(dir) = dir {
                    let a = alpha[t * vocab + k];
                    out.iter_mut().zip(dir).for_each(|(o, x)| *o += a * x);
                }
            }
        }
    }
    Ok(RowPerturbation { values, degenerate: !ok })
}

#[cfg(test)]
mod tests;

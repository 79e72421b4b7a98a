//! Task metrics, gradient-based word importance, attention/importance
//! correlation and heatmap rendering.

mod heatmap;

pub use heatmap::{render_heatmap, render_heatmap_terminal};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::model::graph::{self, EncodeOptions, ParamVars};
use crate::model::{argmax, AttentionState, Batch, EncodedInstance, ModelConfig, ModelParameters};

/// Environment variable capping the evaluation thread count.
pub const THREADS_ENV: &str = "ATTNP_THREADS";

/// Instances per evaluation work unit.
const CHUNK: usize = 32;

/// Which metric a task is scored with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Binary classification, scored by the F1 of class 1.
    Bc,
    /// Question answering, scored by accuracy.
    Qa,
    /// Natural language inference, scored by micro-F1.
    Nli,
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Bc => "f1",
            Task::Qa => "accuracy",
            Task::Nli => "micro_f1",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Bc => "bc",
            Task::Qa => "qa",
            Task::Nli => "nli",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Task::Bc),
            "qa" => Ok(Task::Qa),
            "nli" => Ok(Task::Nli),
            _ => Err(Error::Config(format!("unknown task '{s}' (expected bc, qa or nli)"))),
        }
    }
}

/// Precision, recall and F1 of one class, from its confusion counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, zero when the class never occurs.
    fn f1(self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(shape_err(
            "task metric",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("task metric"));
    }
    Ok(())
}

fn counts(predictions: &[usize], labels: &[usize], class: usize) -> Counts {
    let mut c = Counts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

/// F1 of class 1 for `bc`, accuracy for `qa`, micro-averaged F1 for `nli`.
pub fn task_metric(predictions: &[usize], labels: &[usize], task: Task) -> Result<f64> {
    check_lengths(predictions, labels)?;
    Ok(match task {
        Task::Bc => counts(predictions, labels, 1).f1(),
        Task::Qa => ratio(predictions.iter().zip(labels).filter(|(p, l)| p == l).count(), labels.len()),
        Task::Nli => {
            let classes = predictions.iter().chain(labels).max().expect("non-empty") + 1;
            let total = (0..classes).fold(Counts::default(), |acc, c| {
                let k = counts(predictions, labels, c);
                Counts {
                    tp: acc.tp + k.tp,
                    fp: acc.fp + k.fp,
                    fn_: acc.fn_ + k.fn_,
                }
            });
            let (p, r) = (ratio(total.tp, total.tp + total.fp), ratio(total.tp, total.tp + total.fn_));
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    })
}

/// Per-class statistics for classes `0..class_count`.
pub fn per_class_stats(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<ClassStats>> {
    check_lengths(predictions, labels)?;
    Ok((0..class_count)
        .map(|class| {
            let c = counts(predictions, labels, class);
            ClassStats {
                class,
                precision: ratio(c.tp, c.tp + c.fp),
                recall: ratio(c.tp, c.tp + c.fn_),
                f1: c.f1(),
                support: c.tp + c.fn_,
            }
        })
        .collect())
}

/// Per-token importance, normalized to sum to one over unmasked tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    /// Every gradient was zero; `values` is all zeros.
    pub degenerate: bool,
}

/// Model outputs and saliency for one evaluated instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnalysis {
    pub predicted: usize,
    pub prediction: Vec<f64>,
    pub attention: AttentionState,
    pub saliency: SaliencyMap,
}

/// Gradient-norm importance of each passage token for the predicted class.
pub fn gradient_importance(
    instance: &EncodedInstance,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<SaliencyMap> {
    Ok(analyze_batch(&[instance], params, config)?.remove(0).saliency)
}

/// Forward pass plus saliency for a group of instances on one tape. The
/// gradient of `Σ_r ŷ_{r,ĉ_r}` separates by row, so each row gets its own
/// input gradient.
pub fn analyze_batch(
    instances: &[&EncodedInstance],
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Vec<InstanceAnalysis>> {
    let batch = Batch::new(instances, config)?;
    let (rows, steps) = (batch.rows(), batch.steps());
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let opts = EncodeOptions {
        emb_offsets: None,
        watch_embeddings: true,
    };
    let enc = graph::encode_batch(&mut tape, &pv, &batch, opts)?;
    let mask = batch.passage.mask();
    let head = graph::head(&mut tape, &pv, &enc, enc.scores, mask, config.output_activation)?;
    let probs = tape.value(head.probs).clone();
    let predicted: Vec<usize> = (0..rows).map(|r| argmax(probs.row_slice(r))).collect();
    let mut pick = Tensor::zeros(rows, config.label_count);
    for (r, &c) in predicted.iter().enumerate() {
        pick.set(r, c, 1.0);
    }
    let pick = tape.constant(pick);
    let chosen = tape.mul(head.probs, pick)?;
    let total = tape.sum(chosen)?;
    let mut grads = tape.gradients_for(total, &enc.emb_clean)?;
    let step_grads: Vec<Option<Tensor>> = enc.emb_clean.iter().map(|&e| grads.remove(e)).collect();

    let (scores, weights) = (tape.value(enc.scores), tape.value(head.weights));
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let len = batch.passage.lengths()[r];
        let row_mask = &mask[r * steps..r * steps + len];
        let mut values: Vec<f64> = (0..len)
            .map(|t| match (&step_grads[t], row_mask[t]) {
                (Some(g), true) => g.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt(),
                _ => 0.0,
            })
            .collect();
        let sum: f64 = values.iter().sum();
        let degenerate = sum <= 0.0;
        if !degenerate {
            values.iter_mut().for_each(|v| *v /= sum);
        }
        out.push(InstanceAnalysis {
            predicted: predicted[r],
            prediction: probs.row_slice(r).to_vec(),
            attention: AttentionState {
                scores: scores.row_slice(r)[..len].to_vec(),
                weights: weights.row_slice(r)[..len].to_vec(),
                mask: row_mask.to_vec(),
            },
            saliency: SaliencyMap { values, degenerate },
        });
    }
    Ok(out)
}

/// Pearson correlation of two equally long vectors, `None` when either has
/// zero variance.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(shape_err("pearson", format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(shape_err("pearson", "need at least two values"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative threshold: values that differ only by rounding count as constant.
    let tiny = |s: f64, m: f64| s <= (1e-24 * n * m * m).max(f64::MIN_POSITIVE);
    if tiny(saa, ma) || tiny(sbb, mb) {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Correlation between attention weights and saliency over the unmasked
/// tokens, `None` for fewer than two such tokens or zero variance.
pub fn attention_saliency_correlation(attention: &AttentionState, saliency: &SaliencyMap) -> Result<Option<f64>> {
    if attention.weights.len() != saliency.values.len() || attention.mask.len() != saliency.values.len() {
        return Err(shape_err("correlation", "attention and saliency lengths differ"));
    }
    let (a, s): (Vec<f64>, Vec<f64>) = attention
        .weights
        .iter()
        .zip(&saliency.values)
        .zip(&attention.mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &s), _)| (a, s))
        .unzip();
    if a.len() < 2 || saliency.degenerate {
        return Ok(None);
    }
    pearson_correlation(&a, &s)
}

/// Summary of a model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_name: String,
    pub metric: f64,
    /// Mean per-instance correlation over non-skipped instances.
    pub mean_correlation: Option<f64>,
    pub n_instances: usize,
    /// Instances without a defined correlation.
    pub n_skipped: usize,
    pub per_class: Vec<ClassStats>,
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_limit() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` over `CHUNK`-sized slices in parallel (honouring
/// [`THREADS_ENV`]) and concatenates the results in input order.
fn par_chunks<T, F>(split: &[EncodedInstance], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[EncodedInstance]) -> Result<Vec<T>> + Sync,
{
    let run = || -> Result<Vec<T>> {
        let parts: Vec<Result<Vec<T>>> = split.par_chunks(CHUNK).map(&f).collect();
        let mut out = Vec::with_capacity(split.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    };
    match thread_limit() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Predicted classes for a split, computed in batches.
pub fn predict(split: &[EncodedInstance], params: &ModelParameters, config: &ModelConfig) -> Result<Vec<usize>> {
    par_chunks(split, |chunk| {
        let refs: Vec<&EncodedInstance> = chunk.iter().collect();
        let outs = crate::model::forward_batch(&refs, params, config)?;
        Ok(outs.iter().map(|o| o.predicted_class()).collect())
    })
}

/// Task metric on a split.
pub fn score(split: &[EncodedInstance], params: &ModelParameters, config: &ModelConfig, task: Task) -> Result<f64> {
    let preds = predict(split, params, config)?;
    let labels: Vec<usize> = split.iter().map(|i| i.label).collect();
    task_metric(&preds, &labels, task)
}

/// Task metric, per-class statistics and mean attention/saliency
/// correlation on a split.
pub fn evaluate(split: &[EncodedInstance], params: &ModelParameters, config: &ModelConfig, task: Task) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let analyses = par_chunks(split, |chunk| {
        let refs: Vec<&EncodedInstance> = chunk.iter().collect();
        analyze_batch(&refs, params, config)
    })?;
    let preds: Vec<usize> = analyses.iter().map(|a| a.predicted).collect();
    let labels: Vec<usize> = split.iter().map(|i| i.label).collect();
    let mut sum = 0.0;
    let mut used = 0usize;
    for a in &analyses {
        if let Some(c) = attention_saliency_correlation(&a.attention, &a.saliency)? {
            sum += c;
            used += 1;
        }
    }
    Ok(EvalReport {
        metric_name: task.metric_name().to_string(),
        metric: task_metric(&preds, &labels, task)?,
        mean_correlation: (used > 0).then(|| sum / used as f64),
        n_instances: split.len(),
        n_skipped: split.len() - used,
        per_class: per_class_stats(&preds, &labels, config.label_count)?,
    })
}

//! Mini-batch training with Adam, L2 regularization, optional gradient
//! clipping, best-validation checkpoint selection and early stopping, plus
//! perturbation-size sweeps.

mod checkpoint;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{build_objective, AdvConfig, LossBreakdown};
use crate::autodiff::{Tape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::evaluator::{self, Task};
use crate::model::graph::ParamVars;
use crate::model::{Batch, EncodedInstance, ModelConfig, ModelParameters};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_coefficient: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adv: AdvConfig,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub freeze_embeddings: bool,
    /// Decides the validation metric.
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            l2_coefficient: 1e-5,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            adv: AdvConfig::vanilla(),
            early_stop_patience: 5,
            clip_norm: Some(5.0),
            freeze_embeddings: false,
            task: Task::Qa,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.l2_coefficient.is_finite() && self.l2_coefficient >= 0.0) {
            return Err(Error::Config(format!("l2_coefficient must be nonnegative, got {}", self.l2_coefficient)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.adv.validate()
    }
}

/// Adam moment estimates, one pair per parameter tensor in
/// [`ModelParameters::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One Adam update. `grads` follows [`ModelParameters::named`] order. The
/// gradients are clipped to the configured global norm first, then the L2
/// term `l2_coefficient · θ` is added.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.first_moment.len() != names.len() {
        return Err(shape_err(
            "adam",
            format!("{} gradients and {} moments for {} tensors", grads.len(), state.first_moment.len(), names.len()),
        ));
    }
    for ((name, g), (_, p)) in names.iter().zip(grads).zip(params.named()) {
        if g.shape() != p.shape() {
            return Err(shape_err("adam", format!("{name}: gradient {:?} for {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let scale = match config.clip_norm {
        Some(c) => {
            let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    let lr = config.learning_rate;
    let l2 = config.l2_coefficient;
    for (i, (name, p)) in params.named_mut().into_iter().enumerate() {
        if config.freeze_embeddings && name == "embedding" {
            continue;
        }
        let (m, v) = (state.first_moment[i].data_mut(), state.second_moment[i].data_mut());
        let g = grads[i].data();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = scale * g[j] + l2 * *w;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// The objective for one batch and its gradient with respect to every
/// parameter, in [`ModelParameters::named`] order.
pub fn objective_gradients<R: Rng + ?Sized>(
    params: &ModelParameters,
    instances: &[&EncodedInstance],
    model_config: &ModelConfig,
    adv: &AdvConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let batch = Batch::new(instances, model_config)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, true);
    let objective = build_objective(&mut tape, &pv, &batch, model_config, adv, rng)?;
    let mut grads = tape.backward(objective.loss)?;
    let grads = pv
        .ordered
        .iter()
        .map(|&v| {
            grads.remove(v).unwrap_or_else(|| {
                let [r, c] = tape.shape(v);
                Tensor::zeros(r, c)
            })
        })
        .collect();
    Ok((objective.breakdown, grads))
}

/// Builds the objective for one batch, differentiates it and applies one
/// Adam step. Returns the objective's components before the update.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParameters,
    instances: &[&EncodedInstance],
    model_config: &ModelConfig,
    config: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = objective_gradients(params, instances, model_config, &config.adv, rng)?;
    adam_step(params, &grads, state, config)?;
    Ok(breakdown)
}

/// Summary of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Instance-weighted means over the epoch's batches.
    pub objective: f64,
    pub clean_loss: f64,
    pub adversarial_loss: Option<f64>,
    /// Instances whose perturbation degenerated to zero.
    pub degenerate: usize,
    pub valid_metric: f64,
    /// Wall-clock duration; not serialized so that logs are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub best_valid_metric: Option<f64>,
    pub stopped_early: bool,
}

/// Seeded initialisation followed by [`train_from`].
pub fn train(
    train_set: &[EncodedInstance],
    valid_set: &[EncodedInstance],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters, TrainHistory)> {
    let params = ModelParameters::init(model_config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    train_from(params, train_set, valid_set, model_config, config, |_| Ok(()))
}

/// Trains `params` and returns the parameters of the epoch with the best
/// validation metric (ties go to the earlier epoch). With early stopping
/// enabled, training also ends once the validation metric reaches 1. `on_epoch` sees each
/// record as soon as the epoch finishes.
pub fn train_from(
    mut params: ModelParameters,
    train_set: &[EncodedInstance],
    valid_set: &[EncodedInstance],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(ModelParameters, TrainHistory)> {
    config.validate()?;
    params.validate(model_config)?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if valid_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    // Separate stream from the one used for initialisation.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(&params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParameters)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut obj, mut clean, mut adv, mut degenerate) = (0.0, 0.0, 0.0, 0);
        let mut any_adv = false;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&EncodedInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let out = match train_step(&mut params, &refs, model_config, config, &mut state, &mut rng) {
                Err(Error::NonFinite { .. }) | Err(Error::NonFiniteGradient(_)) => {
                    return Err(Error::Diverged { epoch, loss: f64::NAN });
                }
                other => other?,
            };
            if !out.objective.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: out.objective,
                });
            }
            let n = refs.len() as f64;
            obj += out.objective * n;
            clean += out.clean * n;
            if let Some(a) = out.adversarial {
                adv += a * n;
                any_adv = true;
            }
            degenerate += out.degenerate;
        }
        let n = train_set.len() as f64;
        let valid_metric = evaluator::score(valid_set, &params, model_config, config.task)?;
        let record = EpochRecord {
            epoch,
            objective: obj / n,
            clean_loss: clean / n,
            adversarial_loss: any_adv.then(|| adv / n),
            degenerate,
            valid_metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: objective {:.5} valid {} {:.4} ({:.1}s)",
            record.objective,
            config.task.metric_name(),
            valid_metric,
            record.seconds
        );
        on_epoch(&record)?;
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(m, _)| valid_metric > *m) {
            best = Some((valid_metric, params.clone()));
            history.best_epoch = Some(epoch);
            history.best_valid_metric = Some(valid_metric);
        }
        let since = epoch - history.best_epoch.expect("set above");
        // Every metric is bounded by 1, so a perfect score cannot be beaten.
        let saturated = history.best_valid_metric.is_some_and(|m| m >= 1.0);
        if config.early_stop_patience > 0 && (since >= config.early_stop_patience || saturated) && epoch < config.epochs {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best.map_or(params, |(_, p)| p), history))
}

/// One sweep trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub valid_metric: f64,
    pub seed: u64,
}

/// Trains once per entry of `epsilons`, all with the base seed, and
/// reports the validation metric of each returned model.
pub fn fixed_epsilon_sweep(
    train_set: &[EncodedInstance],
    valid_set: &[EncodedInstance],
    model_config: &ModelConfig,
    base: &TrainConfig,
    epsilons: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let mut cfg = base.clone();
        cfg.adv.epsilon = epsilon;
        let (params, _) = train(train_set, valid_set, model_config, &cfg)?;
        rows.push(SweepRow {
            epsilon,
            valid_metric: evaluator::score(valid_set, &params, model_config, cfg.task)?,
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

/// Draws `trials` values of ε uniformly from `[lo, hi]`, trains with each
/// and returns the rows sorted by ε.
pub fn epsilon_sweep<R: Rng + ?Sized>(
    train_set: &[EncodedInstance],
    valid_set: &[EncodedInstance],
    model_config: &ModelConfig,
    base: &TrainConfig,
    trials: usize,
    range: (f64, f64),
    rng: &mut R,
) -> Result<Vec<SweepRow>> {
    let (lo, hi) = range;
    if trials == 0 {
        return Err(Error::Config("a sweep needs at least one trial".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(Error::Config(format!("invalid epsilon range [{lo}, {hi}]")));
    }
    let epsilons: Vec<f64> = (0..trials)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
        .collect();
    let mut rows = fixed_epsilon_sweep(train_set, valid_set, model_config, base, &epsilons)?;
    rows.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    Ok(rows)
}

#[cfg(test)]
mod tests;

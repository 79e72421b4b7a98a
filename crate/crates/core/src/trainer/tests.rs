use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adversary::{adversarial_loss, Method};
use crate::model::TaskKind;

fn toy_config(kind: TaskKind) -> ModelConfig {
    ModelConfig::new(kind, 8, 6, 8, 2).with_attn_dim(4)
}

/// Label 1 exactly when token 2 appears somewhere.
fn separable(n: usize, seed: u64) -> Vec<EncodedInstance> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(2..6);
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.random_range(3..8)).collect();
            let label = i % 2;
            if label == 1 {
                let at = rng.random_range(0..len);
                tokens[at] = 2;
            }
            EncodedInstance {
                tokens,
                query: None,
                label,
            }
        })
        .collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs,
        batch_size: 8,
        seed: 3,
        early_stop_patience: 0,
        task: Task::Bc,
        ..TrainConfig::default()
    }
}

fn params(cfg: &ModelConfig, seed: u64) -> ModelParameters {
    ModelParameters::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero_grads(p: &ModelParameters) -> Vec<Tensor> {
    p.named().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect()
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let cfg = toy_config(TaskKind::Single);
    let mut p = params(&cfg, 1);
    let before = p.clone();
    let tc = TrainConfig {
        l2_coefficient: 0.0,
        ..quick(1)
    };
    let mut state = OptimizerState::new(&p);
    let grads = zero_grads(&p);
    adam_step(&mut p, &grads, &mut state, &tc).unwrap();
    assert_eq!(p, before);
    assert_eq!(state.step, 1);
}

#[test]
fn first_adam_step_moves_each_weight_by_the_learning_rate() {
    let cfg = toy_config(TaskKind::Single);
    let mut p = params(&cfg, 1);
    let before = p.clone();
    let tc = TrainConfig {
        l2_coefficient: 0.0,
        clip_norm: None,
        ..quick(1)
    };
    let mut grads = zero_grads(&p);
    // dec.b is last; give it gradients of both signs and very different sizes.
    let last = grads.len() - 1;
    grads[last].data_mut().copy_from_slice(&[3.0, -1e-3]);
    let mut state = OptimizerState::new(&p);
    adam_step(&mut p, &grads, &mut state, &tc).unwrap();
    let moved: Vec<f64> = p.dec_b.data().iter().zip(before.dec_b.data()).map(|(a, b)| a - b).collect();
    // With bias correction the first step is lr·g/(|g|+ε).
    assert!((moved[0] + 0.01 * 3.0 / (3.0 + ADAM_EPSILON)).abs() < 1e-15);
    assert!((moved[1] - 0.01 * 1e-3 / (1e-3 + ADAM_EPSILON)).abs() < 1e-15);
    assert_eq!(p.dec_w, before.dec_w);
}

#[test]
fn adam_matches_a_hand_rolled_update_over_several_steps() {
    let cfg = toy_config(TaskKind::Single);
    let mut p = params(&cfg, 2);
    let tc = TrainConfig {
        l2_coefficient: 0.1,
        clip_norm: None,
        ..quick(1)
    };
    let mut state = OptimizerState::new(&p);
    let (mut w, mut m, mut v) = (p.dec_b.data()[0], 0.0, 0.0);
    for (step, g) in [0.5, -0.2, 0.9].into_iter().enumerate() {
        let mut grads = zero_grads(&p);
        let last = grads.len() - 1;
        grads[last].data_mut()[0] = g;
        adam_step(&mut p, &grads, &mut state, &tc).unwrap();
        let g = g + 0.1 * w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let t = step as i32 + 1;
        w -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((p.dec_b.data()[0] - w).abs() < 1e-14);
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let cfg = toy_config(TaskKind::Single);
    let base = params(&cfg, 1);
    let mut grads = zero_grads(&base);
    let last = grads.len() - 1;
    grads[last].data_mut().copy_from_slice(&[300.0, 400.0]);
    let run = |clip: Option<f64>, grads: &[Tensor]| {
        let tc = TrainConfig {
            l2_coefficient: 0.0,
            clip_norm: clip,
            ..quick(1)
        };
        let mut p = base.clone();
        let mut state = OptimizerState::new(&p);
        adam_step(&mut p, grads, &mut state, &tc).unwrap();
        state.first_moment[last].data().to_vec()
    };
    let clipped = run(Some(5.0), &grads);
    assert!((clipped[0] - 0.1 * 3.0).abs() < 1e-12 && (clipped[1] - 0.1 * 4.0).abs() < 1e-12);
    let free = run(None, &grads);
    assert!((free[0] - 30.0).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_is_reported_by_name() {
    let cfg = toy_config(TaskKind::Single);
    let mut p = params(&cfg, 1);
    let before = p.clone();
    let mut grads = zero_grads(&p);
    grads[0].data_mut()[5] = f64::NAN;
    let mut state = OptimizerState::new(&p);
    match adam_step(&mut p, &grads, &mut state, &quick(1)) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "embedding"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(p, before);
}

#[test]
fn frozen_embeddings_stay_put() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(16, 1);
    let tc = TrainConfig {
        freeze_embeddings: true,
        ..quick(2)
    };
    let init = params(&cfg, tc.seed);
    let (p, _) = train(&data, &data, &cfg, &tc).unwrap();
    assert_eq!(p.embedding, init.embedding);
    assert_ne!(p.dec_w, init.dec_w);
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(24, 2);
    for method in [Method::Vanilla, Method::AttentionIat, Method::AttentionRp, Method::WordAt] {
        let tc = TrainConfig {
            adv: AdvConfig::new(method, if method == Method::Vanilla { 0.0 } else { 0.5 }, 1.0).unwrap(),
            ..quick(3)
        };
        let a = train(&data, &data, &cfg, &tc).unwrap();
        let b = train(&data, &data, &cfg, &tc).unwrap();
        assert_eq!(a.0, b.0, "{method}");
        assert_eq!(a.1.epochs.len(), 3);
        for (x, y) in a.1.epochs.iter().zip(&b.1.epochs) {
            assert_eq!(x.objective.to_bits(), y.objective.to_bits());
        }
    }
}

#[test]
fn toy_separable_set_is_learned() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(40, 4);
    let tc = TrainConfig {
        learning_rate: 0.02,
        ..quick(30)
    };
    let (p, history) = train(&data, &data, &cfg, &tc).unwrap();
    assert_eq!(evaluator::score(&data, &p, &cfg, Task::Qa).unwrap(), 1.0);
    assert_eq!(history.best_valid_metric, Some(1.0));
    let first = history.epochs.first().unwrap().clean_loss;
    let last = history.epochs.last().unwrap().clean_loss;
    assert!(last < first * 0.5, "{first} -> {last}");
}

#[test]
fn zero_epochs_return_the_initial_parameters() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(8, 5);
    let tc = quick(0);
    let (p, history) = train(&data, &data, &cfg, &tc).unwrap();
    assert_eq!(p, params(&cfg, tc.seed));
    assert!(history.epochs.is_empty());
    assert_eq!(history.best_epoch, None);
}

#[test]
fn zero_epsilon_attention_training_equals_vanilla_bitwise() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(16, 6);
    let vanilla = train(&data, &data, &cfg, &quick(2)).unwrap();
    for method in [Method::AttentionAt, Method::AttentionIat, Method::WordIat] {
        let tc = TrainConfig {
            adv: AdvConfig::new(method, 0.0, 1.0).unwrap(),
            ..quick(2)
        };
        let adv = train(&data, &data, &cfg, &tc).unwrap();
        assert_eq!(adv.0, vanilla.0, "{method}");
        assert_eq!(
            serde_json::to_string(&adv.1).unwrap(),
            serde_json::to_string(&vanilla.1).unwrap(),
            "{method}"
        );
    }
}

#[test]
fn step_reports_the_objective_components() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(6, 7);
    let refs: Vec<&EncodedInstance> = data.iter().collect();
    let p = params(&cfg, 1);
    let adv = AdvConfig::new(Method::AttentionAt, 0.3, 0.7).unwrap();
    let tc = TrainConfig { adv, ..quick(1) };
    let want = adversarial_loss(&refs, &p, &cfg, &adv, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut q = p.clone();
    let mut state = OptimizerState::new(&q);
    let got = train_step(&mut q, &refs, &cfg, &tc, &mut state, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(got, want);
    let a = got.adversarial.unwrap();
    assert!((got.objective - (got.clean + 0.7 * a)).abs() < 1e-12);
    assert_ne!(q, p);
}

#[test]
fn best_epoch_is_returned_and_patience_stops_early() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(24, 8);
    let mut seen = Vec::new();
    let tc = TrainConfig {
        early_stop_patience: 2,
        ..quick(40)
    };
    let (p, history) = train_from(params(&cfg, tc.seed), &data, &data, &cfg, &tc, |r| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (1..=history.epochs.len()).collect::<Vec<_>>());
    let best = history.best_epoch.unwrap();
    let best_metric = history.epochs[best - 1].valid_metric;
    assert_eq!(history.best_valid_metric, Some(best_metric));
    assert!(history.epochs[..best - 1].iter().all(|r| r.valid_metric < best_metric));
    assert!(history.epochs[best..].iter().all(|r| r.valid_metric <= best_metric));
    assert_eq!(evaluator::score(&data, &p, &cfg, Task::Bc).unwrap(), best_metric);
    if history.stopped_early {
        let want = if best_metric == 1.0 { best } else { best + 2 };
        assert_eq!(history.epochs.len(), want);
    }
}

#[test]
fn perfect_validation_ends_training() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(40, 4);
    let tc = TrainConfig {
        learning_rate: 0.02,
        early_stop_patience: 5,
        ..quick(30)
    };
    let (p, history) = train(&data, &data, &cfg, &tc).unwrap();
    let best = history.best_epoch.unwrap();
    assert_eq!(history.best_valid_metric, Some(1.0));
    assert_eq!(history.epochs.len(), best);
    assert!(history.stopped_early && best < 30);
    let no_stop = TrainConfig {
        early_stop_patience: 0,
        ..tc
    };
    let (full, _) = train(&data, &data, &cfg, &no_stop).unwrap();
    assert_eq!(p, full);
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(4, 9);
    for tc in [
        TrainConfig {
            batch_size: 0,
            ..quick(1)
        },
        TrainConfig {
            learning_rate: 0.0,
            ..quick(1)
        },
        TrainConfig {
            clip_norm: Some(-1.0),
            ..quick(1)
        },
    ] {
        assert!(matches!(train(&data, &data, &cfg, &tc), Err(Error::Config(_))));
    }
    assert!(train(&[], &data, &cfg, &quick(1)).is_err());
}

#[test]
fn divergence_is_reported() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(8, 10);
    let mut p = params(&cfg, 1);
    p.dec_w.data_mut()[0] = f64::NAN;
    let mut state = OptimizerState::new(&p);
    let refs: Vec<&EncodedInstance> = data.iter().collect();
    assert!(train_step(&mut p, &refs, &cfg, &quick(1), &mut state, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn sweeps_share_the_seed_and_sort_rows() {
    let cfg = toy_config(TaskKind::Single);
    let data = separable(16, 11);
    let base = TrainConfig {
        adv: AdvConfig::new(Method::AttentionAt, 0.0, 1.0).unwrap(),
        ..quick(1)
    };
    let rows = epsilon_sweep(&data, &data, &cfg, &base, 3, (0.5, 2.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].epsilon <= w[1].epsilon));
    for r in &rows {
        assert!((0.5..=2.0).contains(&r.epsilon));
        assert_eq!(r.seed, base.seed);
        assert!((0.0..=1.0).contains(&r.valid_metric));
    }
    let fixed = fixed_epsilon_sweep(&data, &data, &cfg, &base, &[rows[0].epsilon]).unwrap();
    assert_eq!(fixed[0], rows[0]);
    assert!(epsilon_sweep(&data, &data, &cfg, &base, 0, (0.0, 1.0), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    assert!(epsilon_sweep(&data, &data, &cfg, &base, 1, (2.0, 1.0), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [TaskKind::Single, TaskKind::Pair] {
        let cfg = toy_config(kind);
        let p = params(&cfg, 12);
        let vocab = crate::data::Vocabulary::build([&["a", "b"][..]], 1).unwrap();
        let ck = Checkpoint::new(&cfg, &p, Some(&vocab), Some(&quick(2)));
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let q = back.params().unwrap();
        assert_eq!(q, p);
        for ((_, a), (_, b)) in p.named().iter().zip(q.named().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = toy_config(TaskKind::Single);
    let p = params(&cfg, 13);
    let good = Checkpoint::new(&cfg, &p, None, None);

    let mut missing = good.clone();
    missing.tensors.pop();
    assert!(matches!(missing.params(), Err(Error::Checkpoint(m)) if m.contains("dec.b")));

    let mut dup = good.clone();
    dup.tensors.push(dup.tensors[0].clone());
    assert!(matches!(dup.params(), Err(Error::Checkpoint(_))));

    let mut wrong = good.clone();
    wrong.tensors[1].values.pop();
    assert!(wrong.params().is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.json");
    let mut future = good;
    future.version = 99;
    future.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, "{not json").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{forward, AttentionState, TaskKind};

fn tiny(kind: TaskKind, seed: u64) -> (ModelConfig, ModelParameters) {
    let cfg = ModelConfig::new(kind, 9, 4, 4, 3).with_attn_dim(2);
    let p = ModelParameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (cfg, p)
}

fn inst(kind: TaskKind, tokens: Vec<usize>, label: usize) -> EncodedInstance {
    EncodedInstance {
        tokens,
        query: (kind == TaskKind::Pair).then(|| vec![5, 6]),
        label,
    }
}

fn output(prediction: Vec<f64>) -> ForwardOutput {
    ForwardOutput {
        prediction,
        attention: AttentionState {
            scores: vec![0.0],
            weights: vec![1.0],
            mask: vec![true],
        },
        hidden: Tensor::zeros(1, 2),
        context: vec![0.0, 0.0],
    }
}

fn score_loss(i: &EncodedInstance, p: &ModelParameters, cfg: &ModelConfig, r: &[f64]) -> f64 {
    nll_loss(&forward(i, p, cfg, Some(r)).unwrap(), i.label, cfg).unwrap()
}

fn emb_loss(i: &EncodedInstance, p: &ModelParameters, cfg: &ModelConfig, r: &Tensor) -> f64 {
    nll_loss(&forward_with_embedding_perturbation(i, p, cfg, r).unwrap(), i.label, cfg).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = l2(v);
    v.iter().map(|x| x / n).collect()
}

#[test]
fn nll_examples() {
    let (cfg, _) = tiny(TaskKind::Pair, 0);
    assert!(nll_loss(&output(vec![1.0, 0.0]), 0, &cfg).unwrap() < 1e-11);
    let mut prev = f64::INFINITY;
    for p in [0.1, 0.3, 0.5, 0.9] {
        let l = nll_loss(&output(vec![p, 1.0 - p]), 0, &cfg).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(matches!(nll_loss(&output(vec![0.5, 0.5]), 2, &cfg), Err(Error::OutOfRange { .. })));

    let (cfg, _) = tiny(TaskKind::Single, 0);
    let l = nll_loss(&output(vec![0.5, 0.5]), 1, &cfg).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
}

#[test]
fn nll_matches_the_training_graph() {
    for kind in [TaskKind::Single, TaskKind::Pair] {
        let (cfg, p) = tiny(kind, 3);
        let i = inst(kind, vec![2, 3, 4], 2);
        let direct = nll_loss(&forward(&i, &p, &cfg, None).unwrap(), 2, &cfg).unwrap();
        let graph = adversarial_loss(&[&i], &p, &cfg, &AdvConfig::vanilla(), &mut NoRng).unwrap();
        assert_eq!(direct, graph.clean);
        assert_eq!(graph.objective, graph.clean);
    }
}

#[test]
fn normalization_arithmetic() {
    let mut g = vec![3.0, 4.0];
    assert!(normalize_into(&mut g, 1.0));
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    let mut z = vec![1e-14, 0.0];
    assert!(!normalize_into(&mut z, 1.0));
    assert_eq!(z, vec![0.0, 0.0]);
}

#[test]
fn attention_at_norm_and_scale() {
    for kind in [TaskKind::Single, TaskKind::Pair] {
        let (cfg, p) = tiny(kind, 4);
        let i = inst(kind, vec![2, 3, 4, 7], 1);
        let zero = attention_at_perturbation(&i, &p, &cfg, 0.0).unwrap();
        assert_eq!(zero.values, Tensor::zeros(1, 4));
        let r1 = attention_at_perturbation(&i, &p, &cfg, 0.7).unwrap();
        let r2 = attention_at_perturbation(&i, &p, &cfg, 1.4).unwrap();
        assert!(!r1.degenerate);
        assert!((r1.norm() - 0.7).abs() < 1e-9);
        assert_eq!(r1.values.scaled(2.0), r2.values);
        assert_eq!(r1.target, PerturbationTarget::AttentionScores);
    }
}

#[test]
fn attention_at_follows_the_numerical_gradient() {
    let (cfg, p) = tiny(TaskKind::Pair, 5);
    let i = inst(TaskKind::Pair, vec![2, 3, 4], 0);
    let h = 1e-6;
    let g: Vec<f64> = (0..3)
        .map(|t| {
            let mut a = vec![0.0; 3];
            let mut b = vec![0.0; 3];
            a[t] = h;
            b[t] = -h;
            (score_loss(&i, &p, &cfg, &a) - score_loss(&i, &p, &cfg, &b)) / (2.0 * h)
        })
        .collect();
    let r = attention_at_perturbation(&i, &p, &cfg, 1.0).unwrap();
    for (x, y) in r.values.data().iter().zip(unit(&g)) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn attention_at_beats_random_directions() {
    let (cfg, p) = tiny(TaskKind::Single, 6);
    let i = inst(TaskKind::Single, vec![2, 3, 4], 1);
    let eps = 1e-3;
    let r = attention_at_perturbation(&i, &p, &cfg, eps).unwrap();
    let best = score_loss(&i, &p, &cfg, r.values.data());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let d: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let d: Vec<f64> = unit(&d).into_iter().map(|x| x * eps).collect();
        assert!(best >= score_loss(&i, &p, &cfg, &d) - 1e-6);
    }
}

#[test]
fn masked_positions_get_no_perturbation() {
    let (cfg, p) = tiny(TaskKind::Single, 7);
    let i = inst(TaskKind::Single, vec![2, PAD_ID, 4], 1);
    let r = attention_at_perturbation(&i, &p, &cfg, 1.0).unwrap();
    assert_eq!(r.values.data()[1], 0.0);
    assert!((r.norm() - 1.0).abs() < 1e-9);
    let w = word_at_perturbation(&i, &p, &cfg, 1.0).unwrap();
    assert!(w.values.row_slice(1).iter().all(|&x| x == 0.0));
    assert!((w.norm() - 1.0).abs() < 1e-9);
    let rp = attention_rp_perturbation(3, Some(&[true, false, true]), 2.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(rp.values.data()[1], 0.0);
}

#[test]
fn difference_vector_examples() {
    let d = difference_vectors(&[1.0, 2.0], None).unwrap();
    assert_eq!(d.get(0), &[0.0, -1.0]);
    assert_eq!(d.get(1), &[1.0, 0.0]);

    let d = difference_vectors(&[0.3; 3], None).unwrap();
    assert!(d.as_tensor().data().iter().all(|&x| x == 0.0));

    let d = difference_vectors(&[0.1, 0.2, 0.4], None).unwrap();
    for t in 0..3 {
        assert!((l2(d.get(t)) - 1.0).abs() < 1e-12);
        assert_eq!(d.get(t)[t], 0.0);
    }

    let d = difference_vectors(&[0.1, 5.0, 0.4], Some(&[true, false, true])).unwrap();
    assert!(d.get(1).iter().all(|&x| x == 0.0));
    assert_eq!(d.get(0)[1], 0.0);
    assert!(difference_vectors(&[], None).is_err());
    assert!(difference_vectors(&[1.0], Some(&[true, true])).is_err());
}

#[test]
fn raw_differences_are_antisymmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..7 {
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d = score_differences(&s, None).unwrap();
        for t in 0..n {
            for k in 0..n {
                assert_eq!(d.get(t, k), -d.get(k, t));
            }
        }
    }
}

#[test]
fn difference_vectors_apply_hand_case() {
    let d = difference_vectors(&[1.0, 2.0], None).unwrap();
    let (a, b) = (0.3, -0.7);
    let r = d.apply(&Tensor::from_rows(&[vec![0.0, a], vec![b, 0.0]]).unwrap()).unwrap();
    assert_eq!(r, vec![-a, b]);
}

#[test]
fn attention_iat_degenerate_cases() {
    let (cfg, p) = tiny(TaskKind::Single, 8);
    let one = inst(TaskKind::Single, vec![3], 0);
    let r = attention_iat_perturbation(&one, &p, &cfg, 2.0).unwrap();
    assert_eq!(r.values.data(), &[0.0]);
    assert!(r.degenerate);
    let i = inst(TaskKind::Single, vec![2, 3, 4], 0);
    assert_eq!(attention_iat_perturbation(&i, &p, &cfg, 0.0).unwrap().values, Tensor::zeros(1, 3));

    let mut flat = p.clone();
    flat.attention.c = Tensor::zeros(1, 2);
    let r = attention_iat_perturbation(&i, &flat, &cfg, 2.0).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.values, Tensor::zeros(1, 3));
}

#[test]
fn attention_iat_matches_its_defining_construction() {
    // Independent route: gradient over the coefficients by finite
    // differences, Frobenius normalization, then mapping through d̃.
    let (cfg, p) = tiny(TaskKind::Pair, 9);
    let i = inst(TaskKind::Pair, vec![2, 3, 4], 1);
    let clean = forward(&i, &p, &cfg, None).unwrap();
    let d = difference_vectors(&clean.attention.scores, None).unwrap();
    let loss_alpha = |alpha: &Tensor| score_loss(&i, &p, &cfg, &d.apply(alpha).unwrap());
    let h = 1e-6;
    let mut g = Tensor::zeros(3, 3);
    for t in 0..3 {
        for k in 0..3 {
            let mut a = Tensor::zeros(3, 3);
            a.set(t, k, h);
            let up = loss_alpha(&a);
            a.set(t, k, -h);
            let down = loss_alpha(&a);
            g.set(t, k, (up - down) / (2.0 * h));
        }
    }
    let eps = 0.5;
    let alpha = g.scaled(eps / g.norm());
    let want = d.apply(&alpha).unwrap();
    let got = attention_iat_perturbation(&i, &p, &cfg, eps).unwrap();
    for (x, y) in got.values.data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn attention_iat_coincides_with_at_when_all_directions_exist() {
    let (cfg, p) = tiny(TaskKind::Single, 10);
    let i = inst(TaskKind::Single, vec![2, 3, 4, 5], 2);
    let at = attention_at_perturbation(&i, &p, &cfg, 1.3).unwrap();
    let iat = attention_iat_perturbation(&i, &p, &cfg, 1.3).unwrap();
    assert!(at.values.max_abs_diff(&iat.values) < 1e-12);
}

#[test]
fn random_perturbation_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let before = rng.clone();
    let z = attention_rp_perturbation(4, None, 0.0, &mut rng).unwrap();
    assert_eq!(z.values, Tensor::zeros(1, 4));
    assert_eq!(rng, before);
    let r = attention_rp_perturbation(4, None, 2.5, &mut rng).unwrap();
    assert!((r.norm() - 2.5).abs() < 1e-9);
    let a = attention_rp_perturbation(5, None, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = attention_rp_perturbation(5, None, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(attention_rp_perturbation(2, Some(&[true]), 1.0, &mut rng).is_err());
    assert!(attention_rp_perturbation(2, None, -1.0, &mut rng).is_err());
}

#[test]
fn word_at_contract() {
    let (cfg, p) = tiny(TaskKind::Pair, 11);
    let i = inst(TaskKind::Pair, vec![2, 3, 4], 1);
    let clean = forward(&i, &p, &cfg, None).unwrap();
    let zero = word_at_perturbation(&i, &p, &cfg, 0.0).unwrap();
    assert_eq!(zero.values.shape(), [3, 4]);
    assert_eq!(forward_with_embedding_perturbation(&i, &p, &cfg, &zero.values).unwrap(), clean);

    let r = word_at_perturbation(&i, &p, &cfg, 0.9).unwrap();
    assert!((r.norm() - 0.9).abs() < 1e-9);
    assert_eq!(r.target, PerturbationTarget::WordEmbeddings);

    let h = 1e-6;
    let mut g = Tensor::zeros(3, 4);
    for t in 0..3 {
        for c in 0..4 {
            let mut e = Tensor::zeros(3, 4);
            e.set(t, c, h);
            let up = emb_loss(&i, &p, &cfg, &e);
            e.set(t, c, -h);
            g.set(t, c, (up - emb_loss(&i, &p, &cfg, &e)) / (2.0 * h));
        }
    }
    let want = g.scaled(0.9 / g.norm());
    assert!(r.values.max_abs_diff(&want) < 1e-6);
    assert!(forward_with_embedding_perturbation(&i, &p, &cfg, &Tensor::zeros(2, 4)).is_err());
}

#[test]
fn word_iat_degenerate_and_cap() {
    let cfg = ModelConfig::new(TaskKind::Single, 2, 3, 4, 2).with_attn_dim(2);
    let p = ModelParameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let i = inst(TaskKind::Single, vec![1, 1], 0);
    let r = word_iat_perturbation(&i, &p, &cfg, 1.0).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.values, Tensor::zeros(2, 3));
    assert_eq!(word_iat_perturbation(&i, &p, &cfg, 0.0).unwrap().values, Tensor::zeros(2, 3));

    let cfg = ModelConfig::new(TaskKind::Single, WORD_IAT_VOCAB_CAP + 1, 2, 4, 2).with_attn_dim(2);
    let p = ModelParameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(
        word_iat_perturbation(&i, &p, &cfg, 1.0),
        Err(Error::VocabularyTooLarge { .. })
    ));
}

#[test]
fn word_iat_leans_towards_the_most_harmful_word() {
    // Vocabulary: padding, unknown, and three words; a one-token sentence.
    let cfg = ModelConfig::new(TaskKind::Single, 5, 3, 4, 2).with_attn_dim(2);
    for seed in 0..5 {
        let p = ModelParameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let i = inst(TaskKind::Single, vec![2], 1);
        let eps = 0.2;
        let r = word_iat_perturbation(&i, &p, &cfg, eps).unwrap();
        assert!(!r.degenerate);

        let w = p.embedding.row_slice(2).to_vec();
        let h = 1e-6;
        // Directional derivative towards every other non-padding word.
        let mut best = (f64::NEG_INFINITY, 0);
        let mut dirs = Vec::new();
        for k in [1, 3, 4] {
            let dir = unit(&p.embedding.row_slice(k).iter().zip(&w).map(|(e, x)| e - x).collect::<Vec<_>>());
            let step = |s: f64| Tensor::row(dir.iter().map(|x| x * s).collect());
            let slope = (emb_loss(&i, &p, &cfg, &step(h)) - emb_loss(&i, &p, &cfg, &step(-h))) / (2.0 * h);
            if slope > best.0 {
                best = (slope, k);
            }
            dirs.push((k, dir, slope));
        }
        // Coefficients are proportional to the slopes, so the largest one
        // belongs to the steepest word, and the perturbation is the
        // slope-weighted mix of the directions.
        let norm = dirs.iter().map(|d| d.2 * d.2).sum::<f64>().sqrt();
        let mut want = [0.0; 3];
        for (_, dir, slope) in &dirs {
            for (w, d) in want.iter_mut().zip(dir.iter()) {
                *w += eps * slope / norm * d;
            }
        }
        for (got, w) in r.values.data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-6);
        }
        // Locally the mix gains at least as much as stepping towards the
        // steepest word alone.
        let small = 1e-4;
        let r_small = word_iat_perturbation(&i, &p, &cfg, small).unwrap();
        let toward_best = &dirs.iter().find(|d| d.0 == best.1).unwrap().1;
        let single = Tensor::row(toward_best.iter().map(|x| x * small).collect());
        assert!(emb_loss(&i, &p, &cfg, &r_small.values) >= emb_loss(&i, &p, &cfg, &single) - 1e-10);
        let clean = emb_loss(&i, &p, &cfg, &Tensor::zeros(1, 3));
        assert!(emb_loss(&i, &p, &cfg, &r.values) > clean);
    }
}

#[test]
fn objective_rules() {
    let (cfg, p) = tiny(TaskKind::Single, 12);
    let a = inst(TaskKind::Single, vec![2, 3, 4], 0);
    let b = inst(TaskKind::Single, vec![5, 6], 2);
    let batch = [&a, &b];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vanilla = adversarial_loss(&batch, &p, &cfg, &AdvConfig::vanilla(), &mut rng).unwrap();
    assert_eq!(vanilla.adversarial, None);
    for method in Method::ALL {
        let zero_eps = AdvConfig::new(method, 0.0, 1.0).unwrap();
        let zero_lambda = AdvConfig::new(method, 3.0, 0.0).unwrap();
        for adv in [zero_eps, zero_lambda] {
            assert_eq!(adversarial_loss(&batch, &p, &cfg, &adv, &mut rng).unwrap(), vanilla);
        }
        if method == Method::Vanilla {
            continue;
        }
        for lambda in [1.0, 0.5] {
            let adv = AdvConfig::new(method, 1.0, lambda).unwrap();
            let out = adversarial_loss(&batch, &p, &cfg, &adv, &mut rng).unwrap();
            assert_eq!(out.clean, vanilla.clean);
            let adv_part = out.adversarial.unwrap();
            assert!((out.objective - (out.clean + lambda * adv_part)).abs() < 1e-12);
            if method != Method::AttentionRp {
                assert!(adv_part > out.clean, "{method}");
            }
        }
    }
}

#[test]
fn objective_uses_per_instance_perturbations() {
    for kind in [TaskKind::Single, TaskKind::Pair] {
        let (cfg, p) = tiny(kind, 13);
        let insts = [
            inst(kind, vec![2, 3, 4, 5], 0),
            inst(kind, vec![6], 1),
            inst(kind, vec![7, PAD_ID, 8], 2),
        ];
        let refs: Vec<&EncodedInstance> = insts.iter().collect();
        for method in [Method::AttentionAt, Method::AttentionIat, Method::WordAt, Method::WordIat] {
            let adv = AdvConfig::new(method, 0.8, 1.0).unwrap();
            let whole = adversarial_loss(&refs, &p, &cfg, &adv, &mut NoRng).unwrap();
            let parts: Vec<LossBreakdown> = refs
                .iter()
                .map(|i| adversarial_loss(&[*i], &p, &cfg, &adv, &mut NoRng).unwrap())
                .collect();
            let mean = parts.iter().map(|x| x.objective).sum::<f64>() / 3.0;
            assert!((whole.objective - mean).abs() < 1e-12, "{method}");
        }
    }
}

#[test]
fn uniform_scores_make_iat_fall_back_to_twice_clean() {
    let (cfg, mut p) = tiny(TaskKind::Single, 14);
    p.attention.c = Tensor::zeros(1, 2);
    let i = inst(TaskKind::Single, vec![2, 3, 4], 1);
    let adv = AdvConfig::new(Method::AttentionIat, 2.0, 1.0).unwrap();
    let out = adversarial_loss(&[&i], &p, &cfg, &adv, &mut NoRng).unwrap();
    assert_eq!(out.adversarial, Some(out.clean));
    assert_eq!(out.degenerate, 1);
    assert!((out.objective - 2.0 * out.clean).abs() < 1e-12);
}

#[test]
fn perturbations_leave_the_clean_pass_alone() {
    let (cfg, p) = tiny(TaskKind::Pair, 15);
    let i = inst(TaskKind::Pair, vec![2, 3, 4], 0);
    let snapshot = p.clone();
    let before = score_loss(&i, &p, &cfg, &[0.0; 3]);
    for m in [Method::AttentionAt, Method::AttentionIat, Method::WordAt, Method::WordIat] {
        single_perturbation(&i, &p, &cfg, m, 1.0).unwrap();
    }
    assert_eq!(p, snapshot);
    assert_eq!(score_loss(&i, &p, &cfg, &[0.0; 3]).to_bits(), before.to_bits());
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!("fgsm".parse::<Method>().is_err());
    assert!(AdvConfig::new(Method::AttentionAt, -1.0, 1.0).is_err());
    assert!(AdvConfig::new(Method::AttentionAt, 1.0, f64::NAN).is_err());
}

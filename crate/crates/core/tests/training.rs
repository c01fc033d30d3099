//! Training-loop properties: loss, optimiser, splits, metrics against a
//! brute-force recount, overfitting a single batch, and model selection.

use mmfd_core::datagen::{generate_corpus, CorpusSpec, MultimodalSample};
use mmfd_core::fusion::{AudioEncoderKind, Model, ModelConfig};
use mmfd_core::train::{
    adamw_step, best_index, chronological_split, cross_entropy, evaluate, split_sizes, train_on_split, train_step,
    AdamWConfig, AdamWState, MetricsReport, TrainConfig,
};
use mmfd_core::{Error, Graph, Tensor};
use proptest::prelude::*;

fn ce(logits: [f64; 2], label: u8) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(logits.to_vec()));
    let l = cross_entropy(&mut g, z, label).unwrap();
    g.value(l).data()[0]
}

fn corpus(n: usize, seed: u64) -> Vec<MultimodalSample> {
    generate_corpus(&CorpusSpec {
        n_samples: n,
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
    .samples
}

/// Independent confusion-matrix recount, fake = positive.
fn recount(pred: &[u8], gold: &[u8]) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &y) in pred.iter().zip(gold) {
        match (p, y) {
            (1, 1) => c.0 += 1,
            (1, 0) => c.1 += 1,
            (0, 0) => c.2 += 1,
            _ => c.3 += 1,
        }
    }
    c
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn cross_entropy_is_non_negative_and_ln2_at_ties(a in -30.0f64..30.0, b in -30.0f64..30.0, label in 0u8..2) {
        let l = ce([a, b], label);
        prop_assert!(l >= 0.0);
        prop_assert!((ce([a, a], label) - std::f64::consts::LN_2).abs() < 1e-12);
        if (a - b).abs() > 1e-6 {
            prop_assert!((l - std::f64::consts::LN_2).abs() > 1e-12);
        }
    }

    #[test]
    fn adamw_with_zero_gradients_only_decays(
        w in prop::collection::vec(-100.0f64..100.0, 1..12),
        lr in 1e-5f64..1e-1,
        wd in 0.0f64..0.5,
        steps in 1usize..6,
    ) {
        let mut params = vec![Tensor::vector(w.clone())];
        let cfg = AdamWConfig { lr, weight_decay: wd, ..AdamWConfig::default() };
        let mut state = AdamWState::new(cfg, &params).unwrap();
        let zeros = vec![vec![0.0; w.len()]];
        for k in 1..=steps {
            adamw_step(&mut params, &zeros, &mut state).unwrap();
            let factor = (1.0 - lr * wd).powi(k as i32);
            for (p, x) in params[0].data().iter().zip(&w) {
                prop_assert!((p - x * factor).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adamw_first_step_matches_closed_form(
        w in prop::collection::vec(-10.0f64..10.0, 1..8),
        g in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let c = AdamWConfig::default();
        let g = g[..w.len()].to_vec();
        let mut params = vec![Tensor::vector(w.clone())];
        let mut state = AdamWState::new(c, &params).unwrap();
        adamw_step(&mut params, std::slice::from_ref(&g), &mut state).unwrap();
        for ((p, x), gi) in params[0].data().iter().zip(&w).zip(&g) {
            // m̂ = g and v̂ = g² after one bias-corrected step
            let expect = x - c.lr * (gi / (gi.abs() + c.eps) + c.weight_decay * x);
            prop_assert!((p - expect).abs() < 1e-12);
        }
        prop_assert_eq!(state.t, 1);
    }

    #[test]
    fn split_sizes_partition_n(n in 0usize..100_000) {
        let (a, b, c) = split_sizes(n);
        prop_assert_eq!(a + b + c, n);
        prop_assert_eq!(a, n * 70 / 100);
        prop_assert_eq!(b, n * 15 / 100);
    }

    #[test]
    fn metrics_match_a_brute_force_recount(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
        let (pred, gold): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let m = MetricsReport::from_predictions(&pred, &gold).unwrap();
        let (tp, fp, tn, fn_) = recount(&pred, &gold);
        prop_assert_eq!((m.tp, m.fp, m.tn, m.fn_), (tp, fp, tn, fn_));
        let n = pred.len() as f64;
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / n);
        let (pf, rf) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let (pr, rr) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
        let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        prop_assert!((m.precision - (pf + pr) / 2.0).abs() < 1e-15);
        prop_assert!((m.recall - (rf + rr) / 2.0).abs() < 1e-15);
        prop_assert!((m.f1 - (f1(pf, rf) + f1(pr, rr)) / 2.0).abs() < 1e-15);
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn best_index_is_the_first_maximum(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), 0..20)) {
        match best_index(&scores) {
            None => prop_assert!(scores.is_empty()),
            Some(i) => {
                prop_assert!(scores.iter().all(|&s| s <= scores[i]));
                prop_assert!(scores[..i].iter().all(|&s| s < scores[i]));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn chronological_split_partitions_in_time_order(n in 3usize..120, seed in any::<u64>(), rot in any::<prop::sample::Index>()) {
        let mut samples = corpus(n, seed);
        samples.rotate_left(rot.index(n));
        let split = chronological_split(&samples).unwrap();
        let (a, b, c) = split_sizes(n);
        prop_assert_eq!((split.train.len(), split.val.len(), split.test.len()), (a, b, c));
        let joined: Vec<&MultimodalSample> = split.train.iter().chain(&split.val).chain(&split.test).collect();
        prop_assert!(joined.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let mut ids: Vec<&str> = joined.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}

#[test]
fn split_needs_three_samples() {
    assert!(matches!(chronological_split(&corpus(2, 0)), Err(Error::Input(_))));
}

#[test]
fn evaluate_agrees_with_per_sample_predictions() {
    let model = Model::new(ModelConfig::minimal()).unwrap();
    let samples = corpus(20, 4);
    let m = evaluate(&model, &samples).unwrap();
    let pred: Vec<u8> = samples.iter().map(|s| model.predict(s).unwrap()).collect();
    let gold: Vec<u8> = samples.iter().map(|s| s.label).collect();
    assert_eq!((m.tp, m.fp, m.tn, m.fn_), recount(&pred, &gold));
}

#[test]
fn single_batch_loss_is_non_increasing_over_50_steps() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::minimal()
    };
    let mut model = Model::new(cfg).unwrap();
    let samples = corpus(4, 8);
    let batch: Vec<&MultimodalSample> = samples.iter().collect();
    let mut state = AdamWState::new(AdamWConfig::default(), model.params().tensors()).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_step(&mut model, &mut state, &batch, None).unwrap());
    }
    for (k, w) in losses.windows(2).enumerate() {
        assert!(w[1] <= w[0], "step {}: {} -> {}", k + 1, w[0], w[1]);
    }
    assert!(losses[49] < losses[0]);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let cfg = ModelConfig::minimal();
    let samples = corpus(30, 2);
    let split = chronological_split(&samples).unwrap();
    let train_cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (model, history) = train_on_split(&cfg, &train_cfg, &split.train, &split.val).unwrap();
    assert!(history.epochs.is_empty());
    assert_eq!(history.best_epoch, None);
    assert_eq!(model.params(), Model::new(cfg).unwrap().params());
}

#[test]
fn history_selects_the_best_validation_epoch_and_round_trips() {
    let cfg = ModelConfig::minimal().with_modalities("text".parse().unwrap(), AudioEncoderKind::None);
    let samples = corpus(60, 6);
    let split = chronological_split(&samples).unwrap();
    let train_cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (model, history) = train_on_split(&cfg, &train_cfg, &split.train, &split.val).unwrap();
    assert_eq!(history.epochs.len(), 4);
    let accs: Vec<f64> = history.epochs.iter().map(|e| e.val.accuracy).collect();
    assert_eq!(history.best_epoch, best_index(&accs));
    let best = history.best().unwrap();
    assert_eq!(evaluate(&model, &split.val).unwrap(), best.val);
    let back = mmfd_core::train::TrainHistory::from_json(&history.to_json().unwrap()).unwrap();
    assert_eq!(back, history);

    // Same seed, same run.
    let (again, h2) = train_on_split(&cfg, &train_cfg, &split.train, &split.val).unwrap();
    assert_eq!(again.params(), model.params());
    assert_eq!(h2, history);
}

#[test]
fn batch_size_zero_and_empty_splits_are_rejected() {
    let cfg = ModelConfig::minimal();
    let samples = corpus(10, 1);
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(train_on_split(&cfg, &bad, &samples, &samples).is_err());
    assert!(train_on_split(&cfg, &TrainConfig::default(), &[], &samples).is_err());
}

#[test]
fn non_finite_logits_are_refused() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
    assert!(matches!(cross_entropy(&mut g, z, 0), Err(Error::NonFinite(_))));
    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(cross_entropy(&mut g, z, 2).is_err());
}

#[test]
fn an_exploding_learning_rate_is_reported_as_divergence() {
    let cfg = ModelConfig::minimal();
    let samples = corpus(20, 5);
    let split = chronological_split(&samples).unwrap();
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        optimizer: AdamWConfig {
            lr: 1e308,
            ..AdamWConfig::default()
        },
    };
    match train_on_split(&cfg, &train_cfg, &split.train, &split.val) {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h.epochs.len())),
    }
}

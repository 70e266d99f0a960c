mod common;

use pim_core::features::FeatureStack;
use pim_core::gridmap::{ImportanceClass, MacroblockGrid};
use pim_core::pimm::{
    adam_step, backward, forward, inverse_frequency_weights, loss_wce, predict_classes, predict_map, softmax, train,
    AdamConfig, AdamState, Mode, ModelWeights, TrainConfig, CLASSES,
};
use pim_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn random_stack(seed: u64, rows: usize, cols: usize, c: usize) -> FeatureStack {
    let mut rng = common::rng(seed);
    FeatureStack::raw(rows, cols, c, (0..rows * cols * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn random_targets(seed: u64, rows: usize, cols: usize) -> MacroblockGrid<ImportanceClass> {
    let mut rng = common::rng(seed);
    MacroblockGrid::from_fn(rows, cols, |_, _| ImportanceClass::from_index(rng.gen_range(0..3)).unwrap()).unwrap()
}

/// Inference weights with non-trivial running statistics.
fn inference_model(seed: u64, c: usize) -> ModelWeights {
    let mut w = ModelWeights::init(c, seed).unwrap();
    let mut rng = common::rng(seed ^ 1);
    w.running_mean.iter_mut().for_each(|m| *m = rng.gen_range(-1.0..1.0));
    w.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    for b in w.params.tensors_mut() {
        b.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Mirroring the input is the same as mirroring the output of the
    /// network with mirrored kernels.
    #[test]
    fn flip_equivariance(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7, h in any::<bool>(), v in any::<bool>()) {
        let w = inference_model(seed, 4);
        let x = random_stack(seed, rows, cols, 4);
        let plain = forward(&w, &x, Mode::Infer).unwrap();
        let plain = FeatureStack::raw(rows, cols, CLASSES, plain.logits).unwrap().flipped(h, v);
        let mirrored = forward(&w.flipped_kernels(h, v), &x.flipped(h, v), Mode::Infer).unwrap();
        for (a, b) in plain.data.iter().zip(&mirrored.logits) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn prediction_is_the_argmax(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let w = inference_model(seed, 3);
        let x = random_stack(seed.wrapping_add(5), rows, cols, 3);
        let logits = forward(&w, &x, Mode::Infer).unwrap().logits;
        let classes = predict_classes(&w, &x).unwrap();
        for (cell, class) in logits.chunks(3).zip(classes.cells()) {
            let mut best = 0;
            for k in 0..3 {
                if cell[k] > cell[best] {
                    best = k;
                }
            }
            prop_assert_eq!(class.index(), best);
        }
    }
}

#[test]
fn infer_is_repeatable_and_train_is_seeded() {
    let w = inference_model(3, 5);
    let x = random_stack(3, 4, 6, 5);
    assert_eq!(forward(&w, &x, Mode::Infer).unwrap().logits, forward(&w, &x, Mode::Infer).unwrap().logits);
    let a = forward(&w, &x, Mode::Train { seed: 1 }).unwrap().logits;
    assert_eq!(a, forward(&w, &x, Mode::Train { seed: 1 }).unwrap().logits);
    assert_ne!(a, forward(&w, &x, Mode::Train { seed: 2 }).unwrap().logits);
    let wrong = random_stack(3, 4, 6, 4);
    assert!(matches!(forward(&w, &wrong, Mode::Infer), Err(Error::ChannelMismatch { expected: 5, found: 4 })));
}

#[test]
fn loss_examples() {
    let targets = random_targets(1, 3, 3);
    let uniform = vec![0.0; 27];
    assert!((loss_wce(&uniform, &targets, &[1.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-12);
    let confident: Vec<f64> = targets.cells().iter().flat_map(|t| (0..3).map(move |k| if k == t.index() { 30.0 } else { 0.0 })).collect();
    assert!(loss_wce(&confident, &targets, &[1.0; 3]).unwrap() < 1e-9);
    let mut rng = common::rng(4);
    let logits: Vec<f64> = (0..27).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let l1 = loss_wce(&logits, &targets, &[0.5, 1.0, 2.0]).unwrap();
    let l2 = loss_wce(&logits, &targets, &[1.0, 2.0, 4.0]).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    assert!(loss_wce(&[f64::NAN; 27], &targets, &[1.0; 3]).is_err());
}

#[test]
fn head_bias_gradient_is_mean_residual() {
    let (rows, cols) = (3, 5);
    let mut w = ModelWeights::init(2, 8).unwrap();
    w.dropout = 0.0;
    let x = random_stack(8, rows, cols, 2);
    let t = random_targets(8, rows, cols);
    let pass = forward(&w, &x, Mode::Train { seed: 0 }).unwrap();
    let g = backward(&w, &pass, &t, &[1.0; 3]).unwrap();
    let n = (rows * cols) as f64;
    for k in 0..3 {
        let mean_residual: f64 = pass
            .logits
            .chunks(3)
            .zip(t.cells())
            .map(|(z, c)| softmax(z)[k] - if c.index() == k { 1.0 } else { 0.0 })
            .sum::<f64>()
            / n;
        assert!((g.head.bias[k] - mean_residual).abs() < 1e-12);
    }
}

#[test]
fn zero_weight_on_present_classes_gives_zero_gradient() {
    let w = ModelWeights::init(3, 2).unwrap();
    let x = random_stack(2, 4, 4, 3);
    let t = MacroblockGrid::filled(4, 4, ImportanceClass::Mid).unwrap();
    let pass = forward(&w, &x, Mode::Train { seed: 5 }).unwrap();
    let g = backward(&w, &pass, &t, &[1.0, 0.0, 1.0]).unwrap();
    assert!(g.tensors().iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn stale_cache_is_rejected() {
    let mut w = ModelWeights::init(3, 2).unwrap();
    let x = random_stack(2, 4, 4, 3);
    let t = random_targets(2, 4, 4);
    let infer = forward(&w, &x, Mode::Infer).unwrap();
    assert!(matches!(backward(&w, &infer, &t, &[1.0; 3]), Err(Error::StaleCache(_))));
    let pass = forward(&w, &x, Mode::Train { seed: 5 }).unwrap();
    w.params.head.bias[0] += 0.1;
    assert!(matches!(backward(&w, &pass, &t, &[1.0; 3]), Err(Error::StaleCache(_))));
}

#[test]
fn adam_behaviour() {
    let w = ModelWeights::init(2, 0).unwrap();
    let zero = w.params.zeros_like();
    let (mut p, mut st) = (w.params.clone(), AdamState::new(&w.params));
    adam_step(&mut p, &mut st, &zero, 1e-3, &AdamConfig::default()).unwrap();
    assert_eq!(p, w.params);
    assert_eq!(st.step, 1);

    // A constant gradient settles to steps of lr in the direction against it.
    let mut g = zero.clone();
    g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = -0.25));
    let mut st = AdamState::new(&w.params);
    let mut p = w.params.clone();
    for _ in 0..500 {
        adam_step(&mut p, &mut st, &g, 1e-3, &AdamConfig::default()).unwrap();
    }
    let before = p.clone();
    adam_step(&mut p, &mut st, &g, 1e-3, &AdamConfig::default()).unwrap();
    for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y - 1e-3).abs() < 1e-9);
        }
    }
}

#[test]
fn class_weights_from_frequency() {
    let a = MacroblockGrid::new(1, 4, vec![ImportanceClass::Low, ImportanceClass::Low, ImportanceClass::Low, ImportanceClass::High]).unwrap();
    let w = inverse_frequency_weights(&[&a]);
    // Frequencies 3/4 and 1/4: inverse 4/3 and 4, mean over present classes 8/3.
    assert!((w[0] - 0.5).abs() < 1e-12);
    assert_eq!(w[1], 0.0);
    assert!((w[2] - 1.5).abs() < 1e-12);
}

#[test]
fn training_edge_cases() {
    let data = common::saliency_dataset(3, 3, 4, 5);
    let zero = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let (w, log) = train(&data, &zero).unwrap();
    assert!(log.is_empty());
    let mut init = ModelWeights::init(3, zero.seed).unwrap();
    init.dropout = zero.dropout;
    assert_eq!(w, init);

    let short = TrainConfig { epochs: 2, iterations_per_epoch: 15, ..TrainConfig::default() };
    let (a, la) = train(&data, &short).unwrap();
    let (b, lb) = train(&data, &short).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.len(), 2);
    assert_eq!(la[1].iteration, 30);
    let other = train(&data, &TrainConfig { seed: 1, ..short.clone() }).unwrap().0;
    assert_ne!(a, other);

    assert!(matches!(train(&[], &short), Err(Error::Empty(_))));
    let bad = TrainConfig { learning_rate: 0.0, ..short.clone() };
    assert!(matches!(train(&data, &bad), Err(Error::InvalidConfig(_))));
    let mut mixed = data.clone();
    mixed.push((random_stack(1, 4, 5, 2), random_targets(1, 4, 5)));
    assert!(matches!(train(&mixed, &short), Err(Error::ChannelMismatch { .. })));
}

#[test]
fn biased_head_predicts_high_everywhere() {
    let mut w = ModelWeights::init(3, 0).unwrap();
    w.params.head.bias = vec![0.0, 0.0, 1e3];
    assert!(predict_map(&w, &random_stack(0, 4, 4, 3)).unwrap().cells().iter().all(|&v| v == 255));
    // Zero head: every class ties, the lowest wins.
    w.params.head.weight.iter_mut().for_each(|v| *v = 0.0);
    w.params.head.bias = vec![0.0; 3];
    assert!(predict_map(&w, &random_stack(0, 4, 4, 3)).unwrap().cells().iter().all(|&v| v == 0));
}

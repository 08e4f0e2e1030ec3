mod common;

use belmil::data::{make_splits, synth_generate, FeatureBag, SynthConfig};
use belmil::encoder::{forward, EncoderConfig, ModelParams};
use belmil::train::optim::{lookahead_step, radam_step, OptimizerState};
use belmil::train::{compute_gradients, cross_validate, train_fold, TrainConfig, TrainSession};
use common::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64) -> belmil::data::Dataset {
    let config = SynthConfig {
        bags_per_class: 12,
        n_range: (8, 20),
        feature_width: 8,
        ..SynthConfig::default()
    };
    synth_generate(&config, seed).unwrap().dataset
}

fn tiny_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        seed,
        encoder: EncoderConfig {
            landmarks: 8,
            ..EncoderConfig::tiny(8, 3)
        },
        ..TrainConfig::default()
    }
}

/// Every fourth bag for validation, the rest for training.
fn halves(dataset: &belmil::data::Dataset) -> (Vec<&FeatureBag>, Vec<&FeatureBag>) {
    let pick = |keep: fn(usize) -> bool| dataset.bags.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, b)| b).collect();
    (pick(|i| i % 4 != 0), pick(|i| i % 4 == 0))
}

#[test]
fn identical_seeds_give_identical_reports() {
    let dataset = small_dataset(1);
    let (train, val) = halves(&dataset);
    let config = tiny_train_config(3, 9);
    let a = train_fold(&train, &val, &config).unwrap();
    let b = train_fold(&train, &val, &config).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.last, b.last);
    assert_eq!(a.report.epochs.len(), 3);

    let c = train_fold(&train, &val, &tiny_train_config(3, 10)).unwrap();
    assert_ne!(a.last.params, c.last.params);
}

#[test]
fn training_loss_halves_within_twenty_epochs() {
    let synth = synth_generate(&SynthConfig::default(), 7).unwrap();
    let bags: Vec<&FeatureBag> = synth.dataset.bags.iter().collect();
    let config = TrainConfig {
        learning_rate: 3e-4,
        epochs: 20,
        seed: 7,
        encoder: EncoderConfig {
            model_width: 64,
            ffn_width: 64,
            heads: 4,
            landmarks: 16,
            ..EncoderConfig::tiny(32, 3)
        },
        ..TrainConfig::default()
    };
    let mut session = TrainSession::new(config).unwrap();
    let losses: Vec<f64> = (0..20).map(|_| session.train_epoch(&bags).unwrap().total()).collect();
    println!("epoch losses: {losses:.3?}");
    assert!(losses[19] < 0.5 * losses[0], "epoch 1 {:.3}, epoch 20 {:.3}", losses[0], losses[19]);
}

#[test]
fn disabling_bel_reduces_to_cross_entropy_training() {
    let dataset = small_dataset(2);
    let (train, val) = halves(&dataset);
    let config = TrainConfig {
        use_bel: false,
        ..tiny_train_config(3, 4)
    };
    let fold = train_fold(&train, &val, &config).unwrap();
    assert!(fold.report.epochs.iter().all(|e| e.bel == 0.0));

    // The same loop written out with cross-entropy gradients only.
    let mut params = ModelParams::init(&config.encoder, &mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut optimizer = OptimizerState::new(&params.tensors());
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            let bag = train[i];
            let step = compute_gradients(
                &params,
                &bag.features_f64(),
                bag.label,
                None,
                &config.loss,
                &config.encoder,
                Some(&mut rng),
            )
            .unwrap();
            let mut tensors = params.tensors_mut();
            radam_step(
                &mut optimizer.radam,
                &mut tensors,
                &step.grads,
                config.learning_rate,
                config.weight_decay,
                &config.radam,
            );
            lookahead_step(&mut optimizer.lookahead, &mut tensors, &config.lookahead);
        }
    }
    assert_eq!(fold.last.params, params);
    assert_eq!(fold.last.optimizer, optimizer);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dataset = small_dataset(3);
    let bags: Vec<&FeatureBag> = dataset.bags.iter().collect();
    let config = tiny_train_config(3, 5);

    let mut straight = TrainSession::new(config.clone()).unwrap();
    for _ in 0..3 {
        straight.train_epoch(&bags).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    let mut first = TrainSession::new(config).unwrap();
    first.train_epoch(&bags).unwrap();
    first.save_state(&path).unwrap();
    drop(first);
    let mut resumed = TrainSession::load_state(&path).unwrap();
    for _ in 0..2 {
        resumed.train_epoch(&bags).unwrap();
    }
    assert_eq!(resumed, straight);
}

#[test]
fn fresh_models_are_not_confident() {
    let config = EncoderConfig::default();
    let features = gaussian(50, config.input_width, 800);
    let mut extremes = (1.0f64, 0.0f64);
    for seed in 0..100 {
        let params = ModelParams::init(&config, &mut rng(seed));
        let out = forward(&features, &params, &config, None).unwrap();
        for p in out.probs {
            extremes = (extremes.0.min(p), extremes.1.max(p));
        }
    }
    assert!(
        extremes.0 > 0.05 && extremes.1 < 0.95,
        "probabilities spanned {extremes:?}"
    );
}

#[test]
fn cross_validation_reports_every_fold() {
    let dataset = small_dataset(4);
    let config = tiny_train_config(2, 6);
    for folds in [5, 1] {
        let splits = make_splits(&dataset.manifest, 0.2, folds, 6).unwrap();
        let run = cross_validate(&dataset, &splits, &config).unwrap();
        assert_eq!(run.folds.len(), folds);
        assert_eq!(run.summary.folds, folds);
        for fold in &run.folds {
            assert_eq!(fold.result.report.epochs.len(), 2);
            assert_eq!(fold.test_predictions.predictions.len(), splits.test_ids.len());
        }
        let accs: Vec<f64> = run.folds.iter().map(|f| f.test_metrics.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / folds as f64;
        assert!((run.summary.accuracy.mean - mean).abs() < 1e-12);
        if folds == 1 {
            assert_eq!(run.summary.accuracy.std, 0.0);
        }
    }
}

#[test]
fn mismatched_encoder_is_rejected() {
    let dataset = small_dataset(5);
    let splits = make_splits(&dataset.manifest, 0.2, 2, 0).unwrap();
    let mut config = tiny_train_config(1, 0);
    config.encoder.input_width = 9;
    assert!(cross_validate(&dataset, &splits, &config).is_err());
}

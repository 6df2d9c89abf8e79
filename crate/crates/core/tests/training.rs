mod common;

use udakit::adversarial::{adda_discriminator_gradients, train_adda, train_dann, train_mdan};
use udakit::nn::{sgd_step, OptimizerState};
use udakit::data::concat_domains;
use udakit::metrics::accuracy_of;
use udakit::moment::train_m3sda;
use udakit::train::{train_erm, ModelFile};
use udakit::TrainConfig;

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 0.01,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn erm_fits_separable_blobs() {
    let data = common::two_blobs("s", 3.0, 0.0, &[0.5, 0.5], 200, 1);
    let out = train_erm(&data, &cfg(200, 0)).unwrap();
    assert!(common::target_accuracy(&out.model, &data) >= 0.99);
}

#[test]
fn training_is_deterministic_for_every_method() {
    let s1 = common::two_blobs("a", 2.0, 0.0, &[0.5, 0.5], 60, 1);
    let s2 = common::two_blobs("b", 2.0, 0.5, &[0.6, 0.4], 60, 2);
    let t = common::two_blobs("t", 2.0, 1.0, &[0.5, 0.5], 60, 3);
    let mut c = cfg(4, 7);
    c.adversarial.adda_stage2_epochs = 3;
    let runs = || {
        vec![
            train_erm(&s1, &c).unwrap(),
            train_dann(&s1, t.unlabeled(), &c).unwrap(),
            train_adda(&s1, t.unlabeled(), &c).unwrap(),
            train_mdan(&[&s1, &s2], t.unlabeled(), &c).unwrap(),
            train_m3sda(&[&s1, &s2], t.unlabeled(), &c).unwrap(),
        ]
    };
    for (a, b) in runs().into_iter().zip(runs()) {
        assert_eq!(a.model, b.model);
        assert_eq!(a.record, b.record);
    }
}

#[test]
fn adaptation_without_shift_does_no_harm() {
    let (mut erm, mut dann) = (0.0, 0.0);
    for seed in 0..3 {
        let source = common::two_blobs("s", 1.5, 0.0, &[0.5, 0.5], 400, 10 + seed);
        let target = common::two_blobs("t", 1.5, 0.0, &[0.5, 0.5], 400, 20 + seed);
        let c = cfg(40, seed);
        erm += common::target_accuracy(&train_erm(&source, &c).unwrap().model, &target) / 3.0;
        dann += common::target_accuracy(&train_dann(&source, target.unlabeled(), &c).unwrap().model, &target) / 3.0;
    }
    assert!((erm - dann).abs() <= 0.02, "erm {erm} vs dann {dann}");
}

#[test]
fn discriminator_cannot_separate_identical_features() {
    let data = common::two_blobs("s", 2.0, 0.0, &[0.5, 0.5], 128, 4);
    let c = cfg(1, 3);
    let extractor = train_erm(&data, &c).unwrap().model.extractor;
    let features = extractor.apply(data.features.view()).unwrap();
    let mut r = common::rng(9);
    let mut disc = common::random_mlp(&mut r, &[c.feature_dim(), 16, 1]);
    let mut opt = OptimizerState::new("discriminator", &disc, 0.01, 0.9).unwrap();
    let mut accuracy = 0.0;
    for _ in 0..200 {
        let g = adda_discriminator_gradients(&disc, &features, &features).unwrap();
        accuracy = g.discriminator_accuracy;
        sgd_step(&mut disc, &g.discriminator, &mut opt).unwrap();
    }
    assert!((accuracy - 0.5).abs() <= 0.05, "accuracy {accuracy}");
}

#[test]
fn matched_sources_have_vanishing_moment_terms() {
    let a = common::two_blobs("a", 2.0, 0.0, &[0.5, 0.5], 300, 1);
    let b = common::two_blobs("b", 2.0, 0.0, &[0.5, 0.5], 300, 2);
    let t = common::two_blobs("t", 2.0, 0.0, &[0.5, 0.5], 300, 3);
    let out = train_m3sda(&[&a, &b], t.unlabeled(), &cfg(30, 0)).unwrap();
    let pairs = &out.record.moment_pairs;
    let between = pairs.iter().position(|p| p == "a~b").expect("source pair traced");
    for log in out.record.epochs.iter().skip(5) {
        assert!(log.moment_terms[between] <= 0.1, "epoch {}: {}", log.epoch, log.moment_terms[between]);
    }
}

#[test]
fn strong_alignment_keeps_source_moments_falling() {
    let a = common::two_blobs("a", 2.0, 0.0, &[0.5, 0.5], 200, 5);
    let b = common::two_blobs("b", 2.0, 0.0, &[0.5, 0.5], 200, 6);
    let t = common::two_blobs("t", 2.0, 0.0, &[0.5, 0.5], 200, 7);
    let mut c = cfg(40, 1);
    c.moment.eta = 10.0;
    c.learning_rate = 1e-3;
    let out = train_m3sda(&[&a, &b], t.unlabeled(), &c).unwrap();
    let between = out.record.moment_pairs.iter().position(|p| p == "a~b").unwrap();
    let trace: Vec<f64> = out.record.epochs.iter().map(|e| e.moment_terms[between]).collect();
    let half = &trace[trace.len() / 2..];
    for w in half.windows(2) {
        assert!(w[1] <= w[0] * 1.05 + 1e-12, "moment term rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn combined_source_training_sees_every_source() {
    let a = common::two_blobs("a", 2.0, 0.0, &[1.0, 0.0], 100, 1);
    let b = common::two_blobs("b", 2.0, 0.0, &[0.0, 1.0], 100, 2);
    let combined = concat_domains(&[&a, &b]).unwrap();
    let out = train_erm(&combined, &cfg(40, 0)).unwrap();
    let pred = out.model.predict(combined.features.view()).unwrap();
    assert!(accuracy_of(&combined.labels, &pred.labels) > 0.9);
}

#[test]
fn class_balanced_batches_lift_the_minority_class() {
    let source = common::two_blobs("s", 1.0, 0.0, &[0.9, 0.1], 500, 1);
    let c = cfg(30, 0);
    let minority_rate = |resample: bool| {
        let out = train_erm(&source, &TrainConfig { resample, ..c.clone() }).unwrap();
        let pred = out.model.predict(source.features.view()).unwrap();
        pred.labels.iter().filter(|&&l| l == 1).count()
    };
    assert!(minority_rate(true) > minority_rate(false));
}

#[test]
fn model_files_round_trip_exactly() {
    let data = common::two_blobs("s", 2.0, 0.0, &[0.5, 0.5], 80, 1);
    let t = common::two_blobs("t", 2.0, 1.0, &[0.5, 0.5], 80, 2);
    let c = cfg(3, 5);
    let out = train_m3sda(&[&data, &t], t.unlabeled(), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let file = ModelFile {
        scheme: "m3sda".into(),
        seed: c.seed,
        config: c.clone(),
        model: out.model.clone(),
    };
    file.save(&path).unwrap();
    let loaded = ModelFile::load(&path).unwrap();
    assert_eq!(loaded, file);
    let a = out.model.predict(t.features.view()).unwrap();
    let b = loaded.model.predict(t.features.view()).unwrap();
    assert_eq!(a.scores, b.scores);
}

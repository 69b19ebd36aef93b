use rand::seq::SliceRandom;
use vlpert_core::data::generate_corpus;
use vlpert_core::losses::global_contrastive_loss;
use vlpert_core::perturbation::TextPipeline;
use vlpert_core::rng::{derive_path, rng_from};
use vlpert_core::train::{sgd_step, sgd_update, train, Trainer};
use vlpert_core::{CheckpointState, DualEncoder, Error, Image, MetricsRow, SyntheticPair, TrainConfig};

fn small_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig { epochs, batch_size: 16, lr: 0.01, ..TrainConfig::default() };
    cfg.seeds.data = 5;
    cfg.seeds.init = 6;
    cfg.seeds.perturbation = 7;
    cfg
}

fn corpus() -> Vec<SyntheticPair> {
    generate_corpus(40, 32, 123).unwrap()
}

#[test]
fn sgd_examples() {
    let mut p = [1.0];
    let mut buf = [0.0];
    sgd_update(&mut p, &[2.0], &mut buf, 0.1, 0.0, 0.0).unwrap();
    assert!((p[0] - 0.8).abs() < 1e-15);

    let mut p = [0.7, -3.0];
    let mut buf = [0.0, 0.0];
    sgd_update(&mut p, &[0.0, 0.0], &mut buf, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(p, [0.7, -3.0]);

    let (lr, g) = (0.05, 1.5);
    let mut p = [2.0];
    let mut buf = [0.0];
    sgd_update(&mut p, &[g], &mut buf, lr, 0.9, 0.0).unwrap();
    assert!((p[0] - (2.0 - lr * g)).abs() < 1e-15);
    sgd_update(&mut p, &[g], &mut buf, lr, 0.9, 0.0).unwrap();
    assert!((p[0] - (2.0 - lr * g - lr * 1.9 * g)).abs() < 1e-15);

    let mut p = [1.0];
    let mut buf = [0.0];
    sgd_update(&mut p, &[0.0], &mut buf, 0.1, 0.0, 0.5).unwrap();
    assert!((p[0] - 0.95).abs() < 1e-15);

    assert!(sgd_update(&mut [1.0, 2.0], &[1.0], &mut [0.0, 0.0], 0.1, 0.9, 0.0).is_err());
}

#[test]
fn config_validation() {
    let data = corpus();
    assert!(TrainConfig::default().validate().is_ok());
    assert!(Trainer::new(TrainConfig { lr: 0.0, ..small_config(1) }, &data).is_err());
    assert!(Trainer::new(TrainConfig { batch_size: 0, ..small_config(1) }, &data).is_err());
    assert!(Trainer::new(TrainConfig { epochs: 0, ..small_config(1) }, &data).is_err());
    assert!(matches!(
        Trainer::new(TrainConfig { batch_size: 41, ..small_config(1) }, &data),
        Err(Error::Config(_))
    ));
    assert!(Trainer::new(small_config(1), &[]).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "nope": true}"#).is_err());
}

/// Global-loss-only training written against the public pieces.
fn global_only_run(cfg: &TrainConfig, data: &[SyntheticPair]) -> (Vec<f64>, DualEncoder) {
    let pipeline = TextPipeline::default();
    let mut model = DualEncoder::new(cfg.encoder_config(), pipeline.tokenizer.vocab().clone()).unwrap();
    let reports: Vec<_> = data.iter().map(|p| pipeline.process(&p.report).unwrap()).collect();
    let mut buffers: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(derive_path(cfg.seeds.data, &[epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            let bound = model.params.bind();
            let images: Vec<&Image> = batch.iter().map(|&i| &data[i].image).collect();
            let texts: Vec<_> = batch.iter().map(|&i| &reports[i]).collect();
            let e_i = model.encode_images(&bound, &images).unwrap().global;
            let e_t = model.encode_texts(&bound, &texts).unwrap().global;
            let loss = global_contrastive_loss(&e_i, &e_t, cfg.weights.tau).unwrap();
            loss.backward().unwrap();
            losses.push(loss.item());
            let grads = bound.grads();
            sgd_step(&mut model.params, &grads, &mut buffers, cfg.lr, cfg.momentum, cfg.weight_decay).unwrap();
        }
    }
    (losses, model)
}

#[test]
fn zero_weights_equal_global_only_training() {
    let data = corpus();
    let mut cfg = small_config(3);
    cfg.weights.alpha = 0.0;
    cfg.weights.beta = 0.0;
    let out = train(cfg.clone(), &data).unwrap();
    let (losses, model) = global_only_run(&cfg, &data);
    let totals: Vec<f64> = out.history.iter().map(|r| r.total).collect();
    assert_eq!(totals, losses);
    assert!(out.history.iter().all(|r| r.local == 0.0 && r.pert == 0.0 && r.total == r.global));
    assert_eq!(out.model.params, model.params);
    assert_eq!(out.state.perturbation_sets, 0);

    // computing the zero-weighted terms for monitoring leaves the run unchanged
    cfg.monitor_disabled_terms = true;
    let monitored = train(cfg, &data).unwrap();
    let totals: Vec<f64> = monitored.history.iter().map(|r| r.total).collect();
    assert_eq!(totals, losses);
    assert!(monitored.history.iter().all(|r| r.local > 0.0 && r.pert > 0.0));
    assert_eq!(monitored.model.params, model.params);
}

#[test]
fn beta_zero_draws_no_perturbations() {
    let data = corpus();
    let mut cfg = small_config(2);
    cfg.weights.beta = 0.0;
    let mut a = Trainer::new(cfg.clone(), &data).unwrap();
    a.run_epoch().unwrap();
    assert_eq!(a.perturbation_sets(), 0);

    // the perturbation seed is irrelevant when beta = 0
    cfg.seeds.perturbation = 999;
    let mut b = Trainer::new(cfg, &data).unwrap();
    b.run_epoch().unwrap();
    assert_eq!(a.model.params, b.model.params);

    let mut c = Trainer::new(small_config(1), &data).unwrap();
    c.run_epoch().unwrap();
    assert_eq!(c.perturbation_sets(), data.len());
}

fn streams_equal(a: &[MetricsRow], b: &[MetricsRow]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.epoch == y.epoch
                && x.step == y.step
                && x.global.to_bits() == y.global.to_bits()
                && x.local.to_bits() == y.local.to_bits()
                && x.pert.to_bits() == y.pert.to_bits()
                && x.total.to_bits() == y.total.to_bits()
        })
}

#[test]
fn runs_are_bit_deterministic() {
    let data = corpus();
    let a = train(small_config(3), &data).unwrap();
    let b = train(small_config(3), &data).unwrap();
    assert!(streams_equal(&a.history, &b.history));
    assert_eq!(a.state, b.state);
    assert_eq!(a.history.len(), 3 * 3);
    assert_eq!(a.history.last().unwrap().step, 9);

    let mut other = small_config(3);
    other.seeds.perturbation += 1;
    let c = train(other, &data).unwrap();
    assert!(!streams_equal(&a.history, &c.history));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = corpus();
    let full = train(small_config(4), &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut first = Trainer::new(small_config(4), &data).unwrap();
    let mut history = first.run_epoch().unwrap();
    history.extend(first.run_epoch().unwrap());
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let state = CheckpointState::load(&path).unwrap();
    assert_eq!(state.epoch, 2);
    let mut resumed = Trainer::resume(state, &data).unwrap();
    while !resumed.finished() {
        history.extend(resumed.run_epoch().unwrap());
    }
    assert!(streams_equal(&history, &full.history));
    assert_eq!(resumed.checkpoint(), full.state);
}

#[test]
fn checkpoint_cadence() {
    let data = corpus();
    let mut cfg = small_config(5);
    cfg.checkpoint_every = 2;
    let mut t = Trainer::new(cfg, &data).unwrap();
    let mut due = Vec::new();
    while !t.finished() {
        t.run_epoch().unwrap();
        due.push(t.checkpoint_due());
    }
    assert_eq!(due, [false, true, false, true, true]);
}

#[test]
fn non_finite_input_names_the_component() {
    let mut data = corpus();
    data[3].image.set(0, 0, 0, f64::NAN);
    match train(small_config(1), &data) {
        Err(Error::NonFiniteLoss { component, epoch, .. }) => {
            assert_eq!(component, "global");
            assert_eq!(epoch, 1);
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.err()),
    }
}

#[test]
fn exploding_learning_rate_aborts() {
    let data = corpus();
    let cfg = TrainConfig { lr: 1e12, momentum: 0.0, ..small_config(5) };
    match train(cfg, &data) {
        Err(Error::NonFiniteLoss { component, .. }) => {
            assert!(["global", "local", "pert", "total", "gradient"].contains(&component));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => {}
    }
}

#[test]
fn detached_negatives_change_the_update() {
    let data = corpus();
    let a = train(small_config(1), &data).unwrap();
    let b = train(TrainConfig { detach_negatives: true, ..small_config(1) }, &data).unwrap();
    assert_eq!(a.history[0].total, b.history[0].total);
    assert_ne!(a.model.params, b.model.params);
}

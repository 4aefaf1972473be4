use cytopair::checkpoint::Checkpoint;
use cytopair::config::ExperimentConfig;
use cytopair::data::ParticleSample;
use cytopair::encoders::{DualEncoder, EncoderConfig, ProfileEncoderKind};
use cytopair::losses::LossKind;
use cytopair::nn::{DType, Tensor};
use cytopair::synthetic::{default_classes, generate_samples, GeneratorOptions};
use cytopair::training::{
    dataset_loss, eval_tensors, lr_at, train, EarlyStopping, Sgd, StopDecision, StopReason,
    TrainConfig,
};

fn data(per_class: usize, seed: u64) -> (Vec<ParticleSample>, Vec<ParticleSample>) {
    let all = generate_samples(
        &default_classes(),
        per_class,
        seed,
        &GeneratorOptions::default(),
    )
    .unwrap();
    let (train, val): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 4 != 0);
    (
        train.into_iter().map(|(_, s)| s).collect(),
        val.into_iter().map(|(_, s)| s).collect(),
    )
}

fn tiny(loss: LossKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        loss,
        max_epochs: epochs,
        warmup_epochs: 1,
        batch_size: 16,
        encoder: EncoderConfig::default().scaled(8),
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert!((lr_at(0, &cfg).unwrap() - 0.001).abs() < 1e-15);
    assert!((lr_at(4, &cfg).unwrap() - 0.005).abs() < 1e-15);
    let last = 0.005 * 0.5 * (1.0 + (94.0 * std::f64::consts::PI / 95.0).cos());
    assert!((lr_at(99, &cfg).unwrap() - last).abs() < 1e-18);
    assert!((last - 1.37e-6).abs() < 1e-8);
    assert!(lr_at(100, &cfg).is_err());
    let sig = TrainConfig {
        loss: LossKind::Sigmoid,
        ..TrainConfig::default()
    };
    assert_eq!(sig.base_lr(), 0.002);
    for e in 5..99 {
        assert!(lr_at(e + 1, &cfg).unwrap() < lr_at(e, &cfg).unwrap());
    }
}

#[test]
fn early_stopping_counts_stale_epochs() {
    let mut s = EarlyStopping::new(30);
    for e in 0..100 {
        assert_eq!(s.update(e, 10.0 - e as f64 * 0.01), StopDecision::Improved);
    }
    let mut s = EarlyStopping::new(30);
    assert_eq!(s.update(0, 1.0), StopDecision::Improved);
    for e in 1..30 {
        assert_eq!(s.update(e, 1.0), StopDecision::Continue, "epoch {e}");
    }
    assert_eq!(s.update(30, 1.5), StopDecision::Stop);
    assert_eq!(s.best_epoch(), Some(0));
}

#[test]
fn decay_skips_temperature_and_bias() {
    let model = DualEncoder::<f64>::new(&EncoderConfig::default().scaled(8), 0).unwrap();
    let zero_grads: Vec<_> = model
        .store
        .ids()
        .map(|id| {
            let shape = model.store.get(id).shape().to_vec();
            (id, Tensor::zeros(&shape))
        })
        .collect();
    let run = |wd: f64| {
        let mut store = model.store.clone();
        let mut opt = Sgd::new(0.9, wd);
        for _ in 0..5 {
            opt.step(&mut store, &zero_grads, 0.1);
        }
        store
    };
    let (with, without) = (run(0.001), run(0.0));
    for id in [model.log_tau, model.bias] {
        assert_eq!(with.get(id), without.get(id));
        assert_eq!(with.get(id), model.store.get(id));
    }
    let head = model.store.id("image_head.weight").unwrap();
    assert_ne!(with.get(head), without.get(head));
    assert_eq!(without.get(head), model.store.get(head));
}

#[test]
fn f64_runs_are_bit_identical_and_report_is_consistent() {
    let (tr, va) = data(6, 1);
    let cfg = TrainConfig {
        dtype: DType::F64,
        ..tiny(LossKind::Infonce, 3)
    };
    let (a, ra) = train::<f64>(&tr, &va, &cfg).unwrap();
    let (b, rb) = train::<f64>(&tr, &va, &cfg).unwrap();
    assert_eq!(ra, rb);
    for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
        assert_eq!(x.name, y.name);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.value), bits(&y.value), "{}", x.name);
    }
    assert_eq!(ra.epochs.len(), 3);
    assert_eq!(ra.stop_reason, StopReason::MaxEpochs);
    for e in &ra.epochs {
        assert_eq!(e.lr, lr_at(e.epoch, &cfg).unwrap());
    }
    let min = ra
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(ra.best_val_loss, min);
}

#[test]
fn checkpoint_reproduces_validation_loss() {
    let (tr, va) = data(6, 2);
    let mut config = ExperimentConfig::default();
    config.train = tiny(LossKind::Sigmoid, 2);
    let (model, report) = train::<f32>(&tr, &va, &config.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&model, &config, report.best_val_loss, report.best_epoch)
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.epoch, report.best_epoch);
    let restored = loaded.model::<f32>().unwrap();
    let (vi, vp) = eval_tensors(&va, &config.train.augment).unwrap();
    let loss = dataset_loss(
        &restored,
        &vi,
        &vp,
        config.train.batch_size,
        LossKind::Sigmoid,
    )
    .unwrap();
    assert!(
        (loss - report.best_val_loss).abs() < 1e-9,
        "{loss} vs {}",
        report.best_val_loss
    );
}

#[test]
fn invalid_inputs_are_rejected() {
    let (tr, va) = data(2, 3);
    let cfg = tiny(LossKind::Infonce, 1);
    assert!(train::<f32>(&[], &va, &cfg).is_err());
    assert!(train::<f32>(&tr, &[], &cfg).is_err());
    let bad = TrainConfig {
        lr: Some(-1.0),
        ..cfg.clone()
    };
    assert!(train::<f32>(&tr, &va, &bad).is_err());
    let bad = TrainConfig {
        warmup_epochs: 5,
        ..cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn training_reduces_loss_for_every_encoder_and_loss() {
    let (tr, va) = data(16, 4);
    for profile in [
        ProfileEncoderKind::Conv1d,
        ProfileEncoderKind::Bilstm,
        ProfileEncoderKind::Transformer1d,
    ] {
        for loss in [LossKind::Infonce, LossKind::Sigmoid] {
            let mut cfg = tiny(loss, 10);
            cfg.encoder = EncoderConfig {
                profile,
                ..EncoderConfig::default()
            }
            .scaled(4);
            let (_, report) = train::<f32>(&tr, &va, &cfg).unwrap();
            let (first, last) = (report.epochs[0].train_loss, report.epochs[9].train_loss);
            assert!(last < first, "{profile}/{loss}: {first} -> {last}");
        }
    }
}

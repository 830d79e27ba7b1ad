use woodnet::models::{badnet_spec, default_class_names};
use woodnet::synthetic::{stripe_dataset, StripeTask};
use woodnet::train::Trainer;
use woodnet::*;

fn bits(net: &Network) -> Vec<Vec<u32>> {
    net.params()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn woodnet_forward_on_zeros() {
    let mut net = build_woodnet(4, 0.5, 0).unwrap();
    let logits = net.forward(&Tensor::zeros(&[1, 3, 224, 224]), Mode::Eval).unwrap();
    assert_eq!(logits.shape(), &[1, 4]);
    assert!(logits.all_finite());
}

#[test]
fn woodnet_batches_and_eval_is_deterministic() {
    let mut net = WoodNetConfig::mini(4, 0.5).build::<f32>(8).unwrap();
    let data = stripe_dataset(StripeTask::A, 2, 32, 1);
    let mut x = Vec::new();
    for i in 0..8 {
        data.write_sample(i, &mut x);
    }
    let x = Tensor::from_vec(vec![8, 3, 32, 32], x).unwrap();
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.shape(), &[8, 4]);
    assert_eq!(a, b);
}

#[test]
fn badnet_parameter_count() {
    let net = build_badnet(4, 0).unwrap();
    assert_eq!(net.num_params(), 150528 * 256 + 256 + 256 * 4 + 4);
    let small = Network::<f32>::from_spec(&badnet_spec(32, 64, default_class_names(4)).unwrap()).unwrap();
    assert_eq!(small.num_params(), 3072 * 64 + 64 + 64 * 4 + 4);
}

#[test]
fn fine_tuning_only_moves_the_head() {
    let donor = WoodNetConfig::mini(4, 0.5).build::<f32>(3).unwrap();
    let before = bits(&donor);
    let adapted = adapt_for_transfer(donor, default_class_names(4), 4).unwrap();
    assert_eq!(adapted.trainable_layer_count(), 1);
    let head_before = bits(&adapted).pop().unwrap();

    let data = stripe_dataset(StripeTask::B, 4, 32, 5);
    let config = TrainConfig {
        batch_size: 4,
        seed: 6,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(adapted, config).unwrap();
    // 16 samples at batch 4 is four steps per epoch
    for epoch in 0..25 {
        trainer.train_epoch(epoch, &data).unwrap();
    }
    let after = bits(trainer.network());
    let n = after.len();
    assert_eq!(after[..n - 2], before[..n - 2]);
    assert_ne!(after[n - 1], head_before);
}

#[test]
fn identical_config_gives_identical_checkpoints() {
    let data = stripe_dataset(StripeTask::A, 2, 32, 9);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 7,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let net = WoodNetConfig::mini(4, 0.5).build(7).unwrap();
        let mut log = Vec::new();
        let out = run_training(net, &data, &data, &config, &mut log).unwrap();
        let ckpt = std::fs::read(dir.path().join("final.ckpt")).unwrap();
        let csv = std::fs::read(dir.path().join("stats.csv")).unwrap();
        (out.history, ckpt, csv, log)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

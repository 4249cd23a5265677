use abfpe::data::{generate_synthetic, load_manifest, AugmentationConfig, ManifestOptions, SynthConfig};
use abfpe::network::{load_checkpoint, read_checkpoint_meta, ModelConfig};
use abfpe::training::{train, TrainConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        anchor_count: 8,
        neck_channels: 16,
        ..Default::default()
    }
}

fn small_run() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 5,
        checkpoint_every: 1,
        ..Default::default()
    }
}

#[test]
fn two_epochs_log_four_iterations_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        count: 10,
        ..Default::default()
    };
    let manifest_path = generate_synthetic(&synth, &dir.path().join("data")).unwrap();
    let manifest = load_manifest(&manifest_path, ManifestOptions::strict()).unwrap();
    let cfg = small_run();
    let out = dir.path().join("run");
    let outcome = train(&cfg, &small_model(), &AugmentationConfig::default(), &manifest, &out, 11).unwrap();

    assert_eq!(outcome.iterations.len(), 4);
    let schedule = cfg.schedule(4).unwrap();
    assert_eq!(schedule.restart_iteration(), Some(1));
    for (i, it) in outcome.iterations.iter().enumerate() {
        assert_eq!(it.iteration, i);
        assert_eq!(it.lr, schedule.lr(i).unwrap());
        assert!(it.loss.is_finite() && it.loss > 0.0);
    }
    assert_eq!(outcome.iterations[0].lr, 1e-2);
    assert_eq!(outcome.iterations[1].lr, 6.5e-3);
    let expected = 6.5e-3 * (1.0f64 - 2.0 / 3.0).powf(0.9);
    assert!((outcome.iterations[3].lr - expected).abs() < 1e-15);

    let log = std::fs::read_to_string(&outcome.log_path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,iteration,lr,mean_loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,4,"));
    assert_eq!(outcome.epochs.len(), 2);
    let mean1 = (outcome.iterations[0].loss + outcome.iterations[1].loss) / 2.0;
    assert!((outcome.epochs[0].mean_loss - mean1).abs() < 1e-12);

    assert!(out.join("epoch_001.ckpt").exists());
    assert!(!out.join("epoch_002.ckpt").exists());
    let meta = read_checkpoint_meta(&outcome.checkpoint).unwrap();
    assert_eq!(meta.seed, Some(11));
    let (_, loaded_cfg) = load_checkpoint::<f32>(&outcome.checkpoint).unwrap();
    assert_eq!(loaded_cfg, small_model());
}

#[test]
fn training_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        count: 6,
        seed: 3,
        ..Default::default()
    };
    let manifest_path = generate_synthetic(&synth, &dir.path().join("data")).unwrap();
    let manifest = load_manifest(&manifest_path, ManifestOptions::strict()).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        ..small_run()
    };
    let aug = AugmentationConfig::default();
    let a = train(&cfg, &small_model(), &aug, &manifest, &dir.path().join("a"), 5).unwrap();
    let b = train(&cfg, &small_model(), &aug, &manifest, &dir.path().join("b"), 5).unwrap();
    let c = train(&cfg, &small_model(), &aug, &manifest, &dir.path().join("c"), 6).unwrap();
    assert_eq!(a.iterations, b.iterations);
    assert_ne!(a.iterations, c.iterations);
    assert_eq!(
        std::fs::read(&a.checkpoint).unwrap(),
        std::fs::read(&b.checkpoint).unwrap()
    );
}

#[test]
fn training_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = generate_synthetic(
        &SynthConfig {
            count: 2,
            ..Default::default()
        },
        &dir.path().join("data"),
    )
    .unwrap();
    let mut manifest = load_manifest(&manifest_path, ManifestOptions::strict()).unwrap();
    let aug = AugmentationConfig::default();

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(train(&small_run(), &small_model(), &aug, &manifest, &blocker.join("out"), 0).is_err());

    let zero = TrainConfig {
        epochs: 0,
        ..small_run()
    };
    assert!(train(&zero, &small_model(), &aug, &manifest, &dir.path().join("z"), 0).is_err());

    manifest.records.clear();
    assert!(train(&small_run(), &small_model(), &aug, &manifest, &dir.path().join("e"), 0).is_err());
}

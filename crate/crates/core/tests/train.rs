use lfdepth::io::DatasetEntry;
use lfdepth::lf::{synth_scene, LightField, SceneConfig, SceneLayout};
use lfdepth::losses::{photometric_loss_unconstrained, LossConfig};
use lfdepth::model::{Checkpoint, ColorMode};
use lfdepth::train::{
    checkpoint_name, read_log, sample_patch, train_loop, TrainConfig, Trainer, FINAL_CHECKPOINT,
};
use ndarray::Array5;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        patch_size: 16,
        angular: (5, 5),
        batch: 2,
        iterations: 10,
        seed: 3,
        checkpoint_interval: 5,
        scale_features: [4, 6, 8, 8],
        ..TrainConfig::default()
    }
}

fn dataset(n: usize) -> Vec<DatasetEntry> {
    (0..n)
        .map(|i| {
            let cfg = SceneConfig {
                height: 32,
                width: 32,
                angular: (5, 5),
                layout: SceneLayout::random_occluder(32, 32, 1.0, i as u64),
                max_disparity: 1.0,
                ..SceneConfig::default()
            };
            DatasetEntry::from_synthetic(synth_scene(&cfg, i as u64).unwrap(), format!("s{i}"))
        })
        .collect()
}

#[test]
fn patch_has_requested_extent() {
    let lf = LightField::new(Array5::from_elem((9, 9, 256, 256, 1), 0.5)).unwrap();
    let entry = DatasetEntry::new(lf, None, "big", lfdepth::io::SourceLayout::Synthetic).unwrap();
    let cfg = TrainConfig::default();
    let patch = sample_patch(&entry, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(patch.angular(), (7, 7));
    assert_eq!(patch.spatial(), (128, 128));
}

#[test]
fn patch_sampling_is_deterministic_and_checks_size() {
    let data = dataset(1);
    let cfg = tiny_config();
    let a = sample_patch(&data[0], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_patch(&data[0], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    let big = TrainConfig { patch_size: 40, ..cfg };
    assert!(sample_patch(&data[0], &big, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { patch_size: 12, ..tiny_config() },
        TrainConfig { batch: 0, ..tiny_config() },
        TrainConfig {
            adam: lfdepth::train::AdamConfig { lr: 0.0, ..Default::default() },
            ..tiny_config()
        },
    ] {
        assert!(Trainer::new(cfg).is_err());
    }
}

#[test]
fn repeated_batch_loss_decreases() {
    let cfg = SceneConfig {
        height: 16,
        width: 16,
        angular: (5, 5),
        layout: SceneLayout::Plane { disparity: 0.6 },
        max_disparity: 1.0,
        ..SceneConfig::default()
    };
    let batch = vec![synth_scene(&cfg, 1).unwrap().lf, synth_scene(&cfg, 2).unwrap().lf];
    let mut trainer = Trainer::new(tiny_config()).unwrap();
    let first = trainer.step(&batch).unwrap().total;
    let mut last = first;
    for _ in 1..100 {
        last = trainer.step(&batch).unwrap().total;
    }
    assert!(last < first, "{first} -> {last}");
    assert_eq!(trainer.iteration, 100);
}

#[test]
fn no_smooth_reports_zero_smoothness() {
    let data = dataset(2);
    let mut trainer = Trainer::new(TrainConfig { smoothness: false, ..tiny_config() }).unwrap();
    let batch = trainer.sample_batch(&data).unwrap();
    let b = trainer.step(&batch).unwrap();
    assert_eq!(b.sm, vec![0.0; 3]);
    let mut with = Trainer::new(tiny_config()).unwrap();
    let batch = with.sample_batch(&data).unwrap();
    assert!(with.step(&batch).unwrap().sm.iter().all(|&s| s > 0.0));
}

#[test]
fn same_seed_same_trajectory() {
    let data = dataset(3);
    let run = || {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let losses: Vec<f64> = (0..5)
            .map(|_| {
                let b = t.sample_batch(&data).unwrap();
                t.step(&b).unwrap().total
            })
            .collect();
        (losses, t.checkpoint().unwrap().to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn loop_writes_checkpoints_and_resumes_identically() {
    let data = dataset(3);
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let outcome = train_loop(&data, &tiny_config(), &full, false).unwrap();
    assert!(full.join(checkpoint_name(5)).exists());
    assert!(full.join(checkpoint_name(10)).exists());
    assert_eq!(outcome.checkpoint, full.join(FINAL_CHECKPOINT));
    let full_log = read_log(&outcome.log).unwrap();
    assert_eq!(full_log.iter().map(|r| r.iteration).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());

    let split = dir.path().join("split");
    train_loop(&data, &TrainConfig { iterations: 5, ..tiny_config() }, &split, false).unwrap();
    let ck5 = Checkpoint::load(&split.join(checkpoint_name(5))).unwrap();
    let resumed = Trainer::from_checkpoint(&ck5, Some(&tiny_config())).unwrap();
    assert_eq!(resumed.iteration, 5);
    let outcome = train_loop(&data, &tiny_config(), &split, true).unwrap();
    let split_log = read_log(&outcome.log).unwrap();
    assert_eq!(split_log[5].iteration, 6);
    assert_eq!(split_log, full_log);
    assert_eq!(
        std::fs::read(full.join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(split.join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn occlusion_unaware_mode_optimizes_the_unconstrained_loss() {
    let data = dataset(2);
    let cfg = TrainConfig {
        occlusion_aware: false,
        smoothness: false,
        loss: LossConfig { scale_weights: vec![1.0], ..LossConfig::default() },
        ..tiny_config()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let batch = trainer.sample_batch(&data).unwrap();
    let before = trainer.network.clone();
    let b = trainer.step(&batch).unwrap();
    let expected: f64 = batch
        .iter()
        .map(|lf| {
            let out = lfdepth::model::predict_full(&before, lf).unwrap();
            photometric_loss_unconstrained(lf, out.finest().disparity.view()).unwrap()
        })
        .sum::<f64>()
        / batch.len() as f64;
    assert!((b.total - expected).abs() < 1e-12, "{} vs {expected}", b.total);
    assert!((b.c_rec[0] - expected).abs() < 1e-12);
}

#[test]
fn gray_mode_trains_on_color_data() {
    let data = dataset(1);
    let mut trainer = Trainer::new(TrainConfig { color_mode: ColorMode::Gray, ..tiny_config() }).unwrap();
    assert_eq!(trainer.network.config().in_channels(), 9);
    let batch = trainer.sample_batch(&data).unwrap();
    assert!(trainer.step(&batch).unwrap().total.is_finite());
}

#[test]
fn resume_rejects_a_different_config() {
    let trainer = Trainer::new(tiny_config()).unwrap();
    let ck = trainer.checkpoint().unwrap();
    let longer = TrainConfig { iterations: 50, checkpoint_interval: 7, ..tiny_config() };
    assert_eq!(Trainer::from_checkpoint(&ck, Some(&longer)).unwrap().cfg, longer);
    let other = TrainConfig {
        adam: lfdepth::train::AdamConfig { lr: 1e-3, ..Default::default() },
        ..tiny_config()
    };
    assert!(Trainer::from_checkpoint(&ck, Some(&other)).is_err());
}

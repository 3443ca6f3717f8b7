use std::fs;
use std::sync::OnceLock;

use nerfca::dataset::{AngiogramDataset, DatasetConfig};
use nerfca::geometry::ScannerConfig;
use nerfca::losses::Variant;
use nerfca::phantom::{BackgroundModel, PhantomConfig};
use nerfca::trainer::{
    checkpoint_name, load_checkpoint, run_training, save_checkpoint, ModelConfig, TrainConfig, TrainOptions, Trainer,
};
use nerfca::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 24x24 detector with the default field of view.
fn small_scanner() -> ScannerConfig {
    ScannerConfig {
        detector_width: 24,
        detector_height: 24,
        pixel_pitch: 0.033 * 64.0 / 24.0,
        ..ScannerConfig::default()
    }
}

fn small_dataset() -> &'static AngiogramDataset {
    static DS: OnceLock<AngiogramDataset> = OnceLock::new();
    DS.get_or_init(|| {
        AngiogramDataset::generate(&DatasetConfig {
            scanner: small_scanner(),
            samples_per_ray: 64,
            ..DatasetConfig::default()
        })
        .unwrap()
    })
}

fn tiny_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        batch_rays: 16,
        samples_per_ray: 16,
        chunk_rays: 4,
        checkpoint_every: 10,
        model: ModelConfig {
            width: 8,
            depth: 2,
            latent_dim: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.encoding.bands = 3;
    cfg
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

#[test]
fn desk_scale_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.resolved().iterations, 10_000);
    let reference = TrainConfig::reference();
    assert_eq!(reference.resolved().iterations, 200_000);
    assert_eq!(reference.batch_rays, 1024);
    assert_eq!(reference.regularizer_gain, 1.0);
    assert_eq!(reference.learning_rate.end, 1e-5);
    assert_eq!(reference.model.dynamic_output_bias, 0.0);
    let scanner = ScannerConfig::default();
    assert_eq!((scanner.detector_width, scanner.detector_height), (64, 64));
}

#[test]
fn weighted_draws_follow_the_maps() {
    let ds = small_dataset();
    let trainer = Trainer::new(
        ds,
        &TrainConfig {
            batch_rays: 1000,
            weighted_fraction: 1.0,
            ..tiny_config(Variant::Full)
        },
    )
    .unwrap();
    let views = ds.training_view_ids();
    let pixels = 24 * 24;
    let mut counts = vec![vec![0u64; pixels]; views.len()];
    let mut per_phase = vec![0u64; ds.phases()];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 1_000_000u64;
    for _ in 0..draws / 1000 {
        for r in trainer.sample_batch(&mut rng) {
            assert!(r.vessel_likely);
            let slot = views.iter().position(|&v| v == r.view).unwrap();
            counts[slot][r.v * 24 + r.u] += 1;
            per_phase[r.phase - 1] += 1;
        }
    }
    let within = |observed: u64, n: u64, p: f64| {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (observed as f64 - mean).abs() <= 3.0 * sd
    };
    for c in &per_phase {
        assert!(within(*c, draws, 1.0 / ds.phases() as f64), "{per_phase:?}");
    }
    for (slot, &view) in views.iter().enumerate() {
        let total: u64 = counts[slot].iter().sum();
        assert!(within(total, draws, 1.0 / views.len() as f64));
        let map = &ds.maps[view];
        let w = map.weights.as_slice().unwrap();
        let m = map.high_variance_mask.as_slice().unwrap();
        let mass: f64 = (0..pixels).filter(|&k| m[k]).map(|k| w[k]).sum();
        for k in 0..pixels {
            if !m[k] {
                assert_eq!(counts[slot][k], 0);
                continue;
            }
            assert!(
                within(counts[slot][k], total, w[k] / mass),
                "view {view} pixel {k}: {} of {total}, p = {}",
                counts[slot][k],
                w[k] / mass
            );
        }
    }
}

#[test]
fn weighted_fraction_splits_the_batch() {
    let ds = small_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let half = Trainer::new(
        ds,
        &TrainConfig {
            batch_rays: 1024,
            weighted_fraction: 0.5,
            ..tiny_config(Variant::Full)
        },
    )
    .unwrap();
    let batch = half.sample_batch(&mut rng);
    assert_eq!(batch.len(), 1024);
    assert!(batch[..512].iter().all(|r| r.vessel_likely));
    // The uniform half hits the mask about as often as its area share.
    let hits = batch[512..].iter().filter(|r| r.vessel_likely).count();
    assert!(hits < 150, "{hits}");

    let uniform = Trainer::new(
        ds,
        &TrainConfig {
            batch_rays: 1024,
            weighted_fraction: 0.0,
            ..tiny_config(Variant::Full)
        },
    )
    .unwrap();
    let hits = uniform.sample_batch(&mut rng).iter().filter(|r| r.vessel_likely).count();
    assert!(hits < 200, "{hits}");
}

#[test]
fn photometric_loss_falls_on_an_empty_scene() {
    let mut phantom = PhantomConfig {
        background: BackgroundModel { primitives: vec![] },
        ..PhantomConfig::default()
    };
    phantom.vessels.branches.clear();
    let ds = AngiogramDataset::generate(&DatasetConfig {
        scanner: small_scanner(),
        phantom,
        samples_per_ray: 16,
        include_validation: false,
        ..DatasetConfig::default()
    })
    .unwrap();
    assert!(ds.frames.iter().all(|f| f.image.iter().all(|&i| i == 1.0)));
    let trainer = Trainer::new(&ds, &tiny_config(Variant::Full)).unwrap();
    let mut state = trainer.init_state();
    for p in state.model.store.iter_mut() {
        p.value.fill(0.0);
    }
    // Batches differ per step, so compare means over windows of 50 steps.
    let lp: Vec<f64> = (0..400).map(|_| trainer.step(&mut state).unwrap().bundle.photometric).collect();
    let means: Vec<f64> = lp.chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "window means {means:?}");
    }
    assert!(means[7] < means[0] - 0.05, "window means {means:?}");
}

#[test]
fn first_step_uses_start_weights() {
    let ds = small_dataset();
    let g = 1e3;
    let expect = [
        (Variant::Full, [1e-12 * g, 1e-12 * g, 1e-8 * g]),
        (Variant::Dynamic, [1e-12 * g, 1e-12 * g, 0.0]),
        (Variant::Sparse, [0.0, 0.0, 0.0]),
    ];
    for (variant, w) in expect {
        let cfg = TrainConfig {
            regularizer_gain: g,
            ..tiny_config(variant)
        };
        let trainer = Trainer::new(ds, &cfg).unwrap();
        let mut state = trainer.init_state();
        let rec = trainer.step(&mut state).unwrap();
        let got = rec.bundle.weights;
        assert_eq!([got.factorization, got.entropy, got.occlusion], w, "{variant:?}");
        assert_eq!(rec.learning_rate, 1e-3);
        assert_eq!(state.iteration, 1);
    }
}

#[test]
fn sparse_model_has_one_static_net_per_phase() {
    let ds = small_dataset();
    let trainer = Trainer::new(ds, &tiny_config(Variant::Sparse)).unwrap();
    let mut state = trainer.init_state();
    assert_eq!(state.model.statics.len(), ds.phases());
    assert!(state.model.dynamic.is_none());
    for _ in 0..3 {
        let rec = trainer.step(&mut state).unwrap();
        assert_eq!(rec.bundle.factorization, 0.0);
        assert!(rec.bundle.photometric.is_finite());
    }
}

#[test]
fn non_finite_loss_names_the_rays() {
    let ds = small_dataset();
    let trainer = Trainer::new(ds, &tiny_config(Variant::Full)).unwrap();
    let mut state = trainer.init_state();
    state.model.store.iter_mut().next().unwrap().value[[0, 0]] = f64::NAN;
    match trainer.step(&mut state) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("view") && msg.contains("phase"), "{msg}"),
        other => panic!("expected a numerical error, got {:?}", other.map(|r| r.iteration)),
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        iterations: 400,
        ..tiny_config(Variant::Full)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = single_thread(|| {
        run_training(ds, &cfg, &TrainOptions { out_dir: Some(a.path()), ..Default::default() }).unwrap()
    });
    let rb = single_thread(|| {
        run_training(ds, &cfg, &TrainOptions { out_dir: Some(b.path()), ..Default::default() }).unwrap()
    });
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.log.len(), 20);
    for name in ["loss.csv".to_string(), checkpoint_name(10), checkpoint_name(20)] {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name}");
    }

    // A different seed changes the stream.
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let rc = run_training(ds, &other, &TrainOptions::default()).unwrap();
    assert_ne!(ra.log, rc.log);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = small_dataset();
    for variant in [Variant::Full, Variant::Sparse] {
        let cfg = TrainConfig {
            iterations: 600,
            ..tiny_config(variant)
        };
        let whole = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        single_thread(|| {
            run_training(ds, &cfg, &TrainOptions { out_dir: Some(whole.path()), ..Default::default() }).unwrap();
            run_training(
                ds,
                &cfg,
                &TrainOptions {
                    out_dir: Some(split.path()),
                    stop_after: Some(17),
                    ..Default::default()
                },
            )
            .unwrap();
            // Resume from the last periodic checkpoint; rows past it are dropped.
            let from = split.path().join(checkpoint_name(10));
            run_training(
                ds,
                &cfg,
                &TrainOptions {
                    out_dir: Some(split.path()),
                    resume: Some(&from),
                    ..Default::default()
                },
            )
            .unwrap();
        });
        for name in ["loss.csv".to_string(), checkpoint_name(20), checkpoint_name(30)] {
            assert_eq!(
                fs::read(whole.path().join(&name)).unwrap(),
                fs::read(split.path().join(&name)).unwrap(),
                "{variant:?} {name}"
            );
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let ds = small_dataset();
    let cfg = tiny_config(Variant::Dynamic);
    let trainer = Trainer::new(ds, &cfg).unwrap();
    let mut state = trainer.init_state();
    for _ in 0..3 {
        trainer.step(&mut state).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&state, &cfg, &path).unwrap();
    let (back, back_cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(back_cfg, cfg);

    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn resume_rejects_other_configs() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        iterations: 200,
        ..tiny_config(Variant::Full)
    };
    let dir = tempfile::tempdir().unwrap();
    run_training(ds, &cfg, &TrainOptions { out_dir: Some(dir.path()), ..Default::default() }).unwrap();
    let other = TrainConfig { seed: 5, ..cfg };
    let from = dir.path().join(checkpoint_name(10));
    let err = run_training(
        ds,
        &other,
        &TrainOptions {
            resume: Some(&from),
            ..Default::default()
        },
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

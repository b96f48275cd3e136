//! Simulator statistics and training-loop properties.

use pavad_core::config::{ProfileName, RunProfile};
use pavad_core::eval::evaluate;
use pavad_core::io::{read_manifest, read_masks};
use pavad_core::losses::LossWeights;
use pavad_core::model::DarmParams;
use pavad_core::sim::{self, generate, mean_row_norm, write_sim, SimConfig};
use pavad_core::train::{batch_loss, sample_batch, train, Dataset, Stream, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_sim(seed: u64) -> SimConfig {
    SimConfig {
        videos_per_stream: 50,
        seed,
        ..SimConfig::default()
    }
}

fn sim_profile() -> RunProfile {
    RunProfile::named(ProfileName::Sim)
}

#[test]
fn pseudo_to_real_norm_ratio_follows_table_values() {
    let target = sim::PSEUDO_MEAN_NORM / sim::REAL_MEAN_NORM;
    assert!((target - 1.122).abs() < 5e-4);
    for seed in 0..3 {
        // 50 videos × 20 rows = 1000 rows per stream.
        let data = generate(&small_sim(seed)).unwrap();
        let ratio = mean_row_norm(&data, Stream::PseudoNormal) / mean_row_norm(&data, Stream::RealNormal);
        assert!((ratio / target - 1.0).abs() < 0.05, "seed {seed}: ratio {ratio}");
        let abn = mean_row_norm(&data, Stream::PseudoAbnormal) / mean_row_norm(&data, Stream::RealNormal);
        assert!((abn / target - 1.0).abs() < 0.05, "seed {seed}: abnormal ratio {abn}");

        let control = generate(&SimConfig {
            pseudo_norm_scale: 1.0,
            ..small_sim(seed)
        })
        .unwrap();
        let ratio = mean_row_norm(&control, Stream::PseudoNormal) / mean_row_norm(&control, Stream::RealNormal);
        assert!((ratio - 1.0).abs() < 0.02, "seed {seed}: control ratio {ratio}");
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let a = generate(&small_sim(4)).unwrap();
    let b = generate(&small_sim(4)).unwrap();
    let c = generate(&small_sim(5)).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.test_masks, b.test_masks);
    assert_ne!(a.train, c.train);
}

#[test]
fn written_simulation_passes_validators() {
    let cfg = SimConfig {
        videos_per_stream: 4,
        test_normal_videos: 2,
        test_abnormal_videos: 2,
        ..SimConfig::default()
    };
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sim(&data, &cfg, dir.path()).unwrap();
    let train_m = read_manifest(dir.path().join(sim::TRAIN_MANIFEST)).unwrap();
    train_m.validate_training().unwrap();
    assert_eq!(train_m.entries.len(), 12);
    let test_m = read_manifest(dir.path().join(sim::TEST_MANIFEST)).unwrap();
    let masks = read_masks(dir.path().join(sim::TEST_MASKS), &test_m).unwrap();
    assert_eq!(masks, data.compiled_masks().unwrap());
    let burst_frames = cfg.burst_rows() * cfg.frames_per_row;
    for m in &masks {
        let n = m.mask.iter().filter(|&&b| b).count();
        assert_eq!(
            n,
            if m.video_id.starts_with("test_abnormal") {
                burst_frames
            } else {
                0
            }
        );
    }
    let loaded = Dataset::load(&train_m).unwrap();
    assert_eq!(loaded.videos.len(), data.train.len());
}

fn quick_train(steps: usize) -> (TrainConfig, RunProfile, Dataset) {
    let p = sim_profile();
    let ds = generate(&small_sim(0)).unwrap().train_set().unwrap();
    let cfg = TrainConfig {
        steps,
        ..p.train.clone()
    };
    (cfg, p, ds)
}

#[test]
fn training_is_bit_deterministic() {
    let (cfg, p, ds) = quick_train(20);
    let a = train(&cfg, &p.model, &ds).unwrap();
    let b = train(&cfg, &p.model, &ds).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_usage, b.final_usage);
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let (cfg, p, ds) = quick_train(5);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..cfg
    };
    let out = train(&cfg, &p.model, &ds).unwrap();
    assert_eq!(out.params, DarmParams::init(&p.model, cfg.seed).unwrap());
}

#[test]
fn without_regularizers_memory_still_learns_and_discriminator_does_not() {
    let (cfg, p, ds) = quick_train(1);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        loss_weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg.loss_weights.clone()
        },
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = sample_batch(&ds, &cfg, &mut rng).unwrap();
    let init = DarmParams::init(&p.model, cfg.seed).unwrap();
    let (mut g, vars, loss) = batch_loss(&init, &batch, &cfg.loss_weights, p.model.tau, None).unwrap();
    g.backward(loss.total).unwrap();
    let nonzero = |v| g.grad(v).is_some_and(|gr: &[f64]| gr.iter().any(|&x| x != 0.0));
    assert!(nonzero(vars.abnormal));
    assert!(nonzero(vars.normal));

    let out = train(&cfg, &p.model, &ds).unwrap();
    assert_ne!(out.params.abnormal.slots, init.abnormal.slots);
    assert_ne!(out.params.normal.slots, init.normal.slots);
    assert_eq!(out.params.disc, init.disc);
}

fn loss_trend(cfg: &TrainConfig, p: &RunProfile, ds: &Dataset) -> (f64, f64) {
    let out = train(cfg, &p.model, ds).unwrap();
    let total: Vec<f64> = out.log.iter().map(|r| r.losses.total).collect();
    let w = (total.len() / 10).max(1);
    (sim::median(&total[..w]), sim::median(&total[total.len() - w..]))
}

#[test]
fn baseline_loss_falls_within_300_steps() {
    let p = sim_profile();
    for seed in 0..3 {
        let ds = generate(&SimConfig { seed, ..p.sim.clone() })
            .unwrap()
            .train_set()
            .unwrap();
        let cfg = TrainConfig {
            steps: 300,
            seed,
            loss_weights: p.train.loss_weights.baseline(),
            ..p.train.clone()
        };
        let (first, last) = loss_trend(&cfg, &p, &ds);
        assert!(last < first, "seed {seed}: first {first} last {last}");
    }
}

#[test]
fn full_loss_falls_over_profile_length() {
    let p = sim_profile();
    for seed in 0..3 {
        let ds = generate(&SimConfig { seed, ..p.sim.clone() })
            .unwrap()
            .train_set()
            .unwrap();
        let cfg = TrainConfig {
            seed,
            ..p.train.clone()
        };
        let (first, last) = loss_trend(&cfg, &p, &ds);
        assert!(last < first, "seed {seed}: first {first} last {last}");
    }
}

#[test]
fn trained_model_beats_untrained() {
    let p = sim_profile();
    let mut trained = Vec::new();
    let mut untrained = Vec::new();
    for seed in 0..5 {
        let data = generate(&SimConfig { seed, ..p.sim.clone() }).unwrap();
        let (test, masks) = (data.test_set().unwrap(), data.compiled_masks().unwrap());
        let cfg = TrainConfig {
            seed,
            ..p.train.clone()
        };
        let out = train(&cfg, &p.model, &data.train_set().unwrap()).unwrap();
        trained.push(evaluate(&out.params, &test, &masks).unwrap().metrics.auc_micro);
        untrained.push(evaluate(&out.initial, &test, &masks).unwrap().metrics.auc_micro);
    }
    let (t, u) = (sim::median(&trained), sim::median(&untrained));
    assert!(t > u, "trained {t} vs untrained {u}");
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let (cfg, mut p, ds) = quick_train(1);
    p.model.input_dim += 1;
    assert!(train(&cfg, &p.model, &ds).is_err());
    let empty = Dataset { videos: vec![] };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_batch(&empty, &cfg, &mut rng).is_err());
}

#[test]
fn total_is_weighted_sum_of_parts() {
    let (cfg, p, ds) = quick_train(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = DarmParams::init(&p.model, 3).unwrap();
    for _ in 0..5 {
        let w = LossWeights {
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..1.0),
            lambda_da: rng.random_range(0.0..1.0),
            lambda_dist: rng.random_range(0.0..0.1),
            ..cfg.loss_weights.clone()
        };
        let batch = sample_batch(&ds, &cfg, &mut rng).unwrap();
        let (g, _, loss) = batch_loss(&params, &batch, &w, p.model.tau, None).unwrap();
        let b = loss.breakdown(&g);
        let resum = b.mil_rank + b.mil_cls + w.lambda1 * b.da + w.lambda2 * b.upd;
        assert!(
            (b.total - resum).abs() <= 1e-10 * b.total.abs().max(1.0),
            "{} vs {resum}",
            b.total
        );
    }
}

mod common;

use aimdt::config::{LossMode, LrDecay, RunConfig, TrainConfig};
use aimdt::datagen::{gen_collision_free, Dataset};
use aimdt::episode::{sample_scenario, EpisodeOptions, Policy};
use aimdt::model::*;
use aimdt::world::{Phase, World};
use aimdt::Environment;
use ndarray::Array2;

use common::{five_slot_model, micro_config, model_with};

fn two_vehicle_config() -> RunConfig {
    let mut cfg = RunConfig::builtin();
    cfg.scenario.n_vehicles = 2;
    cfg.model = micro_config();
    cfg.train = TrainConfig { iterations: 2, steps: 15, batch_size: 4, log_every: 10, ..TrainConfig::default() };
    cfg
}

fn small_dataset(cfg: &RunConfig) -> Dataset {
    gen_collision_free(cfg, 1, 5).unwrap()
}

fn identity_norm(state_dim: usize) -> Normalizer {
    Normalizer {
        state_mean: vec![0.0; state_dim],
        state_std: vec![1.0; state_dim],
        return_mean: 40.0,
        return_scale: 4.0,
        action_scale: 1.5,
    }
}

#[test]
fn tokenized_windows_have_expected_shape_and_scaling() {
    let cfg = two_vehicle_config();
    let ds = small_dataset(&cfg);
    let ep = ds.episodes.iter().find(|e| e.len() > 20).unwrap();
    let norm = identity_norm(12);
    let k = cfg.model.context_len;

    let first = tokenize_window(ep, 0, k, &norm).unwrap();
    assert_eq!(first.n_tokens(), 3);
    assert_eq!(first.timesteps, vec![0]);
    assert!(first.prev_actions.iter().all(|&a| a == 0.0));

    let t_end = k + 5;
    let w = tokenize_window(ep, t_end, k, &norm).unwrap();
    assert_eq!(w.n_tokens(), 3 * k);
    assert_eq!(w.timesteps, (t_end + 1 - k..=t_end).collect::<Vec<_>>());
    for (row, t) in (t_end + 1 - k..=t_end).enumerate() {
        // Identity statistics leave states untouched.
        for (c, &x) in ep.state(t).iter().enumerate() {
            assert_eq!(w.states[[row, c]], f64::from(x));
        }
        for (c, &a) in ep.action(t - 1).iter().enumerate() {
            assert_eq!(w.prev_actions[[row, c]], f64::from(a) / 1.5);
        }
        let targets = w.targets.as_ref().unwrap();
        for (c, &a) in ep.action(t).iter().enumerate() {
            assert_eq!(targets[[row, c]], f64::from(a));
        }
        assert_eq!(w.rtgs[row], ep.rtgs[t] / 4.0);
    }
    assert!(tokenize_window(ep, ep.len(), k, &norm).is_err());
}

#[test]
fn standardization_uses_manifest_statistics() {
    let cfg = two_vehicle_config();
    let ds = small_dataset(&cfg);
    let norm = Normalizer::from_dataset(&ds, &cfg.world);
    assert_eq!(norm.state_mean, ds.manifest.state_mean);
    assert_eq!(norm.action_scale, 1.5);
    assert_eq!(norm.return_scale, (ds.manifest.return_mean / 10.0).max(1.0));
    let ep = &ds.episodes[0];
    let w = tokenize_window(ep, 0, 4, &norm).unwrap();
    for c in 0..12 {
        let expect = (f64::from(ep.state(0)[c]) - norm.state_mean[c]) / norm.state_std[c];
        assert!((w.states[[0, c]] - expect).abs() < 1e-12);
    }
}

#[test]
fn warmup_then_constant_or_cosine() {
    let mut tc = TrainConfig { iterations: 1, steps: 100, warmup_frac: 0.1, learning_rate: 1e-3, ..TrainConfig::default() };
    assert!((learning_rate(&tc, 0) - 1e-4).abs() < 1e-15);
    assert!((learning_rate(&tc, 4) - 5e-4).abs() < 1e-15);
    assert_eq!(learning_rate(&tc, 9), 1e-3);
    assert_eq!(learning_rate(&tc, 99), 1e-3);
    tc.lr_decay = LrDecay::Cosine;
    assert_eq!(learning_rate(&tc, 10), 1e-3);
    let rates: Vec<f64> = (10..100).map(|u| learning_rate(&tc, u)).collect();
    assert!(rates.windows(2).all(|p| p[1] <= p[0]));
    assert!(rates[rates.len() - 1] < 1e-6);
    assert!((learning_rate(&tc, 55) - 0.5e-3).abs() < 1e-12);
}

#[test]
fn adam_matches_hand_computed_steps() {
    let cfg = micro_config();
    let mut p = Params::zeros(&cfg);
    p.tensors[0][[0, 0]] = 1.0;
    let mut g = Params::zeros(&cfg);
    let mut adam = Adam::new(&p);

    g.tensors[0][[0, 0]] = 0.5;
    adam.step(&mut p, &g, 0.1);
    // First step: bias-corrected m / sqrt(v) = g / |g|.
    let expect1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((p.tensors[0][[0, 0]] - expect1).abs() < 1e-15);

    g.tensors[0][[0, 0]] = -1.0;
    adam.step(&mut p, &g, 0.1);
    let m = 0.9 * (0.1 * 0.5) + 0.1 * -1.0;
    let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
    let step = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert!((p.tensors[0][[0, 0]] - (expect1 - 0.1 * step)).abs() < 1e-12);
    // Untouched entries with zero gradient stay put.
    assert_eq!(p.tensors[0][[0, 1]], 0.0);
}

#[test]
fn global_norm_clipping() {
    let cfg = micro_config();
    let mut g = Params::zeros(&cfg);
    g.tensors[0][[0, 0]] = 3.0;
    g.tensors[1][[0, 0]] = 4.0;
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g.tensors[0][[0, 0]] - 0.6).abs() < 1e-15);
    assert!((g.tensors[1][[0, 0]] - 0.8).abs() < 1e-15);
    let before = g.clone();
    assert!((clip_global_norm(&mut g, 2.0) - 1.0).abs() < 1e-15);
    assert_eq!(g, before);
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let cfg = two_vehicle_config();
    let ds = small_dataset(&cfg);
    let norm = Normalizer::from_dataset(&ds, &cfg.world);
    let run = |threads: usize, seed: u64| {
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&ds, &cfg.model, &tc, &norm, |_| {}).unwrap())
    };
    let (p1, o1) = run(1, 3);
    let (p2, o2) = run(3, 3);
    assert_eq!(o1.losses, o2.losses);
    assert_eq!(p1, p2);
    assert_eq!(o1.losses.len(), 30);
    assert_eq!(o1.log.iter().map(|e| e.update).collect::<Vec<_>>(), vec![10, 20, 30]);
    let (p3, o3) = run(1, 4);
    assert_ne!(o1.losses, o3.losses);
    assert_ne!(p1, p3);
}

#[test]
fn training_reduces_loss() {
    let mut cfg = two_vehicle_config();
    cfg.train.iterations = 1;
    cfg.train.steps = 300;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 3e-3;
    let ds = small_dataset(&cfg);
    let norm = Normalizer::from_dataset(&ds, &cfg.world);
    let fresh = Params::zeros(&cfg.model);
    let before = dataset_mse(&fresh, &cfg.model, &norm, &ds.episodes, LossMode::AllPositions).unwrap();
    let (params, _) = train(&ds, &cfg.model, &cfg.train, &norm, |_| {}).unwrap();
    let after = dataset_mse(&params, &cfg.model, &norm, &ds.episodes, LossMode::AllPositions).unwrap();
    assert!(after < 0.5 * before, "mse {before} -> {after}");
}

#[test]
fn training_rejects_mismatched_dimensions() {
    let cfg = two_vehicle_config();
    let ds = small_dataset(&cfg);
    let norm = Normalizer::from_dataset(&ds, &cfg.world);
    let mut wide = cfg.model.clone();
    wide.state_dim = 30;
    wide.action_dim = 5;
    assert!(check_dimensions(&ds, &wide).is_err());
    assert!(train(&ds, &wide, &cfg.train, &norm, |_| {}).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = model_with(micro_config(), 9);
    m.params.quantize();
    let bytes = encode_checkpoint(&m).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let batch = common::random_batch(&m.model, 2);
    let a = forward(&m.params, &m.model, &batch, None).unwrap().outputs;
    let b = forward(&back.params, &back.model, &batch, None).unwrap().outputs;
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
}

#[test]
fn corrupted_tensor_is_named() {
    let m = model_with(micro_config(), 1);
    let bytes = encode_checkpoint(&m).unwrap();
    let specs = tensor_specs(&m.model);
    let blob_start = bytes.len() - m.params.n_scalars() * 4;
    // Flip one byte inside the first block's query/key/value weights.
    let idx = specs.iter().position(|(n, _)| n == "block0.w_qkv").unwrap();
    let offset: usize = specs[..idx].iter().map(|(_, s)| s[0] * s[1] * 4).sum();
    let mut bad = bytes.clone();
    bad[blob_start + offset + 5] ^= 0x40;
    let err = decode_checkpoint(&bad).unwrap_err().to_string();
    assert!(err.contains("block0.w_qkv"), "{err}");

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());
    assert!(decode_checkpoint(b"not a checkpoint").is_err());
}

#[test]
fn mismatched_tensor_shapes_are_rejected() {
    let mut m = model_with(micro_config(), 1);
    m.params.tensors[2] = Array2::zeros((3, 3));
    assert!(encode_checkpoint(&m).is_err());
}

#[test]
fn rollout_bookkeeping_and_padding() {
    let model = five_slot_model(4);
    let env = Environment::default().with_vehicles(3);
    for seed in 0..5 {
        let scenario = sample_scenario(&env, 3, seed).unwrap();
        let r = rollout(&model, &env, &scenario, 480.0, &EpisodeOptions::new(30.0)).unwrap();
        assert_eq!(r.record.n_vehicles, 3);
        assert_eq!(r.rtg_trace.len(), r.record.len() + 1);
        assert_eq!(r.rtg_trace[0], 480.0);
        assert!(r.telescoping_error() < 1e-9);
        for (k, pair) in r.rtg_trace.windows(2).enumerate() {
            assert_eq!(pair[1], pair[0] - r.record.rewards[k]);
        }
        assert!(r.record.actions.iter().all(|a| a.abs() <= 1.5));
    }
    let six = Environment::default().with_vehicles(6);
    let scenario = sample_scenario(&six, 6, 0).unwrap();
    assert!(rollout(&model, &six, &scenario, 1.0, &EpisodeOptions::new(5.0)).is_err());
    assert!(DtPolicy::new(&model, f64::NAN).is_err());
}

#[test]
fn padded_slots_carry_sentinels() {
    let model = five_slot_model(2);
    let env = Environment::default().with_vehicles(3);
    let scenario = sample_scenario(&env, 3, 1).unwrap();
    let world = World::new(&env, &scenario.vehicles).unwrap();
    for k in 3..5 {
        let s = sentinel_features(&env.layout, k);
        assert_eq!(s[2], 0.0);
        assert_eq!([s[0], s[1]], [s[4], s[5]]);
        assert!(!env.layout.in_interior(s[0], s[1]));
    }
    let mut policy = DtPolicy::new(&model, 100.0).unwrap();
    policy.reset(&world).unwrap();
    let actions = policy.act(&world).unwrap();
    assert_eq!(actions.len(), 3);
}

#[test]
fn rollout_stops_once_everyone_has_left() {
    // A zero head predicts zero acceleration: vehicles cruise at full speed.
    let mut model = five_slot_model(3);
    let n = model.params.tensors.len();
    for t in &mut model.params.tensors[n - 2..] {
        t.fill(0.0);
    }
    let env = Environment::default().with_vehicles(1);
    let scenario = sample_scenario(&env, 1, 0).unwrap();
    let r = rollout(&model, &env, &scenario, 100.0, &EpisodeOptions::new(60.0)).unwrap();
    assert_eq!(r.record.termination, aimdt::episode::Termination::AllExited);
    let mut world = World::new(&env, &scenario.vehicles).unwrap();
    let mut steps = 0;
    while world.vehicles()[0].phase != Phase::Exited {
        world.step(&[0.0], None).unwrap();
        steps += 1;
    }
    assert_eq!(r.record.len(), steps);
}

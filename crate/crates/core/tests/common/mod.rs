//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod brute;
pub mod pipeline;

use aimdt::config::{LossMode, ModelConfig, TrainConfig};
use aimdt::model::{loss, loss_and_grad, tensor_specs, DtModel, Normalizer, Params, Window};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        context_len: 4,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 8,
        state_dim: 12,
        action_dim: 2,
        dropout: 0.0,
        max_timestep: 16,
    }
}

/// Parameters with every entry random and nonzero, so no gradient path is
/// hidden behind a zero initialisation.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::zeros(cfg);
    for ((name, _), t) in tensor_specs(cfg).iter().zip(p.tensors.iter_mut()) {
        let gain = name.ends_with("_g") || name.ends_with(".g");
        t.mapv_inplace(|_| {
            let u: f64 = rng.gen_range(-0.5..0.5);
            if gain {
                1.0 + u
            } else {
                u
            }
        });
    }
    p
}

pub fn random_window(cfg: &ModelConfig, len: usize, start: usize, rng: &mut impl Rng) -> Window {
    let mut m = |r: usize, c: usize, lo: f64, hi: f64| Array2::from_shape_fn((r, c), |_| rng.gen_range(lo..hi));
    let states = m(len, cfg.state_dim, -2.0, 2.0);
    let prev_actions = m(len, cfg.action_dim, -1.0, 1.0);
    let targets = m(len, cfg.action_dim, -1.5, 1.5);
    let rtgs = (0..len).map(|i| 3.0 - 0.5 * i as f64).collect();
    Window { states, prev_actions, rtgs, timesteps: (start..start + len).collect(), targets: Some(targets) }
}

pub fn random_batch(cfg: &ModelConfig, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        random_window(cfg, cfg.context_len, 3, &mut rng),
        random_window(cfg, 2, 0, &mut rng),
        random_window(cfg, cfg.context_len, 9, &mut rng),
    ]
}

/// Worst per-tensor relative error `|g_a - g_n| / max(|g_a|, |g_n|)` between
/// the analytic gradient and central differences with step `h`, with the
/// name of that tensor.
pub fn gradient_check(cfg: &ModelConfig, params: &Params, batch: &[Window], mode: LossMode, h: f64) -> (f64, String) {
    let (_, grads) = loss_and_grad(params, cfg, batch, mode, None).unwrap();
    let specs = tensor_specs(cfg);
    let mut worst = (0.0, String::new());
    for (ti, (name, _)) in specs.iter().enumerate() {
        let mut p = params.clone();
        let mut num = Vec::with_capacity(p.tensors[ti].len());
        for k in 0..p.tensors[ti].len() {
            let orig = p.tensors[ti].as_slice().unwrap()[k];
            p.tensors[ti].as_slice_mut().unwrap()[k] = orig + h;
            let up = loss(&p, cfg, batch, mode).unwrap();
            p.tensors[ti].as_slice_mut().unwrap()[k] = orig - h;
            let down = loss(&p, cfg, batch, mode).unwrap();
            p.tensors[ti].as_slice_mut().unwrap()[k] = orig;
            num.push((up - down) / (2.0 * h));
        }
        let ana = grads.tensors[ti].as_slice().unwrap();
        let diff = ana.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name.clone());
        }
    }
    worst
}

/// A model with random weights and a fixed normalizer.
pub fn model_with(cfg: ModelConfig, seed: u64) -> DtModel {
    let sd = cfg.state_dim;
    DtModel {
        params: random_params(&cfg, seed),
        model: cfg,
        train: TrainConfig::default(),
        norm: Normalizer {
            state_mean: vec![0.0; sd],
            state_std: vec![25.0; sd],
            return_mean: 500.0,
            return_scale: 50.0,
            action_scale: 1.5,
        },
        config_hash: "cfg".into(),
        dataset_hash: "data".into(),
        final_loss: 0.25,
    }
}

/// A tiny network sized for five vehicles on the default world.
pub fn five_slot_model(seed: u64) -> DtModel {
    model_with(
        ModelConfig {
            context_len: 4,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            state_dim: 30,
            action_dim: 5,
            dropout: 0.0,
            max_timestep: 1024,
        },
        seed,
    )
}

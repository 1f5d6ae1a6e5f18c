use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{loss_and_grad, mse, forward, Window};
use super::checkpoint::DtModel;
use super::params::Params;
use crate::config::{LossMode, LrDecay, ModelConfig, RunConfig, TrainConfig, WorldConfig};
use crate::datagen::Dataset;
use crate::episode::EpisodeRecord;
use crate::error::{Error, Result};
use crate::rng::rng_from;

const INIT_STREAM: u64 = 0x1417;
const BATCH_STREAM: u64 = 0xBA7C;

/// Input scaling shared by training and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Mean episode return of the training data; the default initial
    /// return-to-go at evaluation.
    pub return_mean: f64,
    /// Returns-to-go are divided by this before embedding.
    pub return_scale: f64,
    /// Actions fed back as tokens are divided by this.
    pub action_scale: f64,
}

impl Normalizer {
    pub fn from_dataset(ds: &Dataset, world: &WorldConfig) -> Normalizer {
        let m = &ds.manifest;
        Normalizer {
            state_mean: m.state_mean.clone(),
            state_std: m.state_std.clone(),
            return_mean: m.return_mean,
            return_scale: (m.return_mean.abs() / 10.0).max(1.0),
            action_scale: world.a_max.max(-world.a_min),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn state(&self, raw: impl IntoIterator<Item = f64>) -> Vec<f64> {
        raw.into_iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// An episode converted once into normalized model inputs.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    states: Array2<f64>,
    prev_actions: Array2<f64>,
    rtgs: Vec<f64>,
    targets: Array2<f64>,
}

impl PreparedEpisode {
    pub fn new(ep: &EpisodeRecord, norm: &Normalizer) -> PreparedEpisode {
        let t = ep.len();
        let sd = ep.state_dim();
        let n = ep.n_vehicles;
        let states = Array2::from_shape_vec(
            (t, sd),
            (0..t).flat_map(|i| norm.state(ep.state(i).iter().map(|&x| f64::from(x)))).collect(),
        )
        .expect("state rows");
        let targets =
            Array2::from_shape_vec((t, n), ep.actions.iter().map(|&a| f64::from(a)).collect()).expect("action rows");
        let mut prev_actions = Array2::zeros((t, n));
        if t > 1 {
            prev_actions.slice_mut(s![1.., ..]).assign(&(targets.slice(s![..t - 1, ..]).to_owned() / norm.action_scale));
        }
        let rtgs = ep.rtgs.iter().map(|g| g / norm.return_scale).collect();
        PreparedEpisode { states, prev_actions, rtgs, targets }
    }

    pub fn len(&self) -> usize {
        self.rtgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtgs.is_empty()
    }

    /// The trailing `min(k, t_end + 1)` timesteps ending at `t_end`.
    pub fn window(&self, t_end: usize, k: usize) -> Window {
        let start = (t_end + 1).saturating_sub(k);
        let r = start..t_end + 1;
        Window {
            states: self.states.slice(s![r.clone(), ..]).to_owned(),
            prev_actions: self.prev_actions.slice(s![r.clone(), ..]).to_owned(),
            rtgs: self.rtgs[r.clone()].to_vec(),
            timesteps: r.clone().collect(),
            targets: Some(self.targets.slice(s![r, ..]).to_owned()),
        }
    }
}

/// Tokenize the window of `ep` ending at `t_end`.
pub fn tokenize_window(ep: &EpisodeRecord, t_end: usize, k: usize, norm: &Normalizer) -> Result<Window> {
    if t_end >= ep.len() {
        return Err(Error::InvalidInput(format!("t_end {t_end} outside episode of {} steps", ep.len())));
    }
    Ok(PreparedEpisode::new(ep, norm).window(t_end, k))
}

/// Adam with per-tensor first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &Params) -> Adam {
        let zeros = || params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Adam { m: zeros(), v: zeros(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(&grads.tensors).zip(self.m.iter_mut().zip(&mut self.v)) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.tensors.iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in &mut grads.tensors {
            t.mapv_inplace(|g| g * k);
        }
    }
    norm
}

/// Linear warmup over the first `warmup_frac` of updates, then constant or
/// cosine decay.
pub fn learning_rate(cfg: &TrainConfig, update: usize) -> f64 {
    let total = cfg.total_updates();
    let warmup = (cfg.warmup_frac * total as f64).ceil() as usize;
    if update < warmup {
        return cfg.learning_rate * (update + 1) as f64 / warmup as f64;
    }
    match cfg.lr_decay {
        LrDecay::Constant => cfg.learning_rate,
        LrDecay::Cosine => {
            let progress = (update - warmup) as f64 / (total - warmup).max(1) as f64;
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub update: usize,
    /// Mean batch loss since the previous entry.
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    /// Batch loss of every update, in order.
    pub losses: Vec<f64>,
}

/// Check that a dataset fits a model configuration.
pub fn check_dimensions(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.state_dim() != cfg.state_dim || ds.manifest.n_vehicles != cfg.action_dim {
        return Err(Error::Config(format!(
            "dataset has state_dim {} and {} vehicles, model expects state_dim {} and action_dim {}",
            ds.state_dim(),
            ds.manifest.n_vehicles,
            cfg.state_dim,
            cfg.action_dim
        )));
    }
    Ok(())
}

/// Draw one training batch of windows.
fn sample_batch(prepared: &[PreparedEpisode], k: usize, batch: usize, rng: &mut impl Rng) -> Vec<Window> {
    (0..batch)
        .map(|_| {
            let ep = &prepared[rng.gen_range(0..prepared.len())];
            let t_end = rng.gen_range(0..ep.len());
            ep.window(t_end, k)
        })
        .collect()
}

/// Behaviour cloning: `iterations * steps` Adam updates on MSE between
/// predicted and logged actions. `on_log` sees every telemetry entry.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    norm: &Normalizer,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<(Params, TrainOutcome)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    check_dimensions(ds, model_cfg)?;
    let prepared: Vec<PreparedEpisode> = ds.episodes.iter().map(|e| PreparedEpisode::new(e, norm)).collect();
    let mut params = Params::init(model_cfg, &mut rng_from(train_cfg.seed, &[INIT_STREAM]));
    let mut adam = Adam::new(&params);
    let total = train_cfg.total_updates();
    let mut outcome = TrainOutcome { log: Vec::new(), losses: Vec::with_capacity(total) };
    let start = Instant::now();
    let mut since_log = 0.0;
    let mut since_count = 0usize;
    for update in 0..total {
        let mut rng = rng_from(train_cfg.seed, &[BATCH_STREAM, update as u64]);
        let batch = sample_batch(&prepared, model_cfg.context_len, train_cfg.batch_size, &mut rng);
        let dropout: Option<&mut dyn rand::RngCore> = if model_cfg.dropout > 0.0 { Some(&mut rng) } else { None };
        let (loss, mut grads) = loss_and_grad(&params, model_cfg, &batch, train_cfg.loss_mode, dropout)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss became {loss} at update {update}")));
        }
        let grad_norm = clip_global_norm(&mut grads, train_cfg.grad_clip);
        let lr = learning_rate(train_cfg, update);
        adam.step(&mut params, &grads, lr);
        params.quantize();
        outcome.losses.push(loss);
        since_log += loss;
        since_count += 1;
        let last = update + 1 == total;
        if (train_cfg.log_every > 0 && (update + 1) % train_cfg.log_every == 0) || last {
            let entry = LogEntry {
                update: update + 1,
                loss: since_log / since_count as f64,
                learning_rate: lr,
                grad_norm,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            on_log(&entry);
            outcome.log.push(entry);
            since_log = 0.0;
            since_count = 0;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("parameters became non-finite".into()));
    }
    Ok((params, outcome))
}

/// Train on `ds` with the model and training sections of `cfg` and package
/// the result with its normalizer and provenance hashes.
pub fn fit(cfg: &RunConfig, ds: &Dataset, on_log: impl FnMut(&LogEntry)) -> Result<(DtModel, TrainOutcome)> {
    let norm = Normalizer::from_dataset(ds, &cfg.world);
    let (params, outcome) = train(ds, &cfg.model, &cfg.train, &norm, on_log)?;
    let model = DtModel {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        norm,
        params,
        config_hash: cfg.hash(),
        dataset_hash: ds.manifest.hash(),
        final_loss: outcome.log.last().map_or(f64::NAN, |e| e.loss),
    };
    Ok((model, outcome))
}

/// Mean squared action error over every window of every episode (each
/// window ending at each timestep), in the given loss mode.
pub fn dataset_mse(
    params: &Params,
    cfg: &ModelConfig,
    norm: &Normalizer,
    episodes: &[EpisodeRecord],
    mode: LossMode,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        let prep = PreparedEpisode::new(ep, norm);
        let windows: Vec<Window> = (0..prep.len()).map(|t| prep.window(t, cfg.context_len)).collect();
        for chunk in windows.chunks(64) {
            let cache = forward(params, cfg, chunk, None)?;
            let (l, _) = mse(&cache.outputs, chunk, mode)?;
            let n = super::net::loss_mask(chunk, mode).iter().filter(|&&m| m).count();
            sum += l * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no episodes to score".into()));
    }
    Ok(sum / count as f64)
}

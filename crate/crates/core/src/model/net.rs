//! Forward and backward passes of the sequence model.
//!
//! Tokens are laid out per timestep as `(state, previous action, return)`;
//! all three share the timestep's positional row. The action head reads the
//! return token, so the prediction at timestep `t` sees `s_t`, the action
//! that led to it and the return still to collect, and never anything later.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::params::*;
use crate::config::{LossMode, ModelConfig};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// One context window, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `L x state_dim`, standardized.
    pub states: Array2<f64>,
    /// `L x action_dim`: the action taken before each state, scaled to
    /// `[-1, 1]`; zero at the first timestep of an episode.
    pub prev_actions: Array2<f64>,
    /// Scaled returns-to-go, one per timestep.
    pub rtgs: Vec<f64>,
    /// Positional row per timestep.
    pub timesteps: Vec<usize>,
    /// Raw target actions per timestep, `L x action_dim`.
    pub targets: Option<Array2<f64>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.rtgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtgs.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        3 * self.len()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    att: Array2<f64>,
    /// Per window, per head attention weights.
    probs: Vec<Vec<Array2<f64>>>,
    attn_mask: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    f: Array2<f64>,
    /// `gelu_tanh(f)`, reused by the backward pass.
    ft: Array2<f64>,
    g: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Everything the backward pass needs.
pub struct Cache {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    embed_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    /// `3 * sum(L) x embed_dim` final hidden state of every token, in
    /// (state, action, return) order per timestep.
    pub tokens: Array2<f64>,
    /// `sum(L) x action_dim` head outputs.
    pub outputs: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty");
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns `dx` and accumulates `dg`, `db`.
fn layer_norm_back(dy: &Array2<f64>, cache: &LnCache, g: &Array2<f64>, dg: &mut Array2<f64>, db: &mut Array2<f64>) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let m1 = dxhat.mean_axis(Axis(1)).expect("non-empty");
    let m2 = (&dxhat * &cache.xhat).mean_axis(Axis(1)).expect("non-empty");
    let mut dx = dxhat - &m1.insert_axis(Axis(1)) - &(&cache.xhat * &m2.insert_axis(Axis(1)));
    dx *= &cache.rstd.view().insert_axis(Axis(1));
    dx
}

/// `tanh` through one `exp`; about three times faster than `f64::tanh`
/// and within a few ulps of it.
fn tanh(x: f64) -> f64 {
    let e = (2.0 * x.clamp(-20.0, 20.0)).exp();
    1.0 - 2.0 / (e + 1.0)
}

/// The inner `tanh` of the GELU approximation.
fn gelu_tanh(x: f64) -> f64 {
    tanh(GELU_C * (x + 0.044715 * x * x * x))
}

/// GELU derivative given `x` and its `gelu_tanh`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Causal multi-head attention over one window's rows of `qkv`.
fn attend(qkv: ArrayView2<f64>, d: usize, n_heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let n = qkv.nrows();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
        let mut p = q.dot(&k.t()) * scale;
        for i in 0..n {
            let row = &mut p.row_mut(i);
            let max = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                if j <= i {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                } else {
                    row[j] = 0.0;
                }
            }
            for j in 0..=i {
                row[j] /= sum;
            }
        }
        out.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&p.dot(&v));
        probs.push(p);
    }
    (out, probs)
}

fn attend_back(qkv: ArrayView2<f64>, probs: &[Array2<f64>], datt: ArrayView2<f64>, d: usize) -> Array2<f64> {
    let n_heads = probs.len();
    let n = qkv.nrows();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dqkv = Array2::zeros((n, 3 * d));
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
        let dout = datt.slice(s![.., h * hd..(h + 1) * hd]);
        let dp = dout.dot(&v.t());
        let dv = p.t().dot(&dout);
        let rowdot = (&dp * p).sum_axis(Axis(1));
        let ds = (dp - &rowdot.insert_axis(Axis(1))) * p * scale;
        dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&ds.t().dot(&q));
        dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
    }
    dqkv
}

fn stack(blocks: impl Iterator<Item = Array2<f64>>, cols: usize) -> Array2<f64> {
    let parts: Vec<Array2<f64>> = blocks.collect();
    if parts.is_empty() {
        return Array2::zeros((0, cols));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Token rows of each kind: state rows, action rows, return rows. Windows
/// are packed back to back, so token row `r` belongs to timestep `r / 3` of
/// the flattened batch.
fn token_rows(lens: &[usize], offsets: &[usize]) -> [Vec<usize>; 3] {
    let total: usize = lens.iter().sum();
    let mut rows = [Vec::with_capacity(total), Vec::with_capacity(total), Vec::with_capacity(total)];
    for (b, &len) in lens.iter().enumerate() {
        for i in 0..len {
            for (k, r) in rows.iter_mut().enumerate() {
                r.push(offsets[b] + 3 * i + k);
            }
        }
    }
    rows
}

/// Run the model on a batch of windows. `dropout` supplies the random source
/// for training-time dropout; pass `None` for inference.
pub fn forward(
    params: &Params,
    cfg: &ModelConfig,
    batch: &[Window],
    mut dropout: Option<&mut dyn rand::RngCore>,
) -> Result<Cache> {
    let d = cfg.embed_dim;
    let t = &params.tensors;
    let lens: Vec<usize> = batch.iter().map(Window::len).collect();
    if lens.iter().any(|&l| l == 0 || l > cfg.context_len) {
        return Err(Error::InvalidInput(format!("window lengths {lens:?} outside 1..={}", cfg.context_len)));
    }
    for w in batch {
        if w.states.ncols() != cfg.state_dim || w.prev_actions.ncols() != cfg.action_dim {
            return Err(Error::InvalidInput(format!(
                "window has state width {} and action width {}, model expects {} and {}",
                w.states.ncols(),
                w.prev_actions.ncols(),
                cfg.state_dim,
                cfg.action_dim
            )));
        }
    }
    let mut offsets = Vec::with_capacity(batch.len());
    let mut acc = 0;
    for &l in &lens {
        offsets.push(acc);
        acc += 3 * l;
    }
    let n_rows = acc;
    let rows = token_rows(&lens, &offsets);

    let states = stack(batch.iter().map(|w| w.states.clone()), cfg.state_dim);
    let actions = stack(batch.iter().map(|w| w.prev_actions.clone()), cfg.action_dim);
    let rtgs = Array2::from_shape_vec(
        (rows[2].len(), 1),
        batch.iter().flat_map(|w| w.rtgs.iter().copied()).collect(),
    )
    .expect("one return per timestep");
    let embedded = [
        states.dot(&t[EMBED_STATE_W]) + &t[EMBED_STATE_B],
        actions.dot(&t[EMBED_ACTION_W]) + &t[EMBED_ACTION_B],
        rtgs.dot(&t[EMBED_RTG_W]) + &t[EMBED_RTG_B],
    ];
    let steps: Vec<usize> =
        batch.iter().flat_map(|w| w.timesteps.iter().map(|&s| s.min(cfg.max_timestep - 1))).collect();
    let mut x = Array2::zeros((n_rows, d));
    for (kind, e) in embedded.iter().enumerate() {
        for (r, &row) in rows[kind].iter().enumerate() {
            let mut dst = x.row_mut(row);
            dst.assign(&e.row(r));
            dst += &t[TIMESTEP].row(steps[r]);
        }
    }
    let p_drop = cfg.dropout;
    let mut mask_for = |shape| match dropout.as_deref_mut() {
        Some(rng) if p_drop > 0.0 => Some(dropout_mask(shape, p_drop, rng)),
        _ => None,
    };
    let embed_mask = mask_for((n_rows, d));
    if let Some(m) = &embed_mask {
        x *= m;
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |k| &t[block_index(l, k)];
        let (h1, ln1) = layer_norm(&x, p(LN1_G), p(LN1_B));
        let qkv = h1.dot(p(W_QKV)) + p(B_QKV);
        let per_window: Vec<(Array2<f64>, Vec<Array2<f64>>)> = offsets
            .par_iter()
            .zip(lens.par_iter())
            .map(|(&o, &len)| attend(qkv.slice(s![o..o + 3 * len, ..]), d, cfg.n_heads))
            .collect();
        let mut att = Array2::zeros((n_rows, d));
        let mut probs = Vec::with_capacity(batch.len());
        for ((o, len), (out, pr)) in offsets.iter().zip(&lens).zip(per_window) {
            att.slice_mut(s![*o..*o + 3 * len, ..]).assign(&out);
            probs.push(pr);
        }
        let mut a = att.dot(p(W_PROJ)) + p(B_PROJ);
        let attn_mask = mask_for((n_rows, d));
        if let Some(m) = &attn_mask {
            a *= m;
        }
        x += &a;
        let (h2, ln2) = layer_norm(&x, p(LN2_G), p(LN2_B));
        let f = h2.dot(p(W_FC1)) + p(B_FC1);
        let ft = f.mapv(gelu_tanh);
        let mut g = f.clone();
        ndarray::Zip::from(&mut g).and(&ft).for_each(|x, &t| *x = 0.5 * *x * (1.0 + t));
        let mut m = g.dot(p(W_FC2)) + p(B_FC2);
        let ffn_mask = mask_for((n_rows, d));
        if let Some(mk) = &ffn_mask {
            m *= mk;
        }
        x += &m;
        layers.push(LayerCache { ln1, h1, qkv, att, probs, attn_mask, ln2, h2, f, ft, g, ffn_mask });
    }
    let (xf, lnf) = layer_norm(&x, &t[lnf_g(cfg)], &t[lnf_b(cfg)]);
    let hf = xf.select(Axis(0), &rows[2]);
    let scale = ACTION_BOUND;
    let outputs = (hf.dot(&t[head_w(cfg)]) + &t[head_b(cfg)]).mapv(|z| scale * tanh(z));
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model produced a non-finite prediction".into()));
    }
    Ok(Cache { offsets, lens, embed_mask, layers, lnf, hf, tokens: xf, outputs })
}

/// The head emits `ACTION_BOUND * tanh(z)`, so every prediction lies in
/// `[-ACTION_BOUND, ACTION_BOUND]`.
pub const ACTION_BOUND: f64 = 1.5;

/// Gradients of every tensor given `d_outputs`, the loss gradient with
/// respect to the head outputs.
pub fn backward(params: &Params, cfg: &ModelConfig, batch: &[Window], cache: &Cache, d_outputs: &Array2<f64>) -> Params {
    let d = cfg.embed_dim;
    let t = &params.tensors;
    let mut grads = Params::zeros(cfg);
    let g = &mut grads.tensors;
    let scale = ACTION_BOUND;
    let n_rows: usize = cache.lens.iter().sum::<usize>() * 3;
    let rows = token_rows(&cache.lens, &cache.offsets);

    let dz = d_outputs * &cache.outputs.mapv(|y| {
        let th = y / scale;
        scale * (1.0 - th * th)
    });
    g[head_w(cfg)] += &cache.hf.t().dot(&dz);
    g[head_b(cfg)] += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dhf = dz.dot(&t[head_w(cfg)].t());
    let mut dxf = Array2::zeros((n_rows, d));
    for (r, &row) in rows[2].iter().enumerate() {
        dxf.row_mut(row).assign(&dhf.row(r));
    }
    let (gi, bi) = (lnf_g(cfg), lnf_b(cfg));
    let (mut dgf, mut dbf) = (Array2::zeros((1, d)), Array2::zeros((1, d)));
    let mut dx = layer_norm_back(&dxf, &cache.lnf, &t[gi], &mut dgf, &mut dbf);
    g[gi] += &dgf;
    g[bi] += &dbf;

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let idx = |k| block_index(l, k);
        // Feedforward branch.
        let mut dm = dx.clone();
        if let Some(mk) = &lc.ffn_mask {
            dm *= mk;
        }
        g[idx(W_FC2)] += &lc.g.t().dot(&dm);
        g[idx(B_FC2)] += &dm.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dg_act = dm.dot(&t[idx(W_FC2)].t());
        let mut df = dg_act;
        ndarray::Zip::from(&mut df).and(&lc.f).and(&lc.ft).for_each(|d, &x, &t| *d *= gelu_grad(x, t));
        g[idx(W_FC1)] += &lc.h2.t().dot(&df);
        g[idx(B_FC1)] += &df.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dh2 = df.dot(&t[idx(W_FC1)].t());
        let (mut dg2, mut db2) = (Array2::zeros((1, d)), Array2::zeros((1, d)));
        dx += &layer_norm_back(&dh2, &lc.ln2, &t[idx(LN2_G)], &mut dg2, &mut db2);
        g[idx(LN2_G)] += &dg2;
        g[idx(LN2_B)] += &db2;

        // Attention branch.
        let mut da = dx.clone();
        if let Some(mk) = &lc.attn_mask {
            da *= mk;
        }
        g[idx(W_PROJ)] += &lc.att.t().dot(&da);
        g[idx(B_PROJ)] += &da.sum_axis(Axis(0)).insert_axis(Axis(0));
        let datt = da.dot(&t[idx(W_PROJ)].t());
        let per_window: Vec<Array2<f64>> = cache
            .offsets
            .par_iter()
            .zip(cache.lens.par_iter())
            .zip(lc.probs.par_iter())
            .map(|((&o, &len), probs)| {
                let r = o..o + 3 * len;
                attend_back(lc.qkv.slice(s![r.clone(), ..]), probs, datt.slice(s![r, ..]), d)
            })
            .collect();
        let mut dqkv = Array2::zeros((n_rows, 3 * d));
        for ((o, len), part) in cache.offsets.iter().zip(&cache.lens).zip(per_window) {
            dqkv.slice_mut(s![*o..*o + 3 * len, ..]).assign(&part);
        }
        g[idx(W_QKV)] += &lc.h1.t().dot(&dqkv);
        g[idx(B_QKV)] += &dqkv.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dh1 = dqkv.dot(&t[idx(W_QKV)].t());
        let (mut dg1, mut db1) = (Array2::zeros((1, d)), Array2::zeros((1, d)));
        dx += &layer_norm_back(&dh1, &lc.ln1, &t[idx(LN1_G)], &mut dg1, &mut db1);
        g[idx(LN1_G)] += &dg1;
        g[idx(LN1_B)] += &db1;
    }

    if let Some(m) = &cache.embed_mask {
        dx *= m;
    }
    let steps: Vec<usize> =
        batch.iter().flat_map(|w| w.timesteps.iter().map(|&s| s.min(cfg.max_timestep - 1))).collect();
    let inputs = [
        (stack(batch.iter().map(|w| w.states.clone()), cfg.state_dim), EMBED_STATE_W, EMBED_STATE_B),
        (stack(batch.iter().map(|w| w.prev_actions.clone()), cfg.action_dim), EMBED_ACTION_W, EMBED_ACTION_B),
        (
            Array2::from_shape_vec((rows[2].len(), 1), batch.iter().flat_map(|w| w.rtgs.iter().copied()).collect())
                .expect("one return per timestep"),
            EMBED_RTG_W,
            EMBED_RTG_B,
        ),
    ];
    for (kind, (input, wi, bi)) in inputs.iter().enumerate() {
        let de = dx.select(Axis(0), &rows[kind]);
        g[*wi] += &input.t().dot(&de);
        g[*bi] += &de.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    // Token rows are visited in a fixed order, so the sums are reproducible.
    for row in 0..n_rows {
        let step = steps[row / 3];
        let mut dst = g[TIMESTEP].row_mut(step);
        dst += &dx.row(row);
    }
    grads
}

/// Which timesteps contribute to the loss.
pub fn loss_mask(batch: &[Window], mode: LossMode) -> Vec<bool> {
    batch
        .iter()
        .flat_map(|w| {
            let n = w.len();
            (0..n).map(move |i| match mode {
                LossMode::AllPositions => true,
                LossMode::LastOnly => i + 1 == n,
            })
        })
        .collect()
}

/// Mean squared error over the selected timesteps and every action
/// component, plus its gradient with respect to the head outputs.
pub fn mse(outputs: &Array2<f64>, batch: &[Window], mode: LossMode) -> Result<(f64, Array2<f64>)> {
    let mask = loss_mask(batch, mode);
    let mut targets = Vec::with_capacity(outputs.len());
    for w in batch {
        let tg = w.targets.as_ref().ok_or_else(|| Error::InvalidInput("window has no targets".into()))?;
        targets.extend(tg.iter().copied());
    }
    let targets = Array2::from_shape_vec(outputs.raw_dim(), targets)
        .map_err(|_| Error::InvalidInput("target shape does not match predictions".into()))?;
    let count = mask.iter().filter(|&&m| m).count() * outputs.ncols();
    if count == 0 {
        return Err(Error::InvalidInput("no positions selected for the loss".into()));
    }
    let mut diff = outputs - &targets;
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            diff.row_mut(r).fill(0.0);
        }
    }
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / count as f64;
    let grad = diff * (2.0 / count as f64);
    Ok((loss, grad))
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grad(
    params: &Params,
    cfg: &ModelConfig,
    batch: &[Window],
    mode: LossMode,
    dropout: Option<&mut dyn rand::RngCore>,
) -> Result<(f64, Params)> {
    let cache = forward(params, cfg, batch, dropout)?;
    let (loss, d_out) = mse(&cache.outputs, batch, mode)?;
    let grads = backward(params, cfg, batch, &cache, &d_out);
    Ok((loss, grads))
}

/// Loss only, without dropout.
pub fn loss(params: &Params, cfg: &ModelConfig, batch: &[Window], mode: LossMode) -> Result<f64> {
    let cache = forward(params, cfg, batch, None)?;
    Ok(mse(&cache.outputs, batch, mode)?.0)
}

/// Predictions at every timestep of a single window, `L x action_dim`.
pub fn predict(params: &Params, cfg: &ModelConfig, window: &Window) -> Result<Array2<f64>> {
    Ok(forward(params, cfg, std::slice::from_ref(window), None)?.outputs)
}

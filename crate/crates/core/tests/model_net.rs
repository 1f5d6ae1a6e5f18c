mod common;

use aimdt::config::LossMode;
use aimdt::model::{forward, loss_and_grad, mse, predict, tensor_specs, Params, Window, ACTION_BOUND};
use common::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_finite_differences() {
    let cfg = micro_config();
    let params = random_params(&cfg, 3);
    let batch = random_batch(&cfg, 4);
    for mode in [LossMode::AllPositions, LossMode::LastOnly] {
        let (err, name) = gradient_check(&cfg, &params, &batch, mode, 1e-3);
        assert!(err < 1e-4, "{mode:?}: {name} relative error {err}");
    }
}

#[test]
fn gradients_match_with_two_layers_and_more_heads() {
    let mut cfg = micro_config();
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    let params = random_params(&cfg, 8);
    let batch = random_batch(&cfg, 9);
    let (err, name) = gradient_check(&cfg, &params, &batch, LossMode::AllPositions, 1e-3);
    assert!(err < 1e-4, "{name} relative error {err}");
}

#[test]
fn dropout_gradients_match_with_a_fixed_mask() {
    let mut cfg = micro_config();
    cfg.dropout = 0.2;
    let params = random_params(&cfg, 5);
    let batch = random_batch(&cfg, 6);
    let f = |p: &Params| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        loss_and_grad(p, &cfg, &batch, LossMode::AllPositions, Some(&mut rng)).unwrap()
    };
    let (_, grads) = f(&params);
    let h = 1e-3;
    for (ti, (name, _)) in tensor_specs(&cfg).iter().enumerate() {
        let mut p = params.clone();
        for k in [0, p.tensors[ti].len() / 2] {
            let orig = p.tensors[ti].as_slice().unwrap()[k];
            p.tensors[ti].as_slice_mut().unwrap()[k] = orig + h;
            let up = f(&p).0;
            p.tensors[ti].as_slice_mut().unwrap()[k] = orig - h;
            let down = f(&p).0;
            p.tensors[ti].as_slice_mut().unwrap()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads.tensors[ti].as_slice().unwrap()[k];
            assert!((num - ana).abs() <= 1e-6 + 1e-4 * num.abs().max(ana.abs()), "{name}[{k}]: {ana} vs {num}");
        }
    }
}

#[test]
fn causal_mask_hides_later_tokens() {
    let cfg = micro_config();
    let params = random_params(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let base = random_window(&cfg, cfg.context_len, 0, &mut rng);
    let out = predict(&params, &cfg, &base).unwrap();
    // Perturbing timestep j's tokens may only change predictions at j and
    // later (the head reads the last token of each timestep).
    for j in 0..cfg.context_len {
        for kind in 0..3 {
            let mut w = base.clone();
            match kind {
                0 => w.states.row_mut(j).mapv_inplace(|x| x + 1.0),
                1 => w.prev_actions.row_mut(j).mapv_inplace(|x| -x + 0.3),
                _ => w.rtgs[j] += 2.0,
            }
            let o = predict(&params, &cfg, &w).unwrap();
            for i in 0..j {
                for a in 0..cfg.action_dim {
                    assert!((o[[i, a]] - out[[i, a]]).abs() < 1e-12);
                }
            }
            let changed = (0..cfg.action_dim).any(|a| (o[[j, a]] - out[[j, a]]).abs() > 1e-9);
            assert!(changed, "perturbing timestep {j} kind {kind} did not reach its own prediction");
        }
    }
}

#[test]
fn zero_head_predicts_zero() {
    let cfg = micro_config();
    let params = Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_window(&cfg, 3, 0, &mut rng);
    assert!(predict(&params, &cfg, &w).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn outputs_stay_within_the_action_bound() {
    let cfg = micro_config();
    let mut params = random_params(&cfg, 21);
    let n = tensor_specs(&cfg).len();
    params.tensors[n - 2].mapv_inplace(|x| 400.0 * x);
    let batch = random_batch(&cfg, 22);
    let c = forward(&params, &cfg, &batch, None).unwrap();
    assert!(c.outputs.iter().all(|v| v.abs() <= ACTION_BOUND));
    assert!(c.outputs.iter().any(|v| v.abs() > 1.49));
}

#[test]
fn mse_examples() {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = random_window(&cfg, 3, 0, &mut rng);
    let t = Array2::from_shape_fn((3, 2), |(i, j)| if (i + j) % 2 == 0 { 1.5 } else { -1.5 });
    w.targets = Some(t.clone());
    let batch = vec![w];
    let (l, _) = mse(&Array2::zeros((3, 2)), &batch, LossMode::AllPositions).unwrap();
    assert!((l - 2.25).abs() < 1e-12);
    let (l, g) = mse(&t, &batch, LossMode::AllPositions).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
    let mut pred = Array2::zeros((3, 2));
    pred[[0, 0]] = 1.5;
    let (l, _) = mse(&pred, &batch, LossMode::LastOnly).unwrap();
    assert!((l - 2.25).abs() < 1e-12);
}

#[test]
fn windows_are_independent_within_a_batch() {
    let cfg = micro_config();
    let params = random_params(&cfg, 31);
    let batch = random_batch(&cfg, 32);
    let joint = forward(&params, &cfg, &batch, None).unwrap().outputs;
    let mut row = 0;
    for w in &batch {
        let alone = predict(&params, &cfg, w).unwrap();
        for i in 0..w.len() {
            for a in 0..cfg.action_dim {
                assert!((joint[[row + i, a]] - alone[[i, a]]).abs() < 1e-12);
            }
        }
        row += w.len();
    }
}

#[test]
fn rejects_bad_windows() {
    let cfg = micro_config();
    let params = random_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let long = random_window(&cfg, cfg.context_len + 1, 0, &mut rng);
    assert!(forward(&params, &cfg, &[long], None).is_err());
    let mut narrow = random_window(&cfg, 2, 0, &mut rng);
    narrow.states = Array2::zeros((2, 5));
    assert!(forward(&params, &cfg, &[narrow], None).is_err());
    let empty = Window {
        states: Array2::zeros((0, 12)),
        prev_actions: Array2::zeros((0, 2)),
        rtgs: vec![],
        timesteps: vec![],
        targets: None,
    };
    assert!(forward(&params, &cfg, &[empty], None).is_err());
}

/// Scalar re-implementation of the whole network, written from the
/// architecture description with plain loops.
fn naive_forward(p: &Params, cfg: &aimdt::config::ModelConfig, w: &Window) -> Vec<Vec<f64>> {
    let d = cfg.embed_dim;
    let names: Vec<String> = tensor_specs(cfg).into_iter().map(|(n, _)| n).collect();
    let get = |name: &str| &p.tensors[names.iter().position(|n| n == name).unwrap()];
    let lin = |x: &[f64], wname: &str, bname: &str| -> Vec<f64> {
        let wt = get(wname);
        let b = get(bname);
        (0..wt.ncols()).map(|j| b[[0, j]] + (0..x.len()).map(|i| x[i] * wt[[i, j]]).sum::<f64>()).collect()
    };
    let ln = |x: &[f64], g: &str, b: &str| -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        let (g, b) = (get(g), get(b));
        (0..x.len()).map(|i| (x[i] - m) / (v + 1e-5).sqrt() * g[[0, i]] + b[[0, i]]).collect()
    };
    let mut toks: Vec<Vec<f64>> = Vec::new();
    for t in 0..w.len() {
        let pos = get("timestep").row(w.timesteps[t]).to_vec();
        let s = lin(&w.states.row(t).to_vec(), "embed_state.w", "embed_state.b");
        let a = lin(&w.prev_actions.row(t).to_vec(), "embed_action.w", "embed_action.b");
        let r = lin(&[w.rtgs[t]], "embed_rtg.w", "embed_rtg.b");
        for e in [s, a, r] {
            toks.push(e.iter().zip(&pos).map(|(x, y)| x + y).collect());
        }
    }
    let n = toks.len();
    let hd = d / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let nm = |k: &str| format!("block{l}.{k}");
        let h: Vec<Vec<f64>> = toks.iter().map(|x| ln(x, &nm("ln1_g"), &nm("ln1_b"))).collect();
        let qkv: Vec<Vec<f64>> = h.iter().map(|x| lin(x, &nm("w_qkv"), &nm("b_qkv"))).collect();
        let mut att = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            for i in 0..n {
                let score = |j: usize| {
                    (0..hd).map(|c| qkv[i][head * hd + c] * qkv[j][d + head * hd + c]).sum::<f64>() / (hd as f64).sqrt()
                };
                let sc: Vec<f64> = (0..=i).map(score).collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = sc.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for c in 0..hd {
                    att[i][head * hd + c] = (0..=i).map(|j| ex[j] / z * qkv[j][2 * d + head * hd + c]).sum();
                }
            }
        }
        for i in 0..n {
            let a = lin(&att[i], &nm("w_proj"), &nm("b_proj"));
            for c in 0..d {
                toks[i][c] += a[c];
            }
            let h2 = ln(&toks[i], &nm("ln2_g"), &nm("ln2_b"));
            let f = lin(&h2, &nm("w_fc1"), &nm("b_fc1"));
            let g: Vec<f64> = f
                .iter()
                .map(|&x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                .collect();
            let m = lin(&g, &nm("w_fc2"), &nm("b_fc2"));
            for c in 0..d {
                toks[i][c] += m[c];
            }
        }
    }
    (0..w.len())
        .map(|t| {
            let h = ln(&toks[3 * t + 2], "ln_f.g", "ln_f.b");
            lin(&h, "head.w", "head.b").iter().map(|z| ACTION_BOUND * z.tanh()).collect()
        })
        .collect()
}

#[test]
fn matches_scalar_reference_forward() {
    let mut tiny = micro_config();
    tiny.n_heads = 1;
    tiny.embed_dim = 4;
    let mut deeper = micro_config();
    deeper.n_layers = 2;
    for (cfg, len) in [(tiny, 2), (deeper, 4)] {
        let params = random_params(&cfg, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = random_window(&cfg, len, 1, &mut rng);
        let fast = predict(&params, &cfg, &w).unwrap();
        let slow = naive_forward(&params, &cfg, &w);
        for t in 0..len {
            for a in 0..cfg.action_dim {
                assert!((fast[[t, a]] - slow[t][a]).abs() < 1e-6, "t={t} a={a}");
            }
        }
    }
}

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Tensors per transformer block, in storage order.
pub const BLOCK_TENSORS: [&str; 12] =
    ["ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_proj", "b_proj", "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2"];

pub(crate) const EMBED_STATE_W: usize = 0;
pub(crate) const EMBED_STATE_B: usize = 1;
pub(crate) const EMBED_ACTION_W: usize = 2;
pub(crate) const EMBED_ACTION_B: usize = 3;
pub(crate) const EMBED_RTG_W: usize = 4;
pub(crate) const EMBED_RTG_B: usize = 5;
pub(crate) const TIMESTEP: usize = 6;
const FIRST_BLOCK: usize = 7;

pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const W_QKV: usize = 2;
pub(crate) const B_QKV: usize = 3;
pub(crate) const W_PROJ: usize = 4;
pub(crate) const B_PROJ: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W_FC1: usize = 8;
pub(crate) const B_FC1: usize = 9;
pub(crate) const W_FC2: usize = 10;
pub(crate) const B_FC2: usize = 11;

/// Every model tensor as a 2-D array (vectors are stored as `1 x n`), in a
/// fixed order shared by the optimizer, gradients and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tensors: Vec<Array2<f64>>,
}

/// Index of block `layer`'s tensor `which` (one of the block constants).
pub(crate) fn block_index(layer: usize, which: usize) -> usize {
    FIRST_BLOCK + layer * BLOCK_TENSORS.len() + which
}

pub(crate) fn lnf_g(cfg: &ModelConfig) -> usize {
    FIRST_BLOCK + cfg.n_layers * BLOCK_TENSORS.len()
}

pub(crate) fn lnf_b(cfg: &ModelConfig) -> usize {
    lnf_g(cfg) + 1
}

pub(crate) fn head_w(cfg: &ModelConfig) -> usize {
    lnf_g(cfg) + 2
}

pub(crate) fn head_b(cfg: &ModelConfig) -> usize {
    lnf_g(cfg) + 3
}

/// Names and shapes of every tensor for `cfg`.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("embed_state.w".to_string(), [cfg.state_dim, d]),
        ("embed_state.b".to_string(), [1, d]),
        ("embed_action.w".to_string(), [cfg.action_dim, d]),
        ("embed_action.b".to_string(), [1, d]),
        ("embed_rtg.w".to_string(), [1, d]),
        ("embed_rtg.b".to_string(), [1, d]),
        ("timestep".to_string(), [cfg.max_timestep, d]),
    ];
    for l in 0..cfg.n_layers {
        let shapes = [
            [1, d],
            [1, d],
            [d, 3 * d],
            [1, 3 * d],
            [d, d],
            [1, d],
            [1, d],
            [1, d],
            [d, 4 * d],
            [1, 4 * d],
            [4 * d, d],
            [1, d],
        ];
        for (name, shape) in BLOCK_TENSORS.iter().zip(shapes) {
            out.push((format!("block{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.g".to_string(), [1, d]));
    out.push(("ln_f.b".to_string(), [1, d]));
    out.push(("head.w".to_string(), [d, cfg.action_dim]));
    out.push(("head.b".to_string(), [1, cfg.action_dim]));
    out
}

fn is_weight(name: &str) -> bool {
    let weight = name.ends_with(".w") || name.ends_with("w_qkv") || name.ends_with("w_fc1") || name == "timestep";
    weight && !name.starts_with("head")
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Params {
        Params { tensors: tensor_specs(cfg).into_iter().map(|(_, s)| Array2::zeros(s)).collect() }
    }

    /// GPT-style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2N)`, unit norm gains, zero biases and a zero action head (so
    /// a fresh model predicts zero acceleration everywhere).
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Params {
        let mut p = Params::zeros(cfg);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");
        for (i, (name, _)) in tensor_specs(cfg).iter().enumerate() {
            let t = &mut p.tensors[i];
            if name.ends_with("_g") || name.ends_with(".g") {
                t.fill(1.0);
            } else if name.ends_with("w_proj") || name.ends_with("w_fc2") {
                t.mapv_inplace(|_| resid.sample(rng));
            } else if is_weight(name) {
                t.mapv_inplace(|_| normal.sample(rng));
            }
        }
        p.quantize();
        p
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Round every value to single precision, the checkpoint representation.
    pub fn quantize(&mut self) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| f64::from(x as f32));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = tensor_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&self.tensors) {
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn micro() -> ModelConfig {
        ModelConfig {
            context_len: 4,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 8,
            state_dim: 12,
            action_dim: 2,
            dropout: 0.0,
            max_timestep: 16,
        }
    }

    #[test]
    fn layout_indices_match_specs() {
        let cfg = micro();
        let specs = tensor_specs(&cfg);
        assert_eq!(specs[block_index(1, W_FC2)].0, "block1.w_fc2");
        assert_eq!(specs[head_w(&cfg)].0, "head.w");
        assert_eq!(specs[lnf_b(&cfg)].0, "ln_f.b");
        assert_eq!(specs.len(), head_b(&cfg) + 1);
    }

    #[test]
    fn init_shapes_and_zero_head() {
        let cfg = micro();
        let p = Params::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        p.check_shapes(&cfg).unwrap();
        assert!(p.tensors[head_w(&cfg)].iter().all(|&x| x == 0.0));
        assert!(p.tensors[block_index(0, LN1_G)].iter().all(|&x| x == 1.0));
        assert!(p.tensors[EMBED_STATE_W].iter().any(|&x| x != 0.0));
        assert!(p.tensors[TIMESTEP].iter().any(|&x| x != 0.0));
        assert!(p.tensors[EMBED_RTG_W].iter().any(|&x| x != 0.0));
        assert!(p.tensors[EMBED_ACTION_W].iter().any(|&x| x != 0.0));
        assert!(p.tensors[block_index(1, W_PROJ)].iter().any(|&x| x != 0.0));
    }
}

//! The return-conditioned sequence model: network, training, rollout and
//! checkpoints.
mod checkpoint;
mod net;
mod params;
mod rollout;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, DtModel};
pub use net::{backward, forward, loss, loss_and_grad, loss_mask, mse, predict, Cache, Window, ACTION_BOUND};
pub use params::{tensor_specs, Params, BLOCK_TENSORS};
pub use rollout::{rollout, sentinel_features, DtPolicy, Rollout};
pub use train::{
    check_dimensions, clip_global_norm, dataset_mse, fit, learning_rate, tokenize_window, train, Adam, LogEntry, Normalizer,
    PreparedEpisode, TrainOutcome,
};

//! Numerical building blocks: dense matrices, LSTM with projection,
//! feed-forward layers, log-softmax and the Adam optimizer. Every layer has a
//! hand-derived backward pass.

mod adam;
mod dense;
mod lstm;
mod matrix;

pub use adam::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use dense::{
    ffn_linear_backward, ffn_linear_forward, ffn_tanh_backward, ffn_tanh_forward, log_add,
    log_softmax, log_sum_exp, sigmoid,
};
pub use lstm::{LstmCache, LstmCellState, LstmLayerParams, FORGET_BIAS_INIT};
pub use matrix::Matrix;

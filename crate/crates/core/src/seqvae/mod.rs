//! Sequence VAE: LSTM encoder `q(z|x)`, Double-LSTM decoder `p(x|z)` with
//! masked teacher forcing, generation and latent interpolation.

mod decoder;
mod encoder;
mod lstm;
mod params;

pub use decoder::{
    apply_mask, decode_logits, double_lstm_step, generate, initial_state, interpolate, latent_inputs,
    posterior_means, DecodeMode, DecoderState, LatentInputs,
};
pub use encoder::{bound_log_sigma, encode_posterior, reparameterize, LatentGaussian, LOG_SIGMA_BOUND};
pub use lstm::{lstm_cell, run_lstm, LstmRun};
pub use params::{param_shapes, AdversaryParams, DecoderParams, EncoderParams, Group, LstmParams, ModelDims, ModelParams};

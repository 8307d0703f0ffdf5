use crate::diffcore::{Graph, NodeId};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::seqvae::lstm::run_lstm;
use crate::seqvae::EncoderParams;
use crate::textdata::SequenceBatch;

pub const LOG_SIGMA_BOUND: f64 = 8.0;

/// `B·tanh(x/B)` with `B = LOG_SIGMA_BOUND`: bounded like a clamp, but the
/// gradient never vanishes, so a unit pushed past the bound can return.
pub fn bound_log_sigma<S: Scalar>(g: &mut Graph<S>, raw: NodeId) -> NodeId {
    let x = g.scale(raw, 1.0 / LOG_SIGMA_BOUND);
    let t = g.tanh(x);
    g.scale(t, LOG_SIGMA_BOUND)
}

/// Diagonal Gaussian `q(z|x)` for each row of a batch, all `(B, D)`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: NodeId,
    /// Bounded to `(-8, 8)` by [`bound_log_sigma`].
    pub log_sigma: NodeId,
    pub sigma: NodeId,
}

/// Runs the encoder LSTM over each sequence and maps its final non-pad
/// hidden state to `(μ, log σ)`.
pub fn encode_posterior<S: Scalar>(
    g: &mut Graph<S>,
    enc: &EncoderParams<NodeId>,
    batch: &SequenceBatch,
) -> Result<LatentGaussian> {
    let rows = batch.rows();
    let hidden = g.dims(enc.lstm.w_h)[0];
    let latent = g.dims(enc.head_w)[1] / 2;
    let steps = batch.lengths().iter().copied().max().unwrap_or(0);
    let active: Vec<Vec<bool>> = (0..steps)
        .map(|t| batch.lengths().iter().map(|&n| t < n).collect())
        .collect();
    let ids: Vec<usize> = batch.all_time_major()[..steps * rows].to_vec();
    let emb = g.gather(enc.emb, &ids)?;
    let x_proj = g.matmul(emb, enc.lstm.w_x)?;
    let run = run_lstm(g, x_proj, enc.lstm.w_h, enc.lstm.b, rows, steps, hidden, Some(&active))?;
    let out = g.matmul(run.last_h, enc.head_w)?;
    let bias = g.broadcast(enc.head_b, &[rows, 2 * latent])?;
    let out = g.add(out, bias)?;
    let mu = g.slice(out, 1, 0, latent)?;
    let raw = g.slice(out, 1, latent, latent)?;
    let log_sigma = bound_log_sigma(g, raw);
    let sigma = g.exp(log_sigma);
    Ok(LatentGaussian { mu, log_sigma, sigma })
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize<S: Scalar>(g: &mut Graph<S>, q: &LatentGaussian, eps: NodeId) -> Result<NodeId> {
    let noise = g.mul(q.sigma, eps)?;
    g.add(q.mu, noise)
}

//! The word-dropout adversary: per-position Gaussian scores from a causal
//! LSTM, exact-K smallest-score selection and the straight-through keep mask.

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqvae::{bound_log_sigma, run_lstm, AdversaryParams};
use crate::textdata::SequenceBatch;

/// Per-position score law `s_t ~ N(μ_t, σ_t²)`, each `(B, L)`.
#[derive(Clone, Debug)]
pub struct ScoreDistribution {
    pub mu: NodeId,
    pub log_sigma: NodeId,
    pub sigma: NodeId,
    /// Row-major `B × L` flags; only eligible positions can be dropped.
    pub eligible: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

impl ScoreDistribution {
    pub fn eligible_counts(&self) -> Vec<usize> {
        self.eligible
            .chunks(self.cols)
            .map(|r| r.iter().filter(|&&e| e).count())
            .collect()
    }
}

/// Which positions the adversary scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSpan {
    /// Decoder inputs `<sos>, x_1, …, x_{T-1}` (the maskable positions).
    DecoderInputs,
    /// Every token including `<eos>`; used by saliency readouts.
    FullSequence,
}

/// Runs the adversary LSTM left to right; position `t`'s score parameters
/// come from the hidden state after reading `x_t`, so they depend on
/// `x_{≤t}` only.
pub fn score_params<S: Scalar>(
    g: &mut Graph<S>,
    adv: &AdversaryParams<NodeId>,
    batch: &SequenceBatch,
    span: ScoreSpan,
) -> Result<ScoreDistribution> {
    let rows = batch.rows();
    let hidden = g.dims(adv.lstm.w_h)[0];
    let (cols, ids, eligible) = match span {
        ScoreSpan::DecoderInputs => (batch.input_width(), batch.inputs_time_major(), batch.eligible()),
        ScoreSpan::FullSequence => {
            let w = batch.width();
            let eligible = (0..rows)
                .flat_map(|b| {
                    let n = batch.lengths()[b];
                    (0..w).map(move |t| t < n)
                })
                .collect();
            (w, batch.all_time_major(), eligible)
        }
    };
    let emb = g.gather(adv.emb, &ids)?;
    let x_proj = g.matmul(emb, adv.lstm.w_x)?;
    let run = run_lstm(g, x_proj, adv.lstm.w_h, adv.lstm.b, rows, cols, hidden, None)?;
    let states = g.concat(&run.hidden_states, 0)?;
    let out = g.matmul(states, adv.head_w)?;
    let bias = g.broadcast(adv.head_b, &[rows * cols, 2])?;
    let out = g.add(out, bias)?;
    let mut per_row = |col: usize| -> Result<NodeId> {
        let v = g.slice(out, 1, col, 1)?;
        let v = g.reshape(v, &[cols, rows])?;
        g.transpose(v)
    };
    let mu = per_row(0)?;
    let raw = per_row(1)?;
    let log_sigma = bound_log_sigma(g, raw);
    let sigma = g.exp(log_sigma);
    Ok(ScoreDistribution {
        mu,
        log_sigma,
        sigma,
        eligible,
        rows,
        cols,
    })
}

/// `s = μ + σ ⊙ ε`.
pub fn sample_scores<S: Scalar>(g: &mut Graph<S>, dist: &ScoreDistribution, eps: NodeId) -> Result<NodeId> {
    let noise = g.mul(dist.sigma, eps)?;
    g.add(dist.mu, noise)
}

/// Number of drops for a row with `t` eligible positions:
/// `round(R·T)` with halves rounded away from zero, clamped to `[0, T]`.
pub fn compute_k(rate: f64, t: usize) -> usize {
    let k = (rate * t as f64).round();
    if k.is_nan() || k <= 0.0 {
        0
    } else {
        (k as usize).min(t)
    }
}

/// Drop decisions for a batch of decoder inputs.
#[derive(Clone, Debug)]
pub struct DropMask {
    /// `(B, L_in)` keep mask: binary in the forward pass, gradients follow
    /// `1 − soft`.
    pub keep: NodeId,
    pub hard: NodeId,
    /// Relaxed drop weights; row `b` sums to `k[b]`.
    pub soft: NodeId,
    pub scores: NodeId,
    pub dist: ScoreDistribution,
    pub k: Vec<usize>,
}

/// Samples scores, reverses their gradient and selects the `K` smallest
/// eligible scores per row for dropping. Noise comes from the graph stream
/// `noise_label`.
pub fn adversary_mask<S: Scalar>(
    g: &mut Graph<S>,
    adv: &AdversaryParams<NodeId>,
    batch: &SequenceBatch,
    rate: f64,
    tau: f64,
    noise_label: &str,
) -> Result<DropMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1]")));
    }
    let dist = score_params(g, adv, batch, ScoreSpan::DecoderInputs)?;
    let eps = g.normal(&[dist.rows, dist.cols], noise_label);
    let s = sample_scores(g, &dist, eps)?;
    let s = g.reverse_grad(s);
    let k: Vec<usize> = dist.eligible_counts().into_iter().map(|t| compute_k(rate, t)).collect();
    let hard = g.topk_keep(s, &k, &dist.eligible)?;
    let soft = g.relaxed_topk(s, &k, &dist.eligible, tau)?;
    let ones = g.constant(Tensor::ones(&[dist.rows, dist.cols]));
    let soft_keep = g.sub(ones, soft)?;
    let keep = g.straight_through(hard, soft_keep)?;
    Ok(DropMask {
        keep,
        hard,
        soft,
        scores: s,
        dist,
        k,
    })
}

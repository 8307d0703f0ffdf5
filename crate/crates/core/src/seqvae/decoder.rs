use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::diffcore::rng::StreamKey;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqvae::encoder::encode_posterior;
use crate::seqvae::lstm::lstm_cell;
use crate::seqvae::{DecoderParams, ModelParams};
use crate::textdata::{SequenceBatch, EOS, MSK, SOS};

/// Recurrent state of the Double-LSTM: shared output `h` and one cell per unit.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: NodeId,
    pub c1: NodeId,
    pub c2: NodeId,
}

/// Per-sequence latent contributions to both units' gates, `(B, 4H)` each,
/// biases included. `z` is fed to both units at every step.
#[derive(Clone, Copy, Debug)]
pub struct LatentInputs {
    pub unit1: NodeId,
    pub unit2: NodeId,
}

fn hidden_of<S: Scalar>(g: &Graph<S>, dec: &DecoderParams<NodeId>) -> usize {
    g.dims(dec.u1_w_h)[0]
}

/// Initial `(h, c1, c2)` as an affine map of `z` (`h` through tanh).
pub fn initial_state<S: Scalar>(g: &mut Graph<S>, dec: &DecoderParams<NodeId>, z: NodeId) -> Result<DecoderState> {
    let hidden = hidden_of(g, dec);
    let rows = g.dims(z)[0];
    let pre = g.matmul(z, dec.init_w)?;
    let b = g.broadcast(dec.init_b, &[rows, 3 * hidden])?;
    let pre = g.add(pre, b)?;
    let h = g.slice(pre, 1, 0, hidden)?;
    let h = g.tanh(h);
    let c1 = g.slice(pre, 1, hidden, hidden)?;
    let c2 = g.slice(pre, 1, 2 * hidden, hidden)?;
    Ok(DecoderState { h, c1, c2 })
}

pub fn latent_inputs<S: Scalar>(g: &mut Graph<S>, dec: &DecoderParams<NodeId>, z: NodeId) -> Result<LatentInputs> {
    let hidden = hidden_of(g, dec);
    let rows = g.dims(z)[0];
    let mut project = |w: NodeId, b: NodeId| -> Result<NodeId> {
        let p = g.matmul(z, w)?;
        let b = g.broadcast(b, &[rows, 4 * hidden])?;
        g.add(p, b)
    };
    Ok(LatentInputs {
        unit1: project(dec.u1_w_z, dec.u1_b)?,
        unit2: project(dec.u2_w_z, dec.u2_b)?,
    })
}

/// One Double-LSTM step.
///
/// Unit 1 sees only `(z, h)`; unit 2 sees `(z, unit-1 output, w)` where
/// `w_proj = w · W_x` is the projected (possibly masked) input embedding.
/// Returns the new state and unit 1's output.
pub fn double_lstm_step<S: Scalar>(
    g: &mut Graph<S>,
    dec: &DecoderParams<NodeId>,
    state: DecoderState,
    latent: LatentInputs,
    w_proj: NodeId,
) -> Result<(DecoderState, NodeId)> {
    let hidden = hidden_of(g, dec);
    let r1 = g.matmul(state.h, dec.u1_w_h)?;
    let gates1 = g.add(latent.unit1, r1)?;
    let (mid, c1) = lstm_cell(g, gates1, state.c1, hidden)?;
    let r2 = g.matmul(mid, dec.u2_w_h)?;
    let gates2 = g.add(latent.unit2, r2)?;
    let gates2 = g.add(gates2, w_proj)?;
    let (h, c2) = lstm_cell(g, gates2, state.c2, hidden)?;
    Ok((DecoderState { h, c1, c2 }, mid))
}

/// Decoder input embeddings, time-major `(L_in·B, E)`.
///
/// With a `(B, L_in)` keep mask `m`, position `t` embeds
/// `m[t]·emb(x_t) + (1 − m[t])·emb(<msk>)`.
pub fn apply_mask<S: Scalar>(
    g: &mut Graph<S>,
    emb: NodeId,
    batch: &SequenceBatch,
    keep: Option<NodeId>,
) -> Result<NodeId> {
    let ids = batch.inputs_time_major();
    let words = g.gather(emb, &ids)?;
    let Some(keep) = keep else {
        return Ok(words);
    };
    let (rows, steps) = (batch.rows(), batch.input_width());
    if g.dims(keep) != [rows, steps] {
        return Err(Error::DimMismatch {
            op: "apply_mask",
            left: g.dims(keep).to_vec(),
            right: vec![rows, steps],
        });
    }
    let n = ids.len();
    let e = g.dims(emb)[1];
    let masked = g.gather(emb, &vec![MSK; n])?;
    let keep_tm = g.transpose(keep)?;
    let keep_tm = g.reshape(keep_tm, &[n, 1])?;
    let ones = g.constant(Tensor::ones(&[n, 1]));
    let drop_tm = g.sub(ones, keep_tm)?;
    let keep_b = g.broadcast(keep_tm, &[n, e])?;
    let drop_b = g.broadcast(drop_tm, &[n, e])?;
    let kept = g.mul(keep_b, words)?;
    let dropped = g.mul(drop_b, masked)?;
    g.add(kept, dropped)
}

/// Teacher-forced logits `(L_in·B, V)`, time-major: row `t·B + b`
/// parameterizes `p(x_{t+1} | masked x_{≤t}, z)` for sequence `b`.
pub fn decode_logits<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<NodeId>,
    batch: &SequenceBatch,
    keep: Option<NodeId>,
    z: NodeId,
) -> Result<NodeId> {
    let dec = &params.decoder;
    let rows = batch.rows();
    let steps = batch.input_width();
    let inputs = apply_mask(g, params.decoder_embedding(), batch, keep)?;
    let x_proj = g.matmul(inputs, dec.u2_w_x)?;
    let latent = latent_inputs(g, dec, z)?;
    let mut state = initial_state(g, dec, z)?;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let w = g.slice(x_proj, 0, t * rows, rows)?;
        state = double_lstm_step(g, dec, state, latent, w)?.0;
        outputs.push(state.h);
    }
    let all = g.concat(&outputs, 0)?;
    output_logits(g, dec, all)
}

fn output_logits<S: Scalar>(g: &mut Graph<S>, dec: &DecoderParams<NodeId>, h: NodeId) -> Result<NodeId> {
    let rows = g.dims(h)[0];
    let vocab = g.dims(dec.out_w)[1];
    let logits = g.matmul(h, dec.out_w)?;
    let b = g.broadcast(dec.out_b, &[rows, vocab])?;
    g.add(logits, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Free-running generation from each row of `z` (`(B, D)`, given as f64
/// rows). Starts from `<sos>`, feeds back its own predictions without
/// masking and stops at `<eos>` or after `max_len` tokens. The returned
/// token lists exclude `<sos>` and include `<eos>` when it was produced.
pub fn generate<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    z: &[Vec<f64>],
    max_len: usize,
    mode: DecodeMode,
    key: StreamKey,
) -> Result<Vec<Vec<usize>>> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} must be at least 2")));
    }
    if let DecodeMode::Sample { temperature } = mode {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
    }
    let rows = z.len();
    let latent = params.dims().latent;
    let flat: Vec<f64> = z.iter().flatten().copied().collect();
    let z_t = Tensor::from_f64(&[rows, latent], &flat)?;

    let mut g = Graph::new(0);
    let p = params.attach_constant(&mut g);
    let dec = &p.decoder;
    let emb = p.decoder_embedding();
    let zn = g.constant(z_t);
    let lat = latent_inputs(&mut g, dec, zn)?;
    let mut state = initial_state(&mut g, dec, zn)?;
    let mut rng = key.rng();

    let mut current = vec![SOS; rows];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for _ in 0..max_len {
        let w = g.gather(emb, &current)?;
        let w = g.matmul(w, dec.u2_w_x)?;
        state = double_lstm_step(&mut g, dec, state, lat, w)?.0;
        let logits = output_logits(&mut g, dec, state.h)?;
        g.forward()?;
        let values = g.value(logits)?;
        let (_, vocab) = values.rows_cols();
        for b in 0..rows {
            let row: Vec<f64> = values.data()[b * vocab..(b + 1) * vocab].iter().map(|v| v.as_f64()).collect();
            let tok = match mode {
                DecodeMode::Greedy => argmax(&row),
                DecodeMode::Sample { temperature } => sample_token(&row, temperature, &mut rng)?,
            };
            current[b] = tok;
            if !done[b] {
                out[b].push(tok);
                done[b] = tok == EOS;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_token(row: &[f64], temperature: f64, rng: &mut impl rand::Rng) -> Result<usize> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Posterior means `μ_z` for each encoded sequence, as f64 rows.
pub fn posterior_means<S: Scalar>(params: &ModelParams<Tensor<S>>, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(0);
    let p = params.attach_constant(&mut g);
    let q = encode_posterior(&mut g, &p.encoder, batch)?;
    g.forward()?;
    let (rows, d) = g.value(q.mu)?.rows_cols();
    let mu = g.value(q.mu)?.to_f64_vec();
    Ok((0..rows).map(|b| mu[b * d..(b + 1) * d].to_vec()).collect())
}

/// Greedy decodes of `z_α = (1−α)·μ(a) + α·μ(b)` for
/// `α = k/(steps+1)`, `k = 0..=steps+1` (both endpoints included).
pub fn interpolate<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    a: &[usize],
    b: &[usize],
    steps: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("interpolation needs at least one step".into()));
    }
    let batch = SequenceBatch::new(&[a.to_vec(), b.to_vec()])?;
    let mu = posterior_means(params, &batch)?;
    let zs: Vec<Vec<f64>> = (0..=steps + 1)
        .map(|k| {
            let alpha = k as f64 / (steps + 1) as f64;
            mu[0].iter().zip(&mu[1]).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
        })
        .collect();
    generate(params, &zs, max_len, DecodeMode::Greedy, StreamKey::new(0, "interpolate"))
}

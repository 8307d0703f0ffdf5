//! Scalar training objectives: masked reconstruction, Gaussian KL terms,
//! the adversary's score regularizer and KL annealing.

use crate::adversary::ScoreDistribution;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqvae::{decode_logits, encode_posterior, reparameterize, LatentGaussian, ModelParams};
use crate::textdata::{SequenceBatch, PAD};

/// Loss values of one step, in nats per sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Negative reconstruction log-likelihood, summed over tokens.
    pub recon: f64,
    pub kl_latent: f64,
    pub reg_score: f64,
    pub beta: f64,
    /// `recon + beta·kl_latent + reg_score`.
    pub total: f64,
}

/// Graph handles of a reconstruction term.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    /// Batch-mean negative log-likelihood, `[1]`.
    pub mean: NodeId,
    /// Per-target log-likelihood, time-major `(L_in·B, 1)`; 0 at padding.
    pub token_ll: NodeId,
}

/// `−Σ_t log softmax(logits_t)[target_t]` over non-pad targets, averaged
/// over batch rows. `logits` are time-major as produced by
/// [`decode_logits`].
pub fn reconstruction_term<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    batch: &SequenceBatch,
) -> Result<Reconstruction> {
    let rows = batch.rows();
    let targets = batch.targets_time_major();
    let d = g.dims(logits).to_vec();
    if d.len() != 2 || d[0] != targets.len() {
        return Err(Error::DimMismatch {
            op: "reconstruction_term",
            left: d,
            right: vec![targets.len()],
        });
    }
    let vocab = d[1];
    let mut onehot = Tensor::<S>::zeros(&[targets.len(), vocab]);
    for (n, &tok) in targets.iter().enumerate() {
        let (t, b) = (n / rows, n % rows);
        if t + 1 < batch.lengths()[b] {
            if tok == PAD || tok >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "invalid target {tok} at row {b}, position {}",
                    t + 1
                )));
            }
            onehot.data_mut()[n * vocab + tok] = S::one();
        }
    }
    let onehot = g.constant(onehot);
    let lsm = g.log_softmax(logits);
    let picked = g.mul(lsm, onehot)?;
    let token_ll = g.sum_axis(picked, 1)?;
    let total = g.sum(token_ll);
    let mean = g.scale(total, -1.0 / rows as f64);
    Ok(Reconstruction { mean, token_ll })
}

/// Per-row negative log-likelihoods from an evaluated `token_ll` node.
pub fn row_nll<S: Scalar>(g: &Graph<S>, rec: &Reconstruction, rows: usize) -> Result<Vec<f64>> {
    let ll = g.value(rec.token_ll)?;
    let mut out = vec![0.0; rows];
    for (n, v) in ll.data().iter().enumerate() {
        out[n % rows] -= v.as_f64();
    }
    Ok(out)
}

/// `Σ_d ½(μ² + σ² − 1 − 2 ln σ)` per row of a `(B, D)` Gaussian, as a
/// `(B, 1)` node. Takes `log σ` directly.
pub fn kl_standard_rows<S: Scalar>(g: &mut Graph<S>, mu: NodeId, log_sigma: NodeId, sigma: NodeId) -> Result<NodeId> {
    let elems = kl_standard_elements(g, mu, log_sigma, sigma)?;
    g.sum_axis(elems, 1)
}

fn kl_standard_elements<S: Scalar>(g: &mut Graph<S>, mu: NodeId, log_sigma: NodeId, sigma: NodeId) -> Result<NodeId> {
    let mu2 = g.mul(mu, mu)?;
    let s2 = g.mul(sigma, sigma)?;
    let a = g.add(mu2, s2)?;
    let two_log = g.scale(log_sigma, 2.0);
    let b = g.sub(a, two_log)?;
    let ones = g.constant(Tensor::ones(g.dims(mu)));
    let c = g.sub(b, ones)?;
    Ok(g.scale(c, 0.5))
}

/// Batch-mean latent KL `KL(q(z|x) ‖ N(0, I))`, `[1]`.
pub fn latent_kl<S: Scalar>(g: &mut Graph<S>, q: &LatentGaussian) -> Result<NodeId> {
    let rows = g.dims(q.mu)[0];
    let per_row = kl_standard_rows(g, q.mu, q.log_sigma, q.sigma)?;
    let total = g.sum(per_row);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// `Σ_d ½(μ_d² + σ_d² − 1 − 2 ln σ_d)`.
pub fn kl_gaussian_standard(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::DimMismatch {
            op: "kl_gaussian_standard",
            left: vec![mu.len()],
            right: vec![sigma.len()],
        });
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("standard deviation {s} must be positive")));
        }
        kl += 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln());
    }
    Ok(kl)
}

/// `λ · Σ_i KL(N(μ_i, σ_i²) ‖ N(0, 1))` over eligible positions, averaged
/// over batch rows. Reads `μ, σ` directly, so its gradient reaches the
/// adversary with its natural sign.
pub fn score_regularizer<S: Scalar>(g: &mut Graph<S>, dist: &ScoreDistribution, lambda: f64) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be non-negative")));
    }
    let elems = kl_standard_elements(g, dist.mu, dist.log_sigma, dist.sigma)?;
    let mask: Vec<f64> = dist.eligible.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(Tensor::from_f64(&[dist.rows, dist.cols], &mask)?);
    let kept = g.mul(elems, mask)?;
    let total = g.sum(kept);
    Ok(g.scale(total, lambda / dist.rows as f64))
}

/// Linear KL warm-up: `min(1, step / warmup)`, and 1 without warm-up.
pub fn anneal_beta(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Graph handles of a (masked) single-sample ELBO.
#[derive(Clone, Copy, Debug)]
pub struct ElboNodes {
    pub q: LatentGaussian,
    pub z: NodeId,
    pub logits: NodeId,
    pub recon: Reconstruction,
    pub kl: NodeId,
    /// `recon + beta·kl`, the quantity to minimize.
    pub neg_elbo: NodeId,
}

/// Negative masked ELBO with one reparameterized draw of `z` taken from
/// the graph noise stream `z_label`. `keep` is an optional `(B, L_in)`
/// decoder-input mask.
pub fn masked_elbo<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<NodeId>,
    batch: &SequenceBatch,
    keep: Option<NodeId>,
    z_label: &str,
    beta: f64,
) -> Result<ElboNodes> {
    let q = encode_posterior(g, &params.encoder, batch)?;
    let eps = g.normal(&g.dims(q.mu).to_vec(), z_label);
    let z = reparameterize(g, &q, eps)?;
    let logits = decode_logits(g, params, batch, keep, z)?;
    let recon = reconstruction_term(g, logits, batch)?;
    let kl = latent_kl(g, &q)?;
    let weighted = g.scale(kl, beta);
    let neg_elbo = g.add(recon.mean, weighted)?;
    Ok(ElboNodes {
        q,
        z,
        logits,
        recon,
        kl,
        neg_elbo,
    })
}

/// Both sides of the word-dropout identity for one target token:
/// `lhs = (1−d)·ln p_full + d·ln p_reduced` and
/// `rhs = ln p_full − d·ln(p_full / p_reduced)`.
pub fn wd_identity(p_full: f64, p_reduced: f64, d: f64) -> Result<(f64, f64)> {
    if !(p_full > 0.0 && p_reduced > 0.0) {
        return Err(Error::ZeroProbability(format!(
            "p_full = {p_full}, p_reduced = {p_reduced}"
        )));
    }
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidArgument(format!("drop probability {d} outside [0, 1]")));
    }
    let (lf, lr) = (p_full.ln(), p_reduced.ln());
    let lhs = (1.0 - d) * lf + d * lr;
    let rhs = lf - d * (lf - lr);
    Ok((lhs, rhs))
}

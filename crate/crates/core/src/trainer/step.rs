use rand::seq::index::sample;

use crate::adversary::{adversary_mask, compute_k, DropMask};
use crate::diffcore::rng::StreamKey;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::metrics::AdversaryStats;
use crate::objectives::{masked_elbo, score_regularizer, ElboNodes, LossBreakdown};
use crate::scalar::Scalar;
use crate::seqvae::{Group, ModelParams};
use crate::textdata::SequenceBatch;

/// `base · γ^epoch`.
pub fn lr_schedule(epoch: u64, base_lr: f64, gamma: f64) -> f64 {
    base_lr * gamma.powf(epoch as f64)
}

/// `ρ·avg + (1−ρ)·params`, elementwise.
pub fn polyak_update<S: Scalar>(avg: &Tensor<S>, params: &Tensor<S>, rho: f64) -> Tensor<S> {
    let r = S::from_f64_lossy(rho);
    let q = S::from_f64_lossy(1.0 - rho);
    let mut out = avg.clone();
    for (a, &p) in out.data_mut().iter_mut().zip(params.data()) {
        *a = r * *a + q * p;
    }
    out
}

/// Averaging coefficient used at optimizer step `step`: the configured
/// `ρ`, reduced early in training to `(1 + t) / (10 + t)` so the average
/// is not dominated by the initialization.
pub fn polyak_coefficient(rho: f64, step: u64) -> f64 {
    let t = step as f64;
    rho.min((1.0 + t) / (10.0 + t))
}

/// True when the best validation loss has not improved by at least 1e-4
/// for `patience` consecutive evaluations.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    let Some((&first, rest)) = history.split_first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0;
    for &v in rest {
        if v <= best - 1e-4 {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

/// Keep mask `(B, L_in)` with exactly `compute_k(R, T)` eligible positions
/// per row dropped uniformly at random.
pub fn uniform_dropout_mask<S: Scalar>(batch: &SequenceBatch, rate: f64, key: StreamKey) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1]")));
    }
    let cols = batch.input_width();
    let mut keep = Tensor::ones(&[batch.rows(), cols]);
    let mut rng = key.rng();
    for (b, &t) in batch.eligible_counts().iter().enumerate() {
        let k = compute_k(rate, t);
        for i in sample(&mut rng, t, k) {
            keep.data_mut()[b * cols + i] = S::zero();
        }
    }
    Ok(keep)
}

/// Source of the decoder-input mask for one step.
#[derive(Clone, Debug)]
pub enum MaskSpec<S: Scalar> {
    None,
    Fixed(Tensor<S>),
    Adversarial { rate: f64, tau: f64, lambda: f64 },
}

/// Loss graph of one training step.
pub struct LossGraph {
    pub params: ModelParams<NodeId>,
    pub elbo: ElboNodes,
    pub mask: Option<DropMask>,
    pub keep: Option<NodeId>,
    pub reg: Option<NodeId>,
    /// `recon + β·KL + reg`.
    pub total: NodeId,
    pub beta: f64,
}

/// Builds encode → mask → decode → losses on `g`. Latent noise uses the
/// graph stream `"z"`, score noise the stream `"adv"`. An adversarial
/// spec with `R = 0` builds no adversary at all.
pub fn build_loss<S: Scalar>(
    g: &mut Graph<S>,
    params: ModelParams<NodeId>,
    batch: &SequenceBatch,
    spec: &MaskSpec<S>,
    beta: f64,
) -> Result<LossGraph> {
    let (mask, keep) = match spec {
        MaskSpec::None => (None, None),
        MaskSpec::Fixed(t) => (None, Some(g.constant(t.clone()))),
        MaskSpec::Adversarial { rate, .. } if *rate == 0.0 => (None, None),
        MaskSpec::Adversarial { rate, tau, .. } => {
            let m = adversary_mask(g, &params.adversary, batch, *rate, *tau, "adv")?;
            let keep = m.keep;
            (Some(m), Some(keep))
        }
    };
    let elbo = masked_elbo(g, &params, batch, keep, "z", beta)?;
    let (reg, total) = match (&mask, spec) {
        (Some(m), MaskSpec::Adversarial { lambda, .. }) => {
            let r = score_regularizer(g, &m.dist, *lambda)?;
            let total = g.add(elbo.neg_elbo, r)?;
            (Some(r), total)
        }
        _ => (None, elbo.neg_elbo),
    };
    Ok(LossGraph {
        params,
        elbo,
        mask,
        keep,
        reg,
        total,
        beta,
    })
}

impl LossGraph {
    /// Loss values after a forward pass.
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> Result<LossBreakdown> {
        let v = |id: NodeId| -> Result<f64> { Ok(g.value(id)?.item().as_f64()) };
        Ok(LossBreakdown {
            recon: v(self.elbo.recon.mean)?,
            kl_latent: v(self.elbo.kl)?,
            reg_score: self.reg.map(v).transpose()?.unwrap_or(0.0),
            beta: self.beta,
            total: v(self.total)?,
        })
    }
}

/// Result of a successful update.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Scale applied to the gradient (1 when no clipping happened).
    pub clip_scale: f64,
    pub adversary: Option<AdversaryStats>,
    /// Hard keep mask used in the step, row-major `B × L_in`.
    pub keep: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum StepOutcome {
    Applied(StepReport),
    /// Non-finite loss or gradient; parameters untouched.
    Skipped(String),
}

/// One joint update of encoder, decoder and adversary: a single forward
/// and backward pass, global-norm clipping and an SGD step. Gradient
/// reversal inside the mask makes the adversary ascend the reconstruction
/// loss while it descends its own regularizer.
pub fn train_step<S: Scalar>(
    params: &mut ModelParams<Tensor<S>>,
    batch: &SequenceBatch,
    spec: &MaskSpec<S>,
    beta: f64,
    lr: f64,
    clip_norm: f64,
    graph_seed: u64,
) -> Result<StepOutcome> {
    let mut g = Graph::new(graph_seed);
    let nodes = params.attach(&mut g);
    let lg = build_loss(&mut g, nodes, batch, spec, beta)?;
    match g.forward() {
        Ok(()) => {}
        Err(Error::NonFinite { node, op }) => {
            return Ok(StepOutcome::Skipped(format!("non-finite value at node {node} ({op})")));
        }
        Err(e) => return Err(e),
    }
    let loss = lg.breakdown(&g)?;
    if !loss.total.is_finite() {
        return Ok(StepOutcome::Skipped(format!("non-finite loss {}", loss.total)));
    }
    g.backward(lg.total)?;

    let entries = lg.params.entries();
    let mut grads: Vec<Option<&Tensor<S>>> = Vec::with_capacity(entries.len());
    let mut sq = 0.0;
    let mut adv_sq = 0.0;
    for (name, &id) in &entries {
        let gr = g.grad(id);
        if let Some(t) = gr {
            let s: f64 = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
            sq += s;
            if ModelParams::<NodeId>::group_of(name) == Group::Adversary {
                adv_sq += s;
            }
        }
        grads.push(gr);
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Ok(StepOutcome::Skipped(format!("non-finite gradient norm {grad_norm}")));
    }
    let scale = if grad_norm > clip_norm { clip_norm / grad_norm } else { 1.0 };
    let step = S::from_f64_lossy(lr * scale);
    let mut i = 0;
    *params = params.map(|_, t| {
        let gr = grads[i];
        i += 1;
        match gr {
            Some(gr) => {
                let mut t = t.clone();
                for (w, &d) in t.data_mut().iter_mut().zip(gr.data()) {
                    *w -= step * d;
                }
                t
            }
            None => t.clone(),
        }
    });

    let adversary = match &lg.mask {
        Some(m) => {
            let s = g.value(m.scores)?.to_f64_vec();
            let sigma = g.value(m.dist.sigma)?.to_f64_vec();
            let n = m.dist.eligible.iter().filter(|&&e| e).count().max(1) as f64;
            let mut l1 = 0.0;
            let mut sg = 0.0;
            for (i, &e) in m.dist.eligible.iter().enumerate() {
                if e {
                    l1 += s[i].abs();
                    sg += sigma[i];
                }
            }
            Some(AdversaryStats {
                score_l1: l1 / n,
                sigma: sg / n,
                grad_norm: adv_sq.sqrt(),
            })
        }
        None => None,
    };
    let keep = lg.keep.map(|k| g.value(k).map(|t| t.to_f64_vec())).transpose()?;
    Ok(StepOutcome::Applied(StepReport {
        loss,
        grad_norm,
        clip_scale: scale,
        adversary,
        keep,
    }))
}

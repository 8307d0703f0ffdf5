//! Evaluation: perplexity, latent KL, mutual information, importance-weighted
//! bounds, adversary statistics, saliency readouts and the exact Markov PMI
//! oracle, plus the small statistical tests used to read them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::adversary::{compute_k, score_params, ScoreSpan};
use crate::diffcore::rng::StreamKey;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::objectives::{kl_gaussian_standard, masked_elbo, reconstruction_term, row_nll};
use crate::scalar::Scalar;
use crate::seqvae::{decode_logits, ModelParams};
use crate::textdata::{MarkovSpec, SequenceBatch};

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::InvalidArgument("perplexity over zero tokens".into()));
    }
    Ok((total_nll / token_count as f64).exp())
}

/// Diagonal Gaussian posterior of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Posterior {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let mut lp = 0.0;
        for ((&m, &s), &x) in self.mu.iter().zip(&self.sigma).zip(z) {
            let u = (x - m) / s;
            lp += -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * u * u;
        }
        lp
    }

    pub fn kl(&self) -> Result<f64> {
        kl_gaussian_standard(&self.mu, &self.sigma)
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn log_standard_normal(z: &[f64]) -> f64 {
    z.iter().map(|x| -0.5 * (2.0 * PI).ln() - 0.5 * x * x).sum()
}

/// `I(X; Z) = E_x[KL(q(z|x) ‖ p₀)] − KL(q(z) ‖ p₀)`, estimated as
/// `E_{x, z~q(z|x)}[ln q(z|x) − ln q̂(z)]` where `q̂` is the mixture of the
/// given posteriors. Both log densities are read at the same `z`, which
/// cancels most of the sampling noise.
pub fn mutual_information(posteriors: &[Posterior], z_per_x: usize, key: StreamKey) -> Result<f64> {
    let n = posteriors.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mutual information needs at least 2 sentences, got {n}")));
    }
    if z_per_x == 0 {
        return Err(Error::InvalidArgument("mutual information needs at least one z sample".into()));
    }
    let d = posteriors[0].mu.len();
    let mut total = 0.0;
    let mut dens = vec![0.0; n];
    for (i, p) in posteriors.iter().enumerate() {
        let eps = key.split_index("x", i as u64).normals(d * z_per_x);
        for e in eps.chunks(d) {
            let z: Vec<f64> = p.mu.iter().zip(&p.sigma).zip(e).map(|((m, s), e)| m + s * e).collect();
            for (j, q) in posteriors.iter().enumerate() {
                dens[j] = q.log_density(&z);
            }
            total += dens[i] - log_mean_exp(&dens);
        }
    }
    Ok(total / (n * z_per_x) as f64)
}

/// Quantities reported for an evaluation split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalRecord {
    /// Single-sample `−ELBO`, nats per sentence.
    pub neg_elbo: f64,
    pub recon: f64,
    pub kl_latent: f64,
    pub ppl: f64,
    pub mi: f64,
    pub token_count: usize,
    pub sentence_count: usize,
}

/// Options for [`evaluate`].
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// z samples per sentence in the MI estimate; 0 skips MI.
    pub mi_samples: usize,
    /// At most this many sentences enter the MI estimate.
    pub mi_max_sentences: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            mi_samples: 1,
            mi_max_sentences: usize::MAX,
        }
    }
}

/// Encodes every sentence (id sequences with `<sos>`/`<eos>`) and returns
/// the per-sentence posteriors.
pub fn posteriors<S: Scalar>(params: &ModelParams<Tensor<S>>, seqs: &[Vec<usize>], batch_size: usize) -> Result<Vec<Posterior>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = SequenceBatch::new(chunk)?;
        let mut g = Graph::new(0);
        let p = params.attach_constant(&mut g);
        let q = crate::seqvae::encode_posterior(&mut g, &p.encoder, &batch)?;
        g.forward()?;
        let d = g.dims(q.mu)[1];
        let mu = g.value(q.mu)?.to_f64_vec();
        let sigma = g.value(q.sigma)?.to_f64_vec();
        for b in 0..batch.rows() {
            out.push(Posterior {
                mu: mu[b * d..(b + 1) * d].to_vec(),
                sigma: sigma[b * d..(b + 1) * d].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Unmasked single-sample ELBO, perplexity bound and MI over a split.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    seqs: &[Vec<usize>],
    opts: &EvalOptions,
    key: StreamKey,
) -> Result<EvalRecord> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let mut recon = 0.0;
    let mut kl = 0.0;
    let mut tokens = 0;
    let mut post = Vec::with_capacity(seqs.len());
    for (i, chunk) in seqs.chunks(opts.batch_size.max(1)).enumerate() {
        let batch = SequenceBatch::new(chunk)?;
        let mut g = Graph::new(key.split_index("eval-batch", i as u64).seed);
        let p = params.attach_constant(&mut g);
        let e = masked_elbo(&mut g, &p, &batch, None, "z", 1.0)?;
        g.forward()?;
        recon += row_nll(&g, &e.recon, batch.rows())?.iter().sum::<f64>();
        let d = g.dims(e.q.mu)[1];
        let mu = g.value(e.q.mu)?.to_f64_vec();
        let sigma = g.value(e.q.sigma)?.to_f64_vec();
        for b in 0..batch.rows() {
            let p = Posterior {
                mu: mu[b * d..(b + 1) * d].to_vec(),
                sigma: sigma[b * d..(b + 1) * d].to_vec(),
            };
            kl += p.kl()?;
            post.push(p);
        }
        tokens += batch.target_count();
    }
    let n = seqs.len() as f64;
    let mi = if opts.mi_samples > 0 && post.len() >= 2 {
        let m = post.len().min(opts.mi_max_sentences.max(2));
        mutual_information(&post[..m], opts.mi_samples, key.split("mi"))?
    } else {
        0.0
    };
    Ok(EvalRecord {
        neg_elbo: (recon + kl) / n,
        recon: recon / n,
        kl_latent: kl / n,
        ppl: perplexity(recon + kl, tokens)?,
        mi,
        token_count: tokens,
        sentence_count: seqs.len(),
    })
}

/// Log importance weights `ln p(x|z_k) + ln p₀(z_k) − ln q(z_k|x)` for
/// `z_k ~ q(z|x)`, `k = 1..n`.
pub fn importance_log_weights<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    seq: &[usize],
    n: usize,
    key: StreamKey,
) -> Result<Vec<f64>> {
    let post = posteriors(params, &[seq.to_vec()], 1)?.remove(0);
    let d = post.mu.len();
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 256;
    let mut done = 0;
    while done < n {
        let rows = CHUNK.min(n - done);
        let eps = key.split_index("iw", done as u64).normals(rows * d);
        let zs: Vec<Vec<f64>> = eps
            .chunks(d)
            .map(|e| post.mu.iter().zip(&post.sigma).zip(e).map(|((m, s), e)| m + s * e).collect())
            .collect();
        let batch = SequenceBatch::new(&vec![seq.to_vec(); rows])?;
        let mut g = Graph::new(0);
        let p = params.attach_constant(&mut g);
        let flat: Vec<f64> = zs.iter().flatten().copied().collect();
        let z = g.constant(Tensor::from_f64(&[rows, d], &flat)?);
        let logits = decode_logits(&mut g, &p, &batch, None, z)?;
        let rec = reconstruction_term(&mut g, logits, &batch)?;
        g.forward()?;
        let nll = row_nll(&g, &rec, rows)?;
        for (b, z) in zs.iter().enumerate() {
            out.push(-nll[b] + log_standard_normal(z) - post.log_density(z));
        }
        done += rows;
    }
    Ok(out)
}

/// `ln (1/n) Σ_k w_k` from log weights.
pub fn importance_weighted_bound(log_weights: &[f64]) -> f64 {
    log_mean_exp(log_weights)
}

/// Conditional PMI of word `i` (0-based) of a state sequence under an
/// order-1 chain: `ln A[x_{i-1}, x_i] − ln A²[x_{i-2}, x_i]`. At `i = 1`
/// the dropped word is marginalized under the initial distribution; at
/// `i = 0` only `<sos>` precedes and the value is 0.
pub fn pmi_oracle(spec: &MarkovSpec, states: &[usize], i: usize) -> Result<f64> {
    spec.validate()?;
    let k = spec.states.len();
    if i >= states.len() || states.iter().any(|&s| s >= k) {
        return Err(Error::InvalidArgument(format!("position {i} / states {states:?} out of range")));
    }
    if i == 0 {
        return Ok(0.0);
    }
    let a = &spec.transition;
    let (prev, cur) = (states[i - 1], states[i]);
    let full = a[prev][cur];
    let reduced = if i == 1 {
        (0..k).map(|m| spec.initial[m] * a[m][cur]).sum::<f64>()
    } else {
        let pp = states[i - 2];
        (0..k).map(|m| a[pp][m] * a[m][cur]).sum::<f64>()
    };
    if full <= 0.0 || reduced <= 0.0 {
        return Err(Error::ZeroProbability(format!("transition into state {cur} at position {i}")));
    }
    Ok(full.ln() - reduced.ln())
}

/// PMI of each decoder-input position of a sentence: position `t` holds
/// `<sos>` (t = 0) or word `t − 1`, and dropping it affects the prediction
/// of word `t`. The last position predicts `<eos>`, whose probability does
/// not depend on the dropped word, so it scores 0.
pub fn input_position_pmi(spec: &MarkovSpec, states: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.len() + 1);
    for t in 0..states.len() {
        out.push(pmi_oracle(spec, states, t)?);
    }
    out.push(0.0);
    Ok(out)
}

/// Running drop counts per decoder-input position and per token type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropCounter {
    pub position_drops: Vec<u64>,
    pub position_eligible: Vec<u64>,
    pub token_drops: BTreeMap<usize, u64>,
    pub token_eligible: BTreeMap<usize, u64>,
    pub batches: u64,
}

impl DropCounter {
    /// Adds one batch; `keep` is the row-major `B × L_in` hard mask.
    pub fn add(&mut self, batch: &SequenceBatch, keep: &[f64]) -> Result<()> {
        let cols = batch.input_width();
        if keep.len() != batch.rows() * cols {
            return Err(Error::DimMismatch {
                op: "DropCounter::add",
                left: vec![keep.len()],
                right: vec![batch.rows(), cols],
            });
        }
        if self.position_drops.len() < cols {
            self.position_drops.resize(cols, 0);
            self.position_eligible.resize(cols, 0);
        }
        let eligible = batch.eligible();
        for b in 0..batch.rows() {
            for t in 0..cols {
                if !eligible[b * cols + t] {
                    continue;
                }
                let tok = batch.id(b, t);
                let dropped = keep[b * cols + t] == 0.0;
                self.position_eligible[t] += 1;
                *self.token_eligible.entry(tok).or_default() += 1;
                if dropped {
                    self.position_drops[t] += 1;
                    *self.token_drops.entry(tok).or_default() += 1;
                }
            }
        }
        self.batches += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &DropCounter) {
        let n = self.position_drops.len().max(other.position_drops.len());
        self.position_drops.resize(n, 0);
        self.position_eligible.resize(n, 0);
        for (i, (&d, &e)) in other.position_drops.iter().zip(&other.position_eligible).enumerate() {
            self.position_drops[i] += d;
            self.position_eligible[i] += e;
        }
        for (k, v) in &other.token_drops {
            *self.token_drops.entry(*k).or_default() += v;
        }
        for (k, v) in &other.token_eligible {
            *self.token_eligible.entry(*k).or_default() += v;
        }
        self.batches += other.batches;
    }

    /// Drop rate per position (`None` where nothing was eligible).
    pub fn position_frequency(&self) -> Vec<Option<f64>> {
        self.position_drops
            .iter()
            .zip(&self.position_eligible)
            .map(|(&d, &e)| (e > 0).then(|| d as f64 / e as f64))
            .collect()
    }

    pub fn token_frequency(&self) -> BTreeMap<usize, f64> {
        self.token_eligible
            .iter()
            .map(|(k, &e)| (*k, self.token_drops.get(k).copied().unwrap_or(0) as f64 / e as f64))
            .collect()
    }
}

/// One line of a saliency report.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyReport {
    /// Full sequence including `<sos>` and `<eos>`.
    pub ids: Vec<usize>,
    /// Per-token drop salience in `[0, 1]`; 1 marks the smallest score.
    pub saliency: Vec<f64>,
    /// Indices (into `ids`) of the `K` positions the adversary would drop.
    pub dropped: Vec<usize>,
}

impl SaliencyReport {
    /// `token:score` pairs separated by tabs, dropped tokens in brackets,
    /// then `dropped=i,j,...`.
    pub fn format(&self, token: impl Fn(usize) -> String) -> String {
        let mut parts: Vec<String> = self
            .ids
            .iter()
            .zip(&self.saliency)
            .enumerate()
            .map(|(i, (&id, s))| {
                let t = token(id);
                if self.dropped.contains(&i) {
                    format!("[{t}]:{s:.3}")
                } else {
                    format!("{t}:{s:.3}")
                }
            })
            .collect();
        let idx: Vec<String> = self.dropped.iter().map(|i| i.to_string()).collect();
        parts.push(format!("dropped={}", idx.join(",")));
        parts.join("\t")
    }
}

/// Noise-free saliency of one encoded sentence: mean scores `μ_i` mapped to
/// `(max − μ_i) / (max − min)` with max/min over the droppable positions.
/// `<eos>` is reported with the same map, clamped to `[0, 1]`.
pub fn saliency_report<S: Scalar>(params: &ModelParams<Tensor<S>>, seq: &[usize], rate: f64) -> Result<SaliencyReport> {
    if seq.len() < 3 {
        return Err(Error::InvalidArgument("saliency needs a sentence with at least one word".into()));
    }
    let batch = SequenceBatch::new(&[seq.to_vec()])?;
    let mut g = Graph::new(0);
    let p = params.attach_constant(&mut g);
    let d = score_params(&mut g, &p.adversary, &batch, ScoreSpan::FullSequence)?;
    g.forward()?;
    let mu = g.value(d.mu)?.to_f64_vec();
    Ok(saliency_from_scores(seq, &mu, rate))
}

/// Saliency map for precomputed mean scores over the full sequence.
pub fn saliency_from_scores(seq: &[usize], mu: &[f64], rate: f64) -> SaliencyReport {
    let n = seq.len();
    let eligible = n - 1;
    let (lo, hi) = mu[..eligible]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let saliency = mu[..n]
        .iter()
        .map(|&v| if range > 0.0 { ((hi - v) / range).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let k = compute_k(rate, eligible);
    let mut order: Vec<usize> = (0..eligible).collect();
    order.sort_by(|&a, &b| mu[a].total_cmp(&mu[b]).then(a.cmp(&b)));
    let mut dropped: Vec<usize> = order[..k].to_vec();
    dropped.sort_unstable();
    SaliencyReport {
        ids: seq.to_vec(),
        saliency,
        dropped,
    }
}

/// Windowed adversary statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdversaryStats {
    /// Mean over steps of `‖s‖₁` per eligible position.
    pub score_l1: f64,
    /// Mean per-position `σ`.
    pub sigma: f64,
    /// Mean `‖∇ψ‖₂`.
    pub grad_norm: f64,
}

/// Per-step adversary readings collected during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdversaryTrace {
    steps: Vec<AdversaryStats>,
}

impl AdversaryTrace {
    pub fn push(&mut self, s: AdversaryStats) {
        self.steps.push(s);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn entries(&self) -> &[AdversaryStats] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    /// Means over the last `window` steps (all steps if `window` is 0).
    pub fn stats(&self, window: usize) -> Result<AdversaryStats> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("adversary trace is empty".into()));
        }
        let w = if window == 0 { self.steps.len() } else { window.min(self.steps.len()) };
        let tail = &self.steps[self.steps.len() - w..];
        let n = w as f64;
        Ok(AdversaryStats {
            score_l1: tail.iter().map(|s| s.score_l1).sum::<f64>() / n,
            sigma: tail.iter().map(|s| s.sigma).sum::<f64>() / n,
            grad_norm: tail.iter().map(|s| s.grad_norm).sum::<f64>() / n,
        })
    }
}

/// Pearson chi-square goodness of fit; returns `(statistic, p-value)` with
/// `len − 1` degrees of freedom. Cells with zero expectation are skipped.
pub fn chi_square_test(observed: &[f64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() {
        return Err(Error::DimMismatch {
            op: "chi_square_test",
            left: vec![observed.len()],
            right: vec![expected.len()],
        });
    }
    let cells: Vec<(f64, f64)> = observed
        .iter()
        .zip(expected)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&o, &e)| (o, e))
        .collect();
    if cells.len() < 2 {
        return Err(Error::InvalidArgument("chi-square test needs at least two cells".into()));
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dist = ChiSquared::new((cells.len() - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// One metrics-log line: a record kind followed by `key=value` fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogRecord {
    pub kind: String,
    pub fields: Vec<(String, f64)>,
}

impl LogRecord {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.fields.push((key.to_string(), value));
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let kind = parts
            .next()
            .filter(|k| !k.contains('='))
            .ok_or_else(|| Error::InvalidArgument(format!("metrics line without a kind: '{line}'")))?;
        let mut fields = Vec::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed metrics field '{part}'")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("malformed metrics value '{part}'")))?;
            fields.push((k.to_string(), v));
        }
        Ok(Self {
            kind: kind.to_string(),
            fields,
        })
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        for (k, v) in &self.fields {
            // Shortest round-trip representation keeps logs bit-exact.
            write!(f, " {k}={v:?}")?;
        }
        Ok(())
    }
}

mod common;

use awd_core::diffcore::rng::StreamKey;
use awd_core::diffcore::{Graph, Tensor};
use awd_core::seqvae::{
    apply_mask, decode_logits, double_lstm_step, encode_posterior, generate, initial_state, interpolate,
    latent_inputs, posterior_means, reparameterize, DecodeMode, ModelParams,
};
use awd_core::textdata::{SequenceBatch, EOS, MSK};
use awd_core::{Graph64, Tensor64};
use common::{seq, tiny_batch, tiny_dims, tiny_params};

fn posterior(params: &ModelParams<Tensor64>, batch: &SequenceBatch) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph64::new(0);
    let p = params.attach(&mut g);
    let q = encode_posterior(&mut g, &p.encoder, batch).unwrap();
    g.forward().unwrap();
    assert_eq!(g.dims(q.mu), &[batch.rows(), 2]);
    assert_eq!(g.dims(q.sigma), &[batch.rows(), 2]);
    (g.value(q.mu).unwrap().to_f64_vec(), g.value(q.sigma).unwrap().to_f64_vec())
}

#[test]
fn encoder_is_row_deterministic_and_pad_invariant() {
    let params = tiny_params(1);
    let rows = [seq(&[5, 6]), seq(&[5, 6]), seq(&[7])];
    let (mu, sigma) = posterior(&params, &SequenceBatch::new(&rows).unwrap());
    assert_eq!(mu[0..2], mu[2..4]);
    assert_eq!(sigma[0..2], sigma[2..4]);
    assert!(sigma.iter().all(|&s| s > 0.0));

    let wide = SequenceBatch::with_width(&rows, 9).unwrap();
    let (mu_w, sigma_w) = posterior(&params, &wide);
    assert_eq!(mu, mu_w);
    assert_eq!(sigma, sigma_w);
    assert_ne!(mu[0..2], mu[4..6]);
}

#[test]
fn reparameterization_values_and_gradients() {
    let mut g = Graph64::new(0);
    let mu = g.parameter(Tensor::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.0]).unwrap());
    let log_sigma = g.parameter(Tensor::from_f64(&[2, 2], &[0.1, -0.3, 0.0, 0.7]).unwrap());
    let sigma = g.exp(log_sigma);
    let q = awd_core::seqvae::LatentGaussian { mu, log_sigma, sigma };
    let eps_v = [0.3, -1.1, 0.8, 2.0];
    let eps = g.constant(Tensor::from_f64(&[2, 2], &eps_v).unwrap());
    let zero = g.constant(Tensor::zeros(&[2, 2]));
    let z = reparameterize(&mut g, &q, eps).unwrap();
    let z0 = reparameterize(&mut g, &q, zero).unwrap();
    let total = g.sum(z);
    g.forward().unwrap();
    assert_eq!(g.value(z0).unwrap(), g.value(mu).unwrap());
    g.backward(total).unwrap();
    assert_eq!(g.grad(mu).unwrap().to_f64_vec(), vec![1.0; 4]);
    let s = g.value(sigma).unwrap().to_f64_vec();
    let gl = g.grad(log_sigma).unwrap().to_f64_vec();
    for i in 0..4 {
        assert_eq!(gl[i], s[i] * eps_v[i]);
    }

    let mut g = Graph64::new(0);
    let mu = g.constant(Tensor::zeros(&[1, 3]));
    let ls = g.constant(Tensor::zeros(&[1, 3]));
    let sigma = g.exp(ls);
    let eps = g.constant(Tensor::from_f64(&[1, 3], &[0.2, -0.4, 1.5]).unwrap());
    let q = awd_core::seqvae::LatentGaussian { mu, log_sigma: ls, sigma };
    let z = reparameterize(&mut g, &q, eps).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(z).unwrap(), g.value(eps).unwrap());
}

fn masked_inputs(keep: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let params = tiny_params(2);
    let batch = tiny_batch();
    let mut g = Graph64::new(0);
    let p = params.attach(&mut g);
    let emb = p.decoder_embedding();
    let keep = keep.map(|k| g.constant(Tensor::from_f64(&[3, 4], k).unwrap()));
    let out = apply_mask(&mut g, emb, &batch, keep).unwrap();
    let msk = g.gather(emb, &[MSK]).unwrap();
    let plain = apply_mask(&mut g, emb, &batch, None).unwrap();
    g.forward().unwrap();
    (
        g.value(out).unwrap().to_f64_vec(),
        g.value(msk).unwrap().to_f64_vec(),
        g.value(plain).unwrap().to_f64_vec(),
    )
}

#[test]
fn mask_application() {
    let (ones, _, plain) = masked_inputs(Some(&[1.0; 12]));
    assert_eq!(ones, plain);

    let (zeros, msk, _) = masked_inputs(Some(&[0.0; 12]));
    for row in zeros.chunks(4) {
        assert_eq!(row, msk.as_slice());
    }

    // Row-major (B, L_in) keep mask with three drops; rows of the output
    // are time-major.
    let keep = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0];
    let (out, msk, plain) = masked_inputs(Some(&keep));
    let mut dropped = 0;
    for n in 0..12 {
        let (t, b) = (n / 3, n % 3);
        let row = &out[n * 4..(n + 1) * 4];
        if keep[b * 4 + t] == 0.0 {
            assert_eq!(row, msk.as_slice());
            dropped += 1;
        } else {
            assert_eq!(row, &plain[n * 4..(n + 1) * 4]);
        }
    }
    assert_eq!(dropped, 3);
}

#[test]
fn apply_mask_rejects_wrong_dims() {
    let params = tiny_params(2);
    let mut g = Graph64::new(0);
    let p = params.attach(&mut g);
    let keep = g.constant(Tensor::ones(&[3, 5]));
    assert!(apply_mask(&mut g, p.decoder_embedding(), &tiny_batch(), Some(keep)).is_err());
}

#[test]
fn double_lstm_with_zero_weights_outputs_zero() {
    let params = tiny_params(3).map(|_, t| t.map(|_| 0.0));
    let mut g = Graph64::new(0);
    let p = params.attach(&mut g);
    let z = g.constant(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap());
    let state = initial_state(&mut g, &p.decoder, z).unwrap();
    let lat = latent_inputs(&mut g, &p.decoder, z).unwrap();
    let e = g.constant(Tensor::from_f64(&[2, 4], &[0.7; 8]).unwrap());
    let w = g.matmul(e, p.decoder.u2_w_x).unwrap();
    let (next, _) = double_lstm_step(&mut g, &p.decoder, state, lat, w).unwrap();
    g.forward().unwrap();
    assert!(g.value(next.h).unwrap().to_f64_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn unit_one_ignores_the_input_token() {
    let params = tiny_params(4);
    let mut g = Graph64::new(0);
    let p = params.attach(&mut g);
    let z = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.9]).unwrap());
    let state = initial_state(&mut g, &p.decoder, z).unwrap();
    let lat = latent_inputs(&mut g, &p.decoder, z).unwrap();
    let mut mids = Vec::new();
    let mut hs = Vec::new();
    for tok in [5, MSK, 7] {
        let e = g.gather(p.decoder_embedding(), &[tok]).unwrap();
        let w = g.matmul(e, p.decoder.u2_w_x).unwrap();
        let (next, mid) = double_lstm_step(&mut g, &p.decoder, state, lat, w).unwrap();
        mids.push(mid);
        hs.push(next.h);
    }
    g.forward().unwrap();
    let v = |id| g.value(id).unwrap().to_f64_vec();
    assert_eq!(v(mids[0]), v(mids[1]));
    assert_eq!(v(mids[0]), v(mids[2]));
    assert_ne!(v(hs[0]), v(hs[1]));
}

fn logits(params: &ModelParams<Tensor64>, batch: &SequenceBatch, keep: Option<Vec<f64>>, z: &[f64]) -> Vec<f64> {
    let mut g = Graph64::new(0);
    let p = params.attach(&mut g);
    let keep = keep.map(|k| g.constant(Tensor::from_f64(&[batch.rows(), batch.input_width()], &k).unwrap()));
    let z = g.constant(Tensor::from_f64(&[batch.rows(), 2], z).unwrap());
    let out = decode_logits(&mut g, &p, batch, keep, z).unwrap();
    g.forward().unwrap();
    assert_eq!(g.dims(out), &[batch.rows() * batch.input_width(), 8]);
    g.value(out).unwrap().to_f64_vec()
}

#[test]
fn decode_logits_mask_identity_and_pad_invariance() {
    let params = tiny_params(5);
    let batch = tiny_batch();
    let z = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
    let plain = logits(&params, &batch, None, &z);
    assert_eq!(plain, logits(&params, &batch, Some(vec![1.0; 12]), &z));

    let rows: Vec<Vec<usize>> = (0..3).map(|b| batch.row(b).to_vec()).collect();
    let wide = SequenceBatch::with_width(&rows, 8).unwrap();
    let wide_logits = logits(&params, &wide, None, &z);
    // Time-major rows t*B + b; compare every non-pad target position.
    for b in 0..3 {
        for t in 0..batch.lengths()[b] - 1 {
            let n = t * 3 + b;
            assert_eq!(plain[n * 8..(n + 1) * 8], wide_logits[n * 8..(n + 1) * 8]);
        }
    }

    let other = logits(&params, &batch, None, &[1.0, -1.0, 2.0, 0.0, -2.0, 0.5]);
    assert!(plain.iter().zip(&other).any(|(a, b)| a != b));
}

#[test]
fn greedy_generation_is_deterministic_and_bounded() {
    let params = tiny_params(6);
    let zs: Vec<Vec<f64>> = StreamKey::new(6, "z").normals(40).chunks(2).map(|c| c.to_vec()).collect();
    let key = StreamKey::new(0, "gen");
    let a = generate(&params, &zs, 6, DecodeMode::Greedy, key).unwrap();
    let b = generate(&params, &zs, 6, DecodeMode::Greedy, StreamKey::new(99, "other")).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert!(!s.is_empty() && s.len() <= 6);
        assert!(s.last() == Some(&EOS) || s.len() == 6);
        assert!(s[..s.len() - 1].iter().all(|&t| t != EOS));
    }
    assert!(generate(&params, &zs, 1, DecodeMode::Greedy, key).is_err());
}

#[test]
fn cold_sampling_matches_greedy() {
    let params = tiny_params(7);
    let zs: Vec<Vec<f64>> = StreamKey::new(7, "z").normals(40).chunks(2).map(|c| c.to_vec()).collect();
    let greedy = generate(&params, &zs, 10, DecodeMode::Greedy, StreamKey::new(1, "a")).unwrap();
    let cold = generate(&params, &zs, 10, DecodeMode::Sample { temperature: 1e-4 }, StreamKey::new(1, "b")).unwrap();
    assert_eq!(greedy, cold);
    let hot = generate(&params, &zs, 10, DecodeMode::Sample { temperature: 1.0 }, StreamKey::new(1, "b")).unwrap();
    let hot2 = generate(&params, &zs, 10, DecodeMode::Sample { temperature: 1.0 }, StreamKey::new(1, "b")).unwrap();
    assert_eq!(hot, hot2);
}

#[test]
fn interpolation_layout_and_endpoints() {
    let params = tiny_params(8);
    let a = seq(&[5, 6, 7]);
    let b = seq(&[7, 7]);
    let out = interpolate(&params, &a, &b, 3, 8).unwrap();
    assert_eq!(out.len(), 5);
    let mu = posterior_means(&params, &SequenceBatch::new(&[a.clone(), b.clone()]).unwrap()).unwrap();
    let ends = generate(&params, &mu, 8, DecodeMode::Greedy, StreamKey::new(0, "x")).unwrap();
    assert_eq!(out[0], ends[0]);
    assert_eq!(out[4], ends[1]);
    assert!(interpolate(&params, &a, &b, 0, 8).is_err());
}

#[test]
fn f32_and_f64_models_agree() {
    let p64 = tiny_params(9);
    let p32 = p64.cast::<f32>();
    let batch = tiny_batch();
    let mut g = Graph::<f32>::new(0);
    let p = p32.attach(&mut g);
    let z = g.constant(Tensor::from_f64(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
    let out = decode_logits(&mut g, &p, &batch, None, z).unwrap();
    g.forward().unwrap();
    let l32 = g.value(out).unwrap().to_f64_vec();
    let l64 = logits(&p64.cast::<f32>().cast::<f64>(), &batch, None, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
    for (a, b) in l32.iter().zip(&l64) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
    let _ = tiny_dims();
}

#![allow(dead_code)]

use awd_core::seqvae::{ModelDims, ModelParams};
use awd_core::textdata::{SequenceBatch, EOS, SOS};
use awd_core::Tensor64;

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab: 8,
        emb: 4,
        enc_hidden: 4,
        dec_hidden: 4,
        adv_hidden: 4,
        latent: 2,
        tie_embeddings: false,
    }
}

pub fn tiny_params(seed: u64) -> ModelParams<Tensor64> {
    // Larger weights than the default init so that every path matters.
    ModelParams::<Tensor64>::init(&tiny_dims(), seed).map(|_, t| t.map(|v| v * 5.0))
}

pub fn seq(words: &[usize]) -> Vec<usize> {
    let mut s = vec![SOS];
    s.extend_from_slice(words);
    s.push(EOS);
    s
}

/// Three rows of different lengths over word ids 5..8.
pub fn tiny_batch() -> SequenceBatch {
    SequenceBatch::new(&[seq(&[5, 6, 7]), seq(&[7, 5]), seq(&[6])]).unwrap()
}

pub fn rows_of(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(|c| c.to_vec()).collect()
}

use rand::Rng;

use crate::diffcore::rng::StreamKey;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer sizes of the full model (encoder, decoder and adversary).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub emb: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub adv_hidden: usize,
    pub latent: usize,
    /// Decoder reuses the encoder's embedding matrix.
    pub tie_embeddings: bool,
}

/// Weights of one LSTM unit. Gate order along the `4H` axis is
/// input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub w_x: T,
    pub w_h: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub emb: T,
    pub lstm: LstmParams<T>,
    /// `H_e × 2D`, producing `[μ, log σ]`.
    pub head_w: T,
    pub head_b: T,
}

/// Double-LSTM decoder. Unit 1 reads `(z, h)`; unit 2 reads
/// `(z, unit-1 output, w)` and produces the next `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    /// `None` when embeddings are tied to the encoder.
    pub emb: Option<T>,
    /// `D × 3H`: initial `h`, unit-1 cell, unit-2 cell.
    pub init_w: T,
    pub init_b: T,
    pub u1_w_z: T,
    pub u1_w_h: T,
    pub u1_b: T,
    pub u2_w_z: T,
    pub u2_w_h: T,
    pub u2_w_x: T,
    pub u2_b: T,
    pub out_w: T,
    pub out_b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryParams<T> {
    pub emb: T,
    pub lstm: LstmParams<T>,
    /// `H_a × 2`, producing `[μ_i, log σ_i]` per position.
    pub head_w: T,
    pub head_b: T,
}

/// All trainable parameters: encoder (φ), decoder (θ), adversary (ψ).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
    pub adversary: AdversaryParams<T>,
}

/// Which player a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Adversary,
}

impl<T> ModelParams<T> {
    /// Named entries in a fixed order (the checkpoint order).
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut v: Vec<(String, &T)> = Vec::new();
        let e = &self.encoder;
        v.push(("enc.emb".into(), &e.emb));
        v.push(("enc.lstm.w_x".into(), &e.lstm.w_x));
        v.push(("enc.lstm.w_h".into(), &e.lstm.w_h));
        v.push(("enc.lstm.b".into(), &e.lstm.b));
        v.push(("enc.head.w".into(), &e.head_w));
        v.push(("enc.head.b".into(), &e.head_b));
        let d = &self.decoder;
        if let Some(emb) = &d.emb {
            v.push(("dec.emb".into(), emb));
        }
        v.push(("dec.init.w".into(), &d.init_w));
        v.push(("dec.init.b".into(), &d.init_b));
        v.push(("dec.u1.w_z".into(), &d.u1_w_z));
        v.push(("dec.u1.w_h".into(), &d.u1_w_h));
        v.push(("dec.u1.b".into(), &d.u1_b));
        v.push(("dec.u2.w_z".into(), &d.u2_w_z));
        v.push(("dec.u2.w_h".into(), &d.u2_w_h));
        v.push(("dec.u2.w_x".into(), &d.u2_w_x));
        v.push(("dec.u2.b".into(), &d.u2_b));
        v.push(("dec.out.w".into(), &d.out_w));
        v.push(("dec.out.b".into(), &d.out_b));
        let a = &self.adversary;
        v.push(("adv.emb".into(), &a.emb));
        v.push(("adv.lstm.w_x".into(), &a.lstm.w_x));
        v.push(("adv.lstm.w_h".into(), &a.lstm.w_h));
        v.push(("adv.lstm.b".into(), &a.lstm.b));
        v.push(("adv.head.w".into(), &a.head_w));
        v.push(("adv.head.b".into(), &a.head_b));
        v
    }

    pub fn group_of(name: &str) -> Group {
        match &name[..3] {
            "enc" => Group::Encoder,
            "dec" => Group::Decoder,
            _ => Group::Adversary,
        }
    }

    /// Applies `f` to every entry (in [`ModelParams::entries`] order).
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let lstm = |prefix: &str, p: &LstmParams<T>, f: &mut dyn FnMut(&str, &T) -> U| LstmParams {
            w_x: f(&format!("{prefix}.w_x"), &p.w_x),
            w_h: f(&format!("{prefix}.w_h"), &p.w_h),
            b: f(&format!("{prefix}.b"), &p.b),
        };
        let e = &self.encoder;
        let encoder = EncoderParams {
            emb: f("enc.emb", &e.emb),
            lstm: lstm("enc.lstm", &e.lstm, &mut f),
            head_w: f("enc.head.w", &e.head_w),
            head_b: f("enc.head.b", &e.head_b),
        };
        let d = &self.decoder;
        let decoder = DecoderParams {
            emb: d.emb.as_ref().map(|t| f("dec.emb", t)),
            init_w: f("dec.init.w", &d.init_w),
            init_b: f("dec.init.b", &d.init_b),
            u1_w_z: f("dec.u1.w_z", &d.u1_w_z),
            u1_w_h: f("dec.u1.w_h", &d.u1_w_h),
            u1_b: f("dec.u1.b", &d.u1_b),
            u2_w_z: f("dec.u2.w_z", &d.u2_w_z),
            u2_w_h: f("dec.u2.w_h", &d.u2_w_h),
            u2_w_x: f("dec.u2.w_x", &d.u2_w_x),
            u2_b: f("dec.u2.b", &d.u2_b),
            out_w: f("dec.out.w", &d.out_w),
            out_b: f("dec.out.b", &d.out_b),
        };
        let a = &self.adversary;
        let adversary = AdversaryParams {
            emb: f("adv.emb", &a.emb),
            lstm: lstm("adv.lstm", &a.lstm, &mut f),
            head_w: f("adv.head.w", &a.head_w),
            head_b: f("adv.head.b", &a.head_b),
        };
        ModelParams {
            encoder,
            decoder,
            adversary,
        }
    }

    /// Pairs entries of two records with the same layout.
    pub fn zip_map<U, V>(&self, other: &ModelParams<U>, mut f: impl FnMut(&str, &T, &U) -> V) -> ModelParams<V> {
        let others: Vec<&U> = other.entries().into_iter().map(|(_, u)| u).collect();
        let mut i = 0;
        self.map(|name, t| {
            let v = f(name, t, others[i]);
            i += 1;
            v
        })
    }

    pub fn values(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }
}

impl<T: Clone> ModelParams<T> {
    /// Rebuilds a record from values in entry order.
    pub fn with_values<U: Clone>(&self, values: &[U]) -> ModelParams<U> {
        let mut it = values.iter();
        self.map(|_, _| it.next().expect("one value per entry").clone())
    }
}

impl ModelParams<NodeId> {
    /// Encoder embedding when tied, otherwise the decoder's own.
    pub fn decoder_embedding(&self) -> NodeId {
        self.decoder.emb.unwrap_or(self.encoder.emb)
    }
}

impl<S: Scalar> ModelParams<Tensor<S>> {
    /// Uniform(-0.1, 0.1) weights; LSTM forget-gate biases start at 1.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let key = StreamKey::new(seed, "param-init");
        let ModelDims {
            vocab: v,
            emb: e,
            enc_hidden: he,
            dec_hidden: hd,
            adv_hidden: ha,
            latent: d,
            tie_embeddings,
        } = *dims;
        let lstm = |prefix: &str, input: usize, hidden: usize| LstmParams {
            w_x: uniform(key.split(&format!("{prefix}.w_x")), &[input, hidden * 4]),
            w_h: uniform(key.split(&format!("{prefix}.w_h")), &[hidden, hidden * 4]),
            b: lstm_bias(hidden),
        };
        let encoder = EncoderParams {
            emb: uniform(key.split("enc.emb"), &[v, e]),
            lstm: lstm("enc.lstm", e, he),
            head_w: uniform(key.split("enc.head.w"), &[he, 2 * d]),
            head_b: Tensor::zeros(&[1, 2 * d]),
        };
        let decoder = DecoderParams {
            emb: (!tie_embeddings).then(|| uniform(key.split("dec.emb"), &[v, e])),
            init_w: uniform(key.split("dec.init.w"), &[d, 3 * hd]),
            init_b: Tensor::zeros(&[1, 3 * hd]),
            u1_w_z: uniform(key.split("dec.u1.w_z"), &[d, 4 * hd]),
            u1_w_h: uniform(key.split("dec.u1.w_h"), &[hd, 4 * hd]),
            u1_b: lstm_bias(hd),
            u2_w_z: uniform(key.split("dec.u2.w_z"), &[d, 4 * hd]),
            u2_w_h: uniform(key.split("dec.u2.w_h"), &[hd, 4 * hd]),
            u2_w_x: uniform(key.split("dec.u2.w_x"), &[e, 4 * hd]),
            u2_b: lstm_bias(hd),
            out_w: uniform(key.split("dec.out.w"), &[hd, v]),
            out_b: Tensor::zeros(&[1, v]),
        };
        let adversary = AdversaryParams {
            emb: uniform(key.split("adv.emb"), &[v, e]),
            lstm: lstm("adv.lstm", e, ha),
            head_w: uniform(key.split("adv.head.w"), &[ha, 2]),
            head_b: Tensor::zeros(&[1, 2]),
        };
        ModelParams {
            encoder,
            decoder,
            adversary,
        }
    }

    /// Adds every tensor as a parameter leaf of `g`.
    pub fn attach(&self, g: &mut Graph<S>) -> ModelParams<NodeId> {
        self.map(|_, t| g.parameter(t.clone()))
    }

    /// Adds every tensor as a constant leaf (no gradients).
    pub fn attach_constant(&self, g: &mut Graph<S>) -> ModelParams<NodeId> {
        self.map(|_, t| g.constant(t.clone()))
    }

    pub fn dims(&self) -> ModelDims {
        let e = &self.encoder;
        ModelDims {
            vocab: e.emb.dims()[0],
            emb: e.emb.dims()[1],
            enc_hidden: e.lstm.w_h.dims()[0],
            dec_hidden: self.decoder.u1_w_h.dims()[0],
            adv_hidden: self.adversary.lstm.w_h.dims()[0],
            latent: e.head_w.dims()[1] / 2,
            tie_embeddings: self.decoder.emb.is_none(),
        }
    }

    /// Checks every tensor against the shapes implied by `dims`.
    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        let reference = param_shapes(dims);
        let ours = self.entries();
        let theirs = reference.entries();
        if ours.len() != theirs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                theirs.len(),
                ours.len()
            )));
        }
        for ((name, t), (_, expected)) in ours.iter().zip(theirs) {
            if t.dims() != expected.as_slice() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: expected.clone(),
                    found: t.dims().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.values().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<Tensor<T>> {
        self.map(|_, t| t.cast())
    }
}

/// Shape of every tensor implied by `dims`.
pub fn param_shapes(dims: &ModelDims) -> ModelParams<Vec<usize>> {
    let ModelDims {
        vocab: v,
        emb: e,
        enc_hidden: he,
        dec_hidden: hd,
        adv_hidden: ha,
        latent: d,
        tie_embeddings,
    } = *dims;
    let lstm = |i: usize, h: usize| LstmParams {
        w_x: vec![i, 4 * h],
        w_h: vec![h, 4 * h],
        b: vec![1, 4 * h],
    };
    ModelParams {
        encoder: EncoderParams {
            emb: vec![v, e],
            lstm: lstm(e, he),
            head_w: vec![he, 2 * d],
            head_b: vec![1, 2 * d],
        },
        decoder: DecoderParams {
            emb: (!tie_embeddings).then(|| vec![v, e]),
            init_w: vec![d, 3 * hd],
            init_b: vec![1, 3 * hd],
            u1_w_z: vec![d, 4 * hd],
            u1_w_h: vec![hd, 4 * hd],
            u1_b: vec![1, 4 * hd],
            u2_w_z: vec![d, 4 * hd],
            u2_w_h: vec![hd, 4 * hd],
            u2_w_x: vec![e, 4 * hd],
            u2_b: vec![1, 4 * hd],
            out_w: vec![hd, v],
            out_b: vec![1, v],
        },
        adversary: AdversaryParams {
            emb: vec![v, e],
            lstm: lstm(e, ha),
            head_w: vec![ha, 2],
            head_b: vec![1, 2],
        },
    }
}

fn uniform<S: Scalar>(key: StreamKey, dims: &[usize]) -> Tensor<S> {
    let mut rng = key.rng();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
    Tensor::from_f64(dims, &data).expect("dims")
}

fn lstm_bias<S: Scalar>(hidden: usize) -> Tensor<S> {
    let mut b = Tensor::zeros(&[1, 4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = S::one();
    }
    b
}

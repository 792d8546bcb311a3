//! The shared transformer encoder: token and learned positional embeddings,
//! pre-norm self-attention blocks, and a pooling step that reduces a
//! sequence to one vector.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::TokenizedSequence;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Representation of the leading `[CLS]` position.
    Cls,
    /// Mean over non-pad positions.
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "mean" | "avg" | "average" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "CLS",
            Pooling::Mean => "MEAN",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_sequence_length: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// The desk-scale default: 64-wide, 2 heads, 2 layers.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_sequence_length: 64,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_sequence_length", self.max_sequence_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters held by the encoder.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let ff = self.d_ff;
        let embeddings = (self.vocab_size + self.max_sequence_length) * d;
        let attention = 4 * (d * d + d);
        let feed_forward = (d * ff + ff) + (ff * d + d);
        let norms = 2 * 2 * d;
        embeddings + self.n_layers * (attention + feed_forward + norms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: (ParamId, ParamId),
    pub key: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: (ParamId, ParamId),
    pub ff_out: (ParamId, ParamId),
}

/// Handles into the parameter store for the one encoder of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
}

pub(crate) fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|x| *x = normal.sample(rng));
    t
}

impl EncoderWeights {
    /// Registers freshly initialized encoder parameters in `store`:
    /// N(0, 0.02²) matrices and embeddings, zero biases, unit norm gains.
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let token_embedding = store.add(
            "embeddings.token",
            gaussian(rng, &[cfg.vocab_size, d], INIT_STD),
        );
        let position_embedding = store.add(
            "embeddings.position",
            gaussian(rng, &[cfg.max_sequence_length, d], INIT_STD),
        );

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let linear = |store: &mut ParamStore, rng: &mut _, name: &str, i: usize, o: usize| {
                (
                    store.add(p(&format!("{name}.weight")), gaussian(rng, &[i, o], INIT_STD)),
                    store.add(p(&format!("{name}.bias")), Tensor::zeros(&[o])),
                )
            };
            let ln1_gain = store.add(p("ln1.gain"), Tensor::full(&[d], 1.0));
            let ln1_bias = store.add(p("ln1.bias"), Tensor::zeros(&[d]));
            let query = linear(store, rng, "attn.query", d, d);
            let key = linear(store, rng, "attn.key", d, d);
            let value = linear(store, rng, "attn.value", d, d);
            let output = linear(store, rng, "attn.output", d, d);
            let ln2_gain = store.add(p("ln2.gain"), Tensor::full(&[d], 1.0));
            let ln2_bias = store.add(p("ln2.bias"), Tensor::zeros(&[d]));
            let ff_in = linear(store, rng, "ffn.in", d, ff);
            let ff_out = linear(store, rng, "ffn.out", ff, d);
            layers.push(LayerParams {
                ln1_gain,
                ln1_bias,
                query,
                key,
                value,
                output,
                ln2_gain,
                ln2_bias,
                ff_in,
                ff_out,
            });
        }
        Ok(EncoderWeights {
            config: cfg,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    /// Per-token representations `[len × d_model]`. Pad positions are never
    /// attended to, so they do not influence any real position.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &TokenizedSequence,
    ) -> Result<Var> {
        let cfg = &self.config;
        let len = seq.len();
        if len == 0 {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        if len > cfg.max_sequence_length {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds max_sequence_length {}",
                cfg.max_sequence_length
            )));
        }
        if seq.attention_mask.len() != len {
            return Err(Error::Input("attention mask length differs from ids".into()));
        }
        let keep: Vec<bool> = seq.attention_mask.iter().map(|&m| m == 1).collect();
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();

        let tok_table = g.param(store, self.token_embedding)?;
        let pos_table = g.param(store, self.position_embedding)?;
        let tok = g.tape.gather(tok_table, &ids)?;
        let pos = g.tape.slice_rows(pos_table, 0, len)?;
        let mut h = g.tape.add(tok, pos)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let (g1, b1) = (g.param(store, layer.ln1_gain)?, g.param(store, layer.ln1_bias)?);
            let a = g.tape.layer_norm(h, g1, b1)?;
            let q = linear(g, store, a, layer.query)?;
            let k = linear(g, store, a, layer.key)?;
            let v = linear(g, store, a, layer.value)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = g.tape.slice_cols(q, head * dh, dh)?;
                let kh = g.tape.slice_cols(k, head * dh, dh)?;
                let vh = g.tape.slice_cols(v, head * dh, dh)?;
                let kt = g.tape.transpose(kh)?;
                let scores = g.tape.matmul(qh, kt)?;
                let scores = g.tape.scale(scores, scale)?;
                let attn = g.tape.masked_softmax(scores, &keep)?;
                heads.push(g.tape.matmul(attn, vh)?);
            }
            let joined = g.tape.concat_cols(&heads)?;
            let attn_out = linear(g, store, joined, layer.output)?;
            h = g.tape.add(h, attn_out)?;

            let (g2, b2) = (g.param(store, layer.ln2_gain)?, g.param(store, layer.ln2_bias)?);
            let f = g.tape.layer_norm(h, g2, b2)?;
            let f = linear(g, store, f, layer.ff_in)?;
            let f = g.tape.gelu(f)?;
            let f = linear(g, store, f, layer.ff_out)?;
            h = g.tape.add(h, f)?;
        }
        Ok(h)
    }

    /// Forward pass followed by the configured pooling.
    pub fn encode_pooled(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &TokenizedSequence,
    ) -> Result<Var> {
        let reps = self.forward(g, store, seq)?;
        pool(g, reps, &seq.attention_mask, self.config.pooling)
    }
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let w = g.param(store, w)?;
    let b = g.param(store, b)?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_row(y, b)
}

/// Reduces `[len × d]` representations to one `[d]` vector.
pub fn pool(g: &mut Graph, reps: Var, mask: &[u8], strategy: Pooling) -> Result<Var> {
    if !mask.contains(&1) {
        return Err(Error::Input("pooling requires at least one real position".into()));
    }
    match strategy {
        Pooling::Cls => g.tape.row(reps, 0),
        Pooling::Mean => {
            let keep: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
            g.tape.masked_mean_rows(reps, &keep)
        }
    }
}

/// Fresh parameter store holding only an encoder built from `seed`.
pub fn init_weights(cfg: EncoderConfig, seed: u64) -> Result<(ParamStore, EncoderWeights)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = EncoderWeights::init(cfg, &mut store, &mut rng)?;
    Ok((store, enc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocab;

    fn tiny(pooling: Pooling) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_sequence_length: 12,
            pooling,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Pooling::Cls);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_heads = 0;
        assert!(c.validate().is_err());
        assert!(init_weights(c, 1).is_err());
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let (a, _) = init_weights(tiny(Pooling::Cls), 7).unwrap();
        let (b, _) = init_weights(tiny(Pooling::Cls), 7).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        let (c, _) = init_weights(tiny(Pooling::Cls), 8).unwrap();
        assert_ne!(a.flat_values(), c.flat_values());
        for (name, t) in a.iter() {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = EncoderConfig {
            vocab_size: 100,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_sequence_length: 32,
            pooling: Pooling::Mean,
        };
        // (100 + 32)·16 + 2·(4·(256+16) + (512+32) + (512+16) + 4·16)
        let hand = 132 * 16 + 2 * (4 * 272 + 544 + 528 + 64);
        assert_eq!(hand, 6560);
        assert_eq!(cfg.parameter_count(), 6560);
        let (store, _) = init_weights(cfg, 0).unwrap();
        assert_eq!(store.num_scalars(), 6560);
    }

    fn seq(ids: &[u32], pad: usize) -> TokenizedSequence {
        let mut s = TokenizedSequence {
            ids: ids.to_vec(),
            attention_mask: vec![1; ids.len()],
        };
        s = s.with_padding(pad);
        s
    }

    #[test]
    fn encode_shape_and_length_limit() {
        let (store, enc) = init_weights(tiny(Pooling::Cls), 3).unwrap();
        let mut g = Graph::new(&store);
        let out = enc.forward(&mut g, &store, &seq(&[2, 5, 6], 2)).unwrap();
        assert_eq!(g.tape.value(out).shape(), &[5, 8]);
        let long = seq(&[2; 13], 0);
        assert!(matches!(
            enc.forward(&mut g, &store, &long),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn padding_leaves_real_positions_unchanged() {
        for pooling in [Pooling::Cls, Pooling::Mean] {
            let (store, enc) = init_weights(tiny(pooling), 11).unwrap();
            let base = seq(&[2, 4, 7, 9], 0);
            let mut g = Graph::new(&store);
            let r0 = enc.forward(&mut g, &store, &base).unwrap();
            let p0 = enc.encode_pooled(&mut g, &store, &base).unwrap();
            for extra in [1, 5] {
                let padded = base.with_padding(extra);
                let r1 = enc.forward(&mut g, &store, &padded).unwrap();
                let p1 = enc.encode_pooled(&mut g, &store, &padded).unwrap();
                let a = g.tape.value(r0).data();
                let b = &g.tape.value(r1).data()[..a.len()];
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9));
                let (a, b) = (g.tape.value(p0).data(), g.tape.value(p1).data());
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9));
            }
        }
    }

    #[test]
    fn identical_sequences_identical_outputs() {
        let (store, enc) = init_weights(tiny(Pooling::Mean), 5).unwrap();
        let s = seq(&[2, 4, 3, 8], 1);
        let mut g = Graph::new(&store);
        let a = enc.forward(&mut g, &store, &s).unwrap();
        let b = enc.forward(&mut g, &store, &s).unwrap();
        assert_eq!(g.tape.value(a).data(), g.tape.value(b).data());
    }

    #[test]
    fn pool_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let reps = g
            .tape
            .leaf(Tensor::matrix(3, 2, vec![1.0, 1.0, 3.0, 3.0, 100.0, -50.0]).unwrap())
            .unwrap();
        let cls = pool(&mut g, reps, &[1, 1, 0], Pooling::Cls).unwrap();
        assert_eq!(g.tape.value(cls).data(), &[1.0, 1.0]);
        let mean = pool(&mut g, reps, &[1, 1, 0], Pooling::Mean).unwrap();
        assert_eq!(g.tape.value(mean).data(), &[2.0, 2.0]);
        assert!(matches!(
            pool(&mut g, reps, &[0, 0, 0], Pooling::Mean),
            Err(Error::Input(_))
        ));

        let same = g
            .tape
            .leaf(Tensor::matrix(2, 2, vec![0.5, -2.0, 0.5, -2.0]).unwrap())
            .unwrap();
        let mean = pool(&mut g, same, &[1, 1], Pooling::Mean).unwrap();
        assert_eq!(g.tape.value(mean).data(), &[0.5, -2.0]);
    }

    #[test]
    fn vocab_encoded_sequence_runs_through_encoder() {
        let vocab = Vocab::build(&["the cat sat", "the dog ran"], 12).unwrap();
        let (store, enc) = init_weights(tiny(Pooling::Mean), 2).unwrap();
        let s = vocab.encode_pair("the cat", "the dog ran", 10);
        let mut g = Graph::new(&store);
        let p = enc.encode_pooled(&mut g, &store, &s).unwrap();
        assert_eq!(g.tape.value(p).shape(), &[8]);
    }
}

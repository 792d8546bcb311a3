//! Oracles shared by the integration tests. Nothing here calls the tape:
//! the reference forward pass is written with plain loops over the
//! parameter store, so agreement with the library is meaningful.

#![allow(dead_code)]

use comve_core::encoder::{EncoderConfig, Pooling};
use comve_core::model::{Model, Prepared};
use comve_core::params::ParamStore;
use comve_core::tokenizer::{TokenizedSequence, CLS, PAD};
use rand::Rng;

pub fn tiny_config(vocab_size: usize, pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_sequence_length: 12,
        pooling,
    }
}

/// `[CLS]` followed by random non-special ids, padded to `max_len`.
pub fn random_sequence(rng: &mut impl Rng, vocab: usize, max_len: usize) -> TokenizedSequence {
    let real = rng.gen_range(2..=max_len);
    let mut ids = vec![CLS];
    ids.extend((1..real).map(|_| rng.gen_range(4..vocab as u32)));
    let mut attention_mask = vec![1u8; real];
    ids.resize(max_len, PAD);
    attention_mask.resize(max_len, 0);
    TokenizedSequence {
        ids,
        attention_mask,
    }
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    let id = store
        .find(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"));
    store.get(id).data()
}

/// `x[rows × i] · w[i × o] + b[o]`
fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let o = b.len();
    x.iter()
        .map(|row| {
            (0..o)
                .map(|c| b[c] + row.iter().enumerate().map(|(k, v)| v * w[k * o + c]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax computed straight from the definition `exp(xᵢ) / Σ exp(xⱼ)`
/// after subtracting the maximum.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pooled encoder output for one sequence.
pub fn reference_pooled(store: &ParamStore, cfg: &EncoderConfig, seq: &TokenizedSequence) -> Vec<f64> {
    let d = cfg.d_model;
    let len = seq.ids.len();
    let tok = param(store, "embeddings.token");
    let pos = param(store, "embeddings.position");
    let mut h: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let id = seq.ids[t] as usize;
            (0..d).map(|j| tok[id * d + j] + pos[t * d + j]).collect()
        })
        .collect();
    let dh = d / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let p = |s: &str| param(store, &format!("layers.{l}.{s}"));
        let a = layer_norm(&h, p("ln1.gain"), p("ln1.bias"));
        let q = affine(&a, p("attn.query.weight"), p("attn.query.bias"));
        let k = affine(&a, p("attn.key.weight"), p("attn.key.bias"));
        let v = affine(&a, p("attn.value.weight"), p("attn.value.bias"));
        let mut ctx = vec![vec![0.0; d]; len];
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .filter(|&j| seq.attention_mask[j] == 1)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                let real: Vec<usize> = (0..len).filter(|&j| seq.attention_mask[j] == 1).collect();
                for c in cols.clone() {
                    ctx[i][c] = real.iter().zip(&w).map(|(&j, wj)| wj * v[j][c]).sum();
                }
            }
        }
        let o = affine(&ctx, p("attn.output.weight"), p("attn.output.bias"));
        for (hr, or) in h.iter_mut().zip(&o) {
            hr.iter_mut().zip(or).for_each(|(x, y)| *x += y);
        }
        let f = layer_norm(&h, p("ln2.gain"), p("ln2.bias"));
        let mut f = affine(&f, p("ffn.in.weight"), p("ffn.in.bias"));
        f.iter_mut().flatten().for_each(|x| *x = gelu(*x));
        let f = affine(&f, p("ffn.out.weight"), p("ffn.out.bias"));
        for (hr, fr) in h.iter_mut().zip(&f) {
            hr.iter_mut().zip(fr).for_each(|(x, y)| *x += y);
        }
    }
    match cfg.pooling {
        Pooling::Cls => h[0].clone(),
        Pooling::Mean => {
            let real: Vec<usize> = (0..len).filter(|&t| seq.attention_mask[t] == 1).collect();
            (0..d)
                .map(|j| real.iter().map(|&t| h[t][j]).sum::<f64>() / real.len() as f64)
                .collect()
        }
    }
}

/// Siamese candidate logits `W·pooled + b`.
pub fn reference_logits(store: &ParamStore, cfg: &EncoderConfig, cands: &[TokenizedSequence]) -> Vec<f64> {
    let w = param(store, "scorer.weight");
    let b = param(store, "scorer.bias")[0];
    cands
        .iter()
        .map(|c| {
            let pooled = reference_pooled(store, cfg, c);
            b + pooled.iter().zip(w).map(|(x, y)| x * y).sum::<f64>()
        })
        .collect()
}

/// `−ln p_gold` for the siamese head.
pub fn reference_siamese_loss(store: &ParamStore, cfg: &EncoderConfig, ex: &Prepared) -> f64 {
    let p = softmax(&reference_logits(store, cfg, &ex.inputs));
    -p[ex.gold].max(1e-12).ln()
}

/// Backprop gradient of the library loss, flattened in store order.
pub fn analytic_gradient(model: &Model, ex: &Prepared) -> Vec<f64> {
    let mut m = model.clone();
    m.store.zero_grads();
    let mut g = comve_core::params::Graph::new(&m.store);
    let (loss, _) = m.forward(&mut g, ex).expect("forward");
    g.backward_into(loss, &mut m.store).expect("backward");
    m.store.flat_grads()
}

/// Central differences of `loss` over every scalar of `store`.
pub fn numeric_gradient(store: &ParamStore, h: f64, loss: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut s = store.clone();
    let mut out = Vec::with_capacity(s.num_scalars());
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let orig = s.get(id).data()[j];
            s.get_mut(id).data_mut()[j] = orig + h;
            let plus = loss(&s);
            s.get_mut(id).data_mut()[j] = orig - h;
            let minus = loss(&s);
            s.get_mut(id).data_mut()[j] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// AdamW on one scalar written out step by step.
pub fn scalar_adamw(x0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * x);
        out.push(x);
    }
    out
}

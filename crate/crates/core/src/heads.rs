//! Output heads over pooled encoder representations.
//!
//! [`ScorerHead`] maps each candidate's pooled vector to one scalar logit and
//! normalizes the logits of all candidates of an example with a softmax, so
//! every example yields exactly one selected candidate. [`BinaryClassifierHead`]
//! is the single-input two-class baseline.

use rand::Rng;

use crate::encoder::{gaussian, EncoderWeights, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{self, Tensor, Var};
use crate::tokenizer::TokenizedSequence;

/// Floor applied to the gold probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerHead {
    /// `[d_model]`
    pub weight: ParamId,
    /// `[1]`; shifts every candidate logit equally, so it never changes the
    /// distribution.
    pub bias: ParamId,
}

impl ScorerHead {
    pub fn init(d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        ScorerHead {
            weight: store.add("scorer.weight", gaussian(rng, &[d_model], INIT_STD)),
            bias: store.add("scorer.bias", Tensor::zeros(&[1])),
        }
    }

    /// Scalar logit `W·pooled + b` as a `[1]` node.
    pub fn logit(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let d = g.tape.value(pooled).numel();
        let w = g.param(store, self.weight)?;
        let w = g.tape.reshape(w, &[d, 1])?;
        let b = g.param(store, self.bias)?;
        let x = g.tape.reshape(pooled, &[1, d])?;
        let y = g.tape.matmul(x, w)?;
        let y = g.tape.reshape(y, &[1])?;
        g.tape.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryClassifierHead {
    /// `[2 × d_model]`
    pub weight: ParamId,
    /// `[2]`
    pub bias: ParamId,
}

impl BinaryClassifierHead {
    pub fn init(d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        BinaryClassifierHead {
            weight: store.add("classifier.weight", gaussian(rng, &[2, d_model], INIT_STD)),
            bias: store.add("classifier.bias", Tensor::zeros(&[2])),
        }
    }

    /// Two-class logits as a `[2]` node.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let d = g.tape.value(pooled).numel();
        let w = g.param(store, self.weight)?;
        let wt = g.tape.transpose(w)?;
        let b = g.param(store, self.bias)?;
        let x = g.tape.reshape(pooled, &[1, d])?;
        let y = g.tape.matmul(x, wt)?;
        let y = g.tape.reshape(y, &[2])?;
        g.tape.add(y, b)
    }
}

/// Softmax over candidates and the selected index.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateDistribution {
    pub probs: Vec<f64>,
    pub predicted_index: usize,
}

impl CandidateDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let predicted_index = argmax(&probs);
        CandidateDistribution {
            probs,
            predicted_index,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Candidate logits `[N]`, every candidate through the same encoder and head.
pub fn candidate_logits(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderWeights,
    head: &ScorerHead,
    candidates: &[TokenizedSequence],
) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidates to score".into()));
    }
    let mut logits = Vec::with_capacity(candidates.len());
    for c in candidates {
        let pooled = enc.encode_pooled(g, store, c)?;
        logits.push(head.logit(g, store, pooled)?);
    }
    g.tape.concat(&logits)
}

/// Candidate probabilities `[N]` on the tape.
pub fn candidate_probs(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderWeights,
    head: &ScorerHead,
    candidates: &[TokenizedSequence],
) -> Result<Var> {
    let logits = candidate_logits(g, store, enc, head, candidates)?;
    g.tape.softmax(logits)
}

pub fn score_candidates(
    store: &ParamStore,
    enc: &EncoderWeights,
    head: &ScorerHead,
    candidates: &[TokenizedSequence],
) -> Result<CandidateDistribution> {
    let mut g = Graph::new(store);
    let probs = candidate_probs(&mut g, store, enc, head, candidates)?;
    Ok(CandidateDistribution::from_probs(
        g.tape.value(probs).data().to_vec(),
    ))
}

/// Two-class probabilities `[2]` on the tape for a single input.
pub fn binary_probs(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderWeights,
    head: &BinaryClassifierHead,
    input: &TokenizedSequence,
) -> Result<Var> {
    let pooled = enc.encode_pooled(g, store, input)?;
    let logits = head.logits(g, store, pooled)?;
    g.tape.softmax(logits)
}

pub fn classify_binary(
    store: &ParamStore,
    enc: &EncoderWeights,
    head: &BinaryClassifierHead,
    input: &TokenizedSequence,
) -> Result<[f64; 2]> {
    let mut g = Graph::new(store);
    let p = binary_probs(&mut g, store, enc, head, input)?;
    let d = g.tape.value(p).data();
    Ok([d[0], d[1]])
}

/// Cross-entropy `−ln max(probs[gold], 1e-12)` as a scalar node.
pub fn siamese_loss(g: &mut Graph, probs: Var, gold: usize) -> Result<Var> {
    let n = g.tape.value(probs).numel();
    if gold >= n {
        return Err(Error::Input(format!(
            "gold index {gold} out of range for {n} candidates"
        )));
    }
    let p = g.tape.index(probs, gold)?;
    g.tape.neg_log_clamped(p, PROB_FLOOR)
}

/// [`siamese_loss`] evaluated on a plain distribution.
pub fn siamese_loss_value(dist: &CandidateDistribution, gold: usize) -> Result<f64> {
    let p = dist.probs.get(gold).ok_or_else(|| {
        Error::Input(format!(
            "gold index {gold} out of range for {} candidates",
            dist.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Distribution from raw logits, used where logits are produced outside a
/// model (tests, reports).
pub fn distribution_from_logits(logits: &[f64]) -> Result<CandidateDistribution> {
    Ok(CandidateDistribution::from_probs(tensor::softmax(logits)?))
}

//! A complete model (one encoder plus one head in one parameter store) and
//! the task-specific formatting that turns examples into model inputs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    make_candidates_a, make_candidates_b, ExplanationExample, TemplateKind, TemplateSpec,
    ValidationExample,
};
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::heads::{
    argmax, binary_probs, candidate_probs, siamese_loss, BinaryClassifierHead, ScorerHead,
};
use crate::params::{Graph, ParamStore};
use crate::tensor::Var;
use crate::tokenizer::{TokenizedSequence, Vocab};

/// Class index of a binary input judged correct (statement makes sense,
/// claim holds, reason explains).
pub const CLASS_TRUE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Pick the against-common-sense statement of a pair.
    A,
    /// Pick the reason that explains the against-common-sense statement.
    B,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Task::A),
            "B" => Ok(Task::B),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Siamese,
    Binary,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "siamese" => Ok(HeadKind::Siamese),
            "binary" => Ok(HeadKind::Binary),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Validation(ValidationExample),
    Explanation(ExplanationExample),
}

impl Example {
    pub fn id(&self) -> &str {
        match self {
            Example::Validation(e) => &e.id,
            Example::Explanation(e) => &e.id,
        }
    }

    pub fn label(&self) -> usize {
        match self {
            Example::Validation(e) => e.label,
            Example::Explanation(e) => e.label,
        }
    }
}

/// Model-ready form of one example.
///
/// For the siamese head `inputs` are the candidates, scored jointly. For
/// the binary head each input is classified on its own; `supports[i]` is the
/// option that input `i` argues for when classified true, and options are
/// ranked by the mean true-probability of their supporting inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub inputs: Vec<TokenizedSequence>,
    pub supports: Vec<usize>,
    pub n_options: usize,
    pub gold: usize,
}

/// How examples of a task are presented to a head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFormat {
    pub task: Task,
    pub head: HeadKind,
    pub template: Option<TemplateSpec>,
    pub max_len: usize,
}

const CHOICE_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl TaskFormat {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Config("max sequence length must be at least 3".into()));
        }
        let Some(t) = &self.template else {
            return Ok(());
        };
        if self.head == HeadKind::Siamese {
            return Err(Error::Config(format!(
                "template {:?} applies to the binary head only",
                t.name
            )));
        }
        match (self.task, t.kind()) {
            (Task::A, TemplateKind::Pair) => Ok(()),
            (Task::B, TemplateKind::Reason | TemplateKind::Choice) => Ok(()),
            (task, kind) => Err(Error::Config(format!(
                "template {:?} ({kind:?}) cannot be used with task {task:?}",
                t.name
            ))),
        }
    }

    pub fn prepare(&self, vocab: &Vocab, ex: &Example) -> Result<Prepared> {
        let max_len = self.max_len;
        let (inputs, supports, n_options, gold) = match (ex, self.head) {
            (Example::Validation(v), HeadKind::Siamese) => {
                let (c, gold) = make_candidates_a(vocab, v, max_len);
                (c, vec![0, 1], 2, gold)
            }
            (Example::Explanation(e), HeadKind::Siamese) => {
                let (c, gold) = make_candidates_b(vocab, e, max_len);
                (c, vec![0, 1, 2], 3, gold)
            }
            (Example::Validation(v), HeadKind::Binary) => {
                let s = v.sentences();
                match &self.template {
                    // "Sᵢ makes sense" argues the other one is the answer.
                    None => (
                        vec![vocab.encode(s[0], max_len), vocab.encode(s[1], max_len)],
                        vec![1, 0],
                        2,
                        v.label,
                    ),
                    // "Sᵢ makes more sense than Sⱼ" argues for j.
                    Some(t) => (
                        vec![
                            vocab.encode(&t.render_pair(s[0], s[1])?, max_len),
                            vocab.encode(&t.render_pair(s[1], s[0])?, max_len),
                        ],
                        vec![1, 0],
                        2,
                        v.label,
                    ),
                }
            }
            (Example::Explanation(e), HeadKind::Binary) => {
                let o = &e.options;
                match &self.template {
                    None => (make_candidates_b(vocab, e, max_len).0, vec![0, 1, 2], 3, e.label),
                    Some(t) if t.kind() == TemplateKind::Reason => {
                        let mut inputs = Vec::with_capacity(3);
                        for opt in o {
                            inputs.push(vocab.encode(&t.render_reason(&e.false_sent, opt)?, max_len));
                        }
                        (inputs, vec![0, 1, 2], 3, e.label)
                    }
                    Some(t) => {
                        let mut inputs = Vec::with_capacity(6);
                        let mut supports = Vec::with_capacity(6);
                        for p in CHOICE_PERMUTATIONS {
                            let text =
                                t.render_choice(&e.false_sent, [&o[p[0]], &o[p[1]], &o[p[2]]])?;
                            inputs.push(vocab.encode(&text, max_len));
                            supports.push(p[0]);
                        }
                        (inputs, supports, 3, e.label)
                    }
                }
            }
        };
        Ok(Prepared {
            id: ex.id().to_string(),
            inputs,
            supports,
            n_options,
            gold,
        })
    }

    pub fn prepare_all(&self, vocab: &Vocab, examples: &[Example]) -> Result<Vec<Prepared>> {
        examples.iter().map(|e| self.prepare(vocab, e)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Siamese(ScorerHead),
    Binary(BinaryClassifierHead),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Siamese(_) => HeadKind::Siamese,
            Head::Binary(_) => HeadKind::Binary,
        }
    }
}

/// Output of a model on one prepared example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Siamese: candidate probabilities. Binary: per-option mean
    /// true-probability (not normalized across options).
    pub option_scores: Vec<f64>,
    pub predicted_index: usize,
    /// Binary head only: hard class of every input.
    pub input_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub head: Head,
}

impl Model {
    /// Encoder parameters first, then the head, all from one seeded stream.
    pub fn new(cfg: EncoderConfig, head: HeadKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderWeights::init(cfg, &mut store, &mut rng)?;
        let head = match head {
            HeadKind::Siamese => Head::Siamese(ScorerHead::init(cfg.d_model, &mut store, &mut rng)),
            HeadKind::Binary => {
                Head::Binary(BinaryClassifierHead::init(cfg.d_model, &mut store, &mut rng))
            }
        };
        Ok(Model {
            store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Records the forward pass of one example on `g`; returns its scalar
    /// loss and the prediction.
    pub fn forward(&self, g: &mut Graph, ex: &Prepared) -> Result<(Var, Prediction)> {
        if ex.gold >= ex.n_options {
            return Err(Error::Input(format!(
                "gold index {} out of range for {} options",
                ex.gold, ex.n_options
            )));
        }
        let inputs: Vec<TokenizedSequence> = ex.inputs.iter().map(|s| s.trimmed()).collect();
        match &self.head {
            Head::Siamese(head) => {
                let probs = candidate_probs(g, &self.store, &self.encoder, head, &inputs)?;
                let loss = siamese_loss(g, probs, ex.gold)?;
                let p = g.tape.value(probs).data().to_vec();
                let predicted_index = argmax(&p);
                Ok((
                    loss,
                    Prediction {
                        option_scores: p,
                        predicted_index,
                        input_labels: Vec::new(),
                    },
                ))
            }
            Head::Binary(head) => {
                let mut losses = Vec::with_capacity(inputs.len());
                let mut true_probs = Vec::with_capacity(inputs.len());
                let mut input_labels = Vec::with_capacity(inputs.len());
                for (input, &supports) in inputs.iter().zip(&ex.supports) {
                    let probs = binary_probs(g, &self.store, &self.encoder, head, input)?;
                    let target = usize::from(supports == ex.gold);
                    losses.push(siamese_loss(g, probs, target)?);
                    let p = g.tape.value(probs).data();
                    input_labels.push(argmax(p));
                    true_probs.push(p[CLASS_TRUE]);
                }
                let joined = g.tape.concat(&losses)?;
                let total = g.tape.sum(joined)?;
                let loss = g.tape.scale(total, 1.0 / losses.len() as f64)?;

                let mut option_scores = vec![0.0; ex.n_options];
                let mut counts = vec![0usize; ex.n_options];
                for (&s, p) in ex.supports.iter().zip(&true_probs) {
                    option_scores[s] += p;
                    counts[s] += 1;
                }
                for (score, &c) in option_scores.iter_mut().zip(&counts) {
                    if c > 0 {
                        *score /= c as f64;
                    }
                }
                let predicted_index = argmax(&option_scores);
                Ok((
                    loss,
                    Prediction {
                        option_scores,
                        predicted_index,
                        input_labels,
                    },
                ))
            }
        }
    }

    pub fn predict(&self, ex: &Prepared) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        Ok(self.forward(&mut g, ex)?.1)
    }
}

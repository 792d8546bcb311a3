//! Task examples, CSV ingestion, input templates, candidate construction and
//! the synthetic corpus generator.

mod csv_io;
mod synthetic;
mod template;

pub use csv_io::{
    load_explanation_csv, load_validation_csv, read_explanation_data, read_validation_data,
    option_letter, write_explanation_csv, write_predictions_csv, write_validation_csv,
};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
pub use template::{TemplateKind, TemplateSpec};

use crate::tokenizer::{TokenizedSequence, Vocab};

/// Two statements, one of which is against common sense. `label` is the
/// index of the against-common-sense statement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationExample {
    pub id: String,
    pub sent0: String,
    pub sent1: String,
    pub label: usize,
}

impl ValidationExample {
    pub fn sentences(&self) -> [&str; 2] {
        [&self.sent0, &self.sent1]
    }

    /// Same example with the statements exchanged.
    pub fn swapped(&self) -> Self {
        ValidationExample {
            id: self.id.clone(),
            sent0: self.sent1.clone(),
            sent1: self.sent0.clone(),
            label: 1 - self.label,
        }
    }
}

/// An against-common-sense statement with three candidate reasons.
/// `label` is the index of the correct reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExplanationExample {
    pub id: String,
    pub false_sent: String,
    pub options: [String; 3],
    pub label: usize,
}

impl ExplanationExample {
    /// Reorders the options so that new position `i` holds old option
    /// `perm[i]`, moving the label along.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        let options = perm.map(|p| self.options[p].clone());
        let label = perm
            .iter()
            .position(|&p| p == self.label)
            .expect("perm is a permutation of 0..3");
        ExplanationExample {
            id: self.id.clone(),
            false_sent: self.false_sent.clone(),
            options,
            label,
        }
    }
}

/// Every sentence of a validation split, in order.
pub fn validation_sentences(examples: &[ValidationExample]) -> Vec<&str> {
    examples
        .iter()
        .flat_map(|e| [e.sent0.as_str(), e.sent1.as_str()])
        .collect()
}

pub fn explanation_sentences(examples: &[ExplanationExample]) -> Vec<&str> {
    examples
        .iter()
        .flat_map(|e| {
            std::iter::once(e.false_sent.as_str()).chain(e.options.iter().map(String::as_str))
        })
        .collect()
}

/// The two statements as separate candidates; gold is the
/// against-common-sense one.
pub fn make_candidates_a(
    vocab: &Vocab,
    ex: &ValidationExample,
    max_len: usize,
) -> (Vec<TokenizedSequence>, usize) {
    (
        vec![vocab.encode(&ex.sent0, max_len), vocab.encode(&ex.sent1, max_len)],
        ex.label,
    )
}

/// `[CLS] statement [SEP] reasonᵢ` for each of the three reasons.
pub fn make_candidates_b(
    vocab: &Vocab,
    ex: &ExplanationExample,
    max_len: usize,
) -> (Vec<TokenizedSequence>, usize) {
    (
        ex.options
            .iter()
            .map(|o| vocab.encode_pair(&ex.false_sent, o, max_len))
            .collect(),
        ex.label,
    )
}

//! Logical-fallacy rate and the ablation comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::encoder::Pooling;
use crate::error::{Error, Result};

/// Label predicted for one statement of a validation pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceLabel {
    pub pair_id: String,
    pub sentence_idx: usize,
    pub predicted_label: usize,
}

impl SentenceLabel {
    pub fn new(pair_id: impl Into<String>, sentence_idx: usize, predicted_label: usize) -> Self {
        SentenceLabel {
            pair_id: pair_id.into(),
            sentence_idx,
            predicted_label,
        }
    }
}

/// Fraction of pairs whose two statements received the same label, that
/// is both judged against common sense or both judged sensible.
pub fn fallacy_rate(labels: &[SentenceLabel]) -> Result<f64> {
    let mut pairs: BTreeMap<&str, Vec<&SentenceLabel>> = BTreeMap::new();
    for l in labels {
        pairs.entry(l.pair_id.as_str()).or_default().push(l);
    }
    if pairs.is_empty() {
        return Err(Error::Input("fallacy rate of an empty prediction set".into()));
    }
    let mut same = 0usize;
    for (id, entries) in &pairs {
        let complete = entries.len() == 2 && entries[0].sentence_idx != entries[1].sentence_idx;
        if !complete {
            return Err(Error::Input(format!(
                "pair {id:?} needs exactly two distinct sentence entries, found {}",
                entries.len()
            )));
        }
        if entries[0].predicted_label == entries[1].predicted_label {
            same += 1;
        }
    }
    Ok(same as f64 / pairs.len() as f64)
}

/// Per-statement labels implied by a choice over a pair: the chosen
/// statement is labelled 0 (against common sense), the other 1.
pub fn labels_from_choice(pair_id: &str, chosen: usize) -> [SentenceLabel; 2] {
    [0, 1].map(|i| SentenceLabel::new(pair_id, i, usize::from(i != chosen)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportHead {
    Binary,
    BinaryPhrase,
    Siamese,
}

impl std::fmt::Display for ReportHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReportHead::Binary => "binary",
            ReportHead::BinaryPhrase => "binary+phrase",
            ReportHead::Siamese => "siamese",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model_name: String,
    pub head_kind: ReportHead,
    pub pooling: Pooling,
    pub dev_accuracy: f64,
    /// Validation task only.
    pub fallacy_rate: Option<f64>,
}

/// A published dev-set accuracy for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEntry {
    pub model_name: &'static str,
    pub head_kind: ReportHead,
    pub pooling: Pooling,
    pub accuracy: f64,
}

const fn entry(model_name: &'static str, head_kind: ReportHead, pooling: Pooling, accuracy: f64) -> ReferenceEntry {
    ReferenceEntry {
        model_name,
        head_kind,
        pooling,
        accuracy,
    }
}

/// Dev accuracies reported with pretrained encoders, validation task.
pub const REFERENCE_A: [ReferenceEntry; 7] = [
    entry("BERT Classifier", ReportHead::Binary, Pooling::Cls, 0.771),
    entry("BERT Classifier + phrase concat.", ReportHead::BinaryPhrase, Pooling::Cls, 0.843),
    entry("Albert-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.876),
    entry("BERT-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.886),
    entry("RoBERTa-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.907),
    entry("Electra-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.936),
    entry("RoBERTa-large Siamese", ReportHead::Siamese, Pooling::Cls, 0.952),
];

/// Dev accuracies reported with pretrained encoders, explanation task.
pub const REFERENCE_B: [ReferenceEntry; 7] = [
    entry("BERT Classifier", ReportHead::Binary, Pooling::Cls, 0.773),
    entry("BERT Classifier + phrase concat", ReportHead::BinaryPhrase, Pooling::Cls, 0.832),
    entry("BERT-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.843),
    entry("AlBERT-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.857),
    entry("RoBERTa-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.875),
    entry("Electra-base Siamese", ReportHead::Siamese, Pooling::Cls, 0.877),
    entry("RoBERTa-base Siamese+avg. pool", ReportHead::Siamese, Pooling::Mean, 0.897),
];

/// Test-set accuracies of the submitted systems (validation, explanation).
pub const REFERENCE_TEST_ACCURACY: (f64, f64) = (0.948, 0.89);

pub const REFERENCE_COLUMN: &str = "published (not desk-reproducible)";

/// Best published entry with the same head, preferring the same pooling.
fn best_reference<'a>(row: &AblationRow, reference: &'a [ReferenceEntry]) -> Option<&'a ReferenceEntry> {
    let best = |same_pooling: bool| {
        reference
            .iter()
            .filter(|r| r.head_kind == row.head_kind && (!same_pooling || r.pooling == row.pooling))
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
    };
    best(true).or_else(|| best(false))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

pub fn build_report(rows: &[AblationRow], reference: Option<&[ReferenceEntry]>) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::Input("report needs at least one row".into()));
    }
    for r in rows {
        let in_range = |x: f64| (0.0..=1.0).contains(&x);
        if !in_range(r.dev_accuracy) || !r.fallacy_rate.is_none_or(in_range) {
            return Err(Error::Input(format!(
                "row {:?} has a value outside [0, 1]",
                r.model_name
            )));
        }
    }

    let mut header = vec![
        "model".to_string(),
        "head".to_string(),
        "pooling".to_string(),
        "dev_accuracy".to_string(),
        "fallacy_rate".to_string(),
    ];
    if reference.is_some() {
        header.push(REFERENCE_COLUMN.to_string());
    }

    let mut cells: Vec<Vec<String>> = Vec::with_capacity(rows.len());
    let mut csv_rows: Vec<Vec<String>> = Vec::with_capacity(rows.len());
    for r in rows {
        let fallacy = r.fallacy_rate.map_or("-".to_string(), |f| format!("{f:.3}"));
        let mut line = vec![
            r.model_name.clone(),
            r.head_kind.to_string(),
            r.pooling.to_string(),
            pct(r.dev_accuracy),
            fallacy.clone(),
        ];
        let mut csv_line = vec![
            r.model_name.clone(),
            r.head_kind.to_string(),
            r.pooling.to_string(),
            format!("{:.6}", r.dev_accuracy),
            r.fallacy_rate.map_or(String::new(), |f| format!("{f:.6}")),
        ];
        if let Some(reference) = reference {
            match best_reference(r, reference) {
                Some(e) => {
                    line.push(format!("{} ({})", pct(e.accuracy), e.model_name));
                    csv_line.push(format!("{:.3}", e.accuracy));
                }
                None => {
                    line.push("-".into());
                    csv_line.push(String::new());
                }
            }
        }
        cells.push(line);
        csv_rows.push(csv_line);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            cells
                .iter()
                .map(|l| l[c].chars().count())
                .chain(std::iter::once(header[c].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_line = |line: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in line.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            let _ = write!(s, "{cell:<w$}");
        }
        s.trim_end().to_string()
    };
    let mut text = fmt_line(&header);
    text.push('\n');
    text.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    text.push('\n');
    for line in &cells {
        text.push_str(&fmt_line(line));
        text.push('\n');
    }

    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Format(format!("report csv: {e}"));
    w.write_record(&header).map_err(to_err)?;
    for r in &csv_rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("report csv: {e}")))?;
    let csv = String::from_utf8(bytes).expect("csv output is utf-8");
    Ok(Report { text, csv })
}

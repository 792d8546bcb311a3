//! Word-level tokenizer with BERT-style special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases and splits on whitespace; every punctuation character
/// becomes a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Format(format!(
                    "vocab line {} must be {special}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Keeps the `max_size - 4` most frequent words (ties broken
    /// lexicographically) after the four reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocab from an empty corpus".into()));
        }
        if max_size < SPECIAL_TOKENS.len() {
            return Err(Error::Input(format!(
                "max vocab size {max_size} is smaller than the {} reserved tokens",
                SPECIAL_TOKENS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for w in split_words(sentence.as_ref()) {
                if !SPECIAL_TOKENS.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - SPECIAL_TOKENS.len())
                .map(|(w, _)| w),
        );
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn word_ids(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// `[CLS] tokens…`, truncated to `max_len` and padded with `[PAD]`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenizedSequence {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = vec![CLS];
        ids.extend(self.word_ids(text));
        ids.truncate(max_len);
        TokenizedSequence::padded(ids, max_len)
    }

    /// `[CLS] a… [SEP] b…`. When the pair does not fit, one token at a time
    /// is removed from the end of the currently longer side (the second side
    /// on ties).
    pub fn encode_pair(&self, a: &str, b: &str, max_len: usize) -> TokenizedSequence {
        assert!(max_len >= 3, "max_len must be at least 3");
        let mut left = self.word_ids(a);
        let mut right = self.word_ids(b);
        let budget = max_len - 2;
        while left.len() + right.len() > budget {
            if left.len() > right.len() {
                left.pop();
            } else {
                right.pop();
            }
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(left);
        ids.push(SEP);
        ids.extend(right);
        TokenizedSequence::padded(ids, max_len)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenizedSequence {
    fn padded(mut ids: Vec<u32>, max_len: usize) -> Self {
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        TokenizedSequence {
            ids,
            attention_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// The same sequence with trailing pad positions removed.
    pub fn trimmed(&self) -> TokenizedSequence {
        let end = self
            .attention_mask
            .iter()
            .rposition(|&m| m == 1)
            .map_or(0, |p| p + 1);
        TokenizedSequence {
            ids: self.ids[..end].to_vec(),
            attention_mask: self.attention_mask[..end].to_vec(),
        }
    }

    /// The same sequence with `extra` pad positions appended.
    pub fn with_padding(&self, extra: usize) -> TokenizedSequence {
        let mut ids = self.ids.clone();
        let mut attention_mask = self.attention_mask.clone();
        ids.extend(std::iter::repeat_n(PAD, extra));
        attention_mask.extend(std::iter::repeat_n(0, extra));
        TokenizedSequence {
            ids,
            attention_mask,
        }
    }

    pub fn sep_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i == SEP).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_ab() -> Vocab {
        Vocab::build(&["a b", "a c"], 10).unwrap()
    }

    #[test]
    fn split_handles_punctuation_and_case() {
        assert_eq!(
            split_words("He put Milk on cereal."),
            vec!["he", "put", "milk", "on", "cereal", "."]
        );
        assert_eq!(split_words("don't"), vec!["don", "'", "t"]);
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn build_small_vocab() {
        let v = vocab_ab();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[..4], &SPECIAL_TOKENS);
        // "a" is most frequent, then b, c lexicographically.
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
    }

    #[test]
    fn build_caps_size_keeping_most_frequent() {
        let v = Vocab::build(&["x y y z z z", "w"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(4), Some("z"));
        let v = Vocab::build(&["x y y z z z", "w"], 6).unwrap();
        assert_eq!(v.token(5), Some("y"));
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = ["the cat ate", "a dog ran", "the dog ate"];
        assert_eq!(
            Vocab::build(&corpus, 8).unwrap(),
            Vocab::build(&corpus, 8).unwrap()
        );
    }

    #[test]
    fn build_rejects_empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocab::build(&empty, 10), Err(Error::Input(_))));
    }

    #[test]
    fn encode_examples() {
        let v = vocab_ab();
        let s = v.encode("a b", 5);
        assert_eq!(s.ids, vec![CLS, v.id("a"), v.id("b"), PAD, PAD]);
        assert_eq!(s.attention_mask, vec![1, 1, 1, 0, 0]);

        let s = v.encode("a zebra", 4);
        assert_eq!(s.ids[2], UNK);

        let s = v.encode("a b c a b c", 4);
        assert_eq!(s.ids.len(), 4);
        assert_eq!(s.attention_mask, vec![1; 4]);

        let s = v.encode("", 3);
        assert_eq!(s.ids, vec![CLS, PAD, PAD]);
    }

    #[test]
    fn encode_pair_examples() {
        let v = vocab_ab();
        let (a, b) = (v.id("a"), v.id("b"));
        let s = v.encode_pair("a", "b", 6);
        assert_eq!(s.ids, vec![CLS, a, SEP, b, PAD, PAD]);

        let s = v.encode_pair("", "b", 5);
        assert_eq!(s.ids, vec![CLS, SEP, b, PAD, PAD]);

        // Budget 6 over two 5-token sides: 3 each.
        let s = v.encode_pair("a a a a a", "b b b b b", 8);
        assert_eq!(s.ids, vec![CLS, a, a, a, SEP, b, b, b]);
    }

    #[test]
    fn vocab_text_roundtrip() {
        let v = vocab_ab();
        let text = v.to_text();
        assert_eq!(text.lines().next(), Some("[PAD]"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("[UNK]\n[PAD]\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_invariants(text in "[a-d ,.!]{0,40}", max_len in 2usize..12) {
            let v = Vocab::build(&["a b c", "b c"], 6).unwrap();
            let s = v.encode(&text, max_len);
            prop_assert_eq!(s.len(), max_len);
            prop_assert_eq!(s.ids[0], CLS);
            for (&id, &m) in s.ids.iter().zip(&s.attention_mask) {
                prop_assert!((id as usize) < v.len());
                prop_assert_eq!(m == 0, id == PAD);
            }
        }

        #[test]
        fn encode_pair_invariants(a in "[a-c ]{0,30}", b in "[a-c ]{0,30}", max_len in 3usize..16) {
            let v = Vocab::build(&["a b c"], 7).unwrap();
            let s = v.encode_pair(&a, &b, max_len);
            prop_assert_eq!(s.len(), max_len);
            prop_assert_eq!(s.sep_count(), 1);
            for (&id, &m) in s.ids.iter().zip(&s.attention_mask) {
                prop_assert_eq!(m == 0, id == PAD);
            }
        }
    }
}

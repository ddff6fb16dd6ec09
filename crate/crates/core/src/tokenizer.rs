//! Word-level tokenizer with a corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNKNOWN: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercased words and single punctuation marks.
pub fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' || c == '-' {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if c.is_ascii_punctuation() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        Self::from_vocab(vocab)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    /// Builds a vocabulary from every piece in `texts`, sorted for
    /// reproducibility, after the special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(word_pieces).collect();
        let vocab = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// `[START, pieces…, END]`, content clipped so the total stays within
    /// `limit` (minimum 2).
    pub fn encode(&self, text: &str, limit: usize) -> Vec<usize> {
        let budget = limit.max(2) - 2;
        let mut ids = Vec::with_capacity(limit);
        ids.push(START);
        ids.extend(
            word_pieces(text)
                .iter()
                .take(budget)
                .map(|p| self.index.get(p).copied().unwrap_or(UNKNOWN)),
        );
        ids.push(END);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= UNKNOWN)
            .map(|&i| self.vocab.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_split_punctuation() {
        assert_eq!(word_pieces("A red Square, top-left."), vec!["a", "red", "square", ",", "top-left", "."]);
    }

    #[test]
    fn encode_wraps_and_clips() {
        let tok = Tokenizer::build(["a red square.", "a blue circle."]);
        let ids = tok.encode("a red circle.", 77);
        assert_eq!(ids.len(), 6);
        assert_eq!((ids[0], ids[5]), (START, END));
        assert_eq!(tok.decode(&ids), "a red circle .");
        let clipped = tok.encode("a red circle.", 4);
        assert_eq!(clipped.len(), 4);
        assert_eq!(*clipped.last().unwrap(), END);
        assert_eq!(tok.encode("purple", 77)[1], UNKNOWN);
        assert_eq!(tok.encode("", 77), vec![START, END]);
    }
}

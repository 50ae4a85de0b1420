//! Word-level tokenizer over a closed vocabulary.
//!
//! A string is split on whitespace and trailing punctuation marks become
//! tokens of their own. Decoding glues punctuation back onto the previous
//! word, so canonical strings (single spaces, punctuation attached to the
//! preceding word) survive a round trip unchanged.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];
const PUNCT: [char; 5] = [',', '.', '?', ':', '!'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_punct(word: &str) -> bool {
    let mut chars = word.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCT.contains(&c))
}

/// Split a string into word and punctuation pieces.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut end = chunk.len();
        let mut tail = Vec::new();
        while end > 0 {
            let c = chunk[..end].chars().next_back().expect("nonempty");
            if PUNCT.contains(&c) {
                tail.push(&chunk[end - c.len_utf8()..end]);
                end -= c.len_utf8();
            } else {
                break;
            }
        }
        if end > 0 {
            out.push(&chunk[..end]);
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

impl Tokenizer {
    /// Vocabulary = special tokens, then the sorted unique pieces of `texts`.
    pub fn from_texts<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for p in pieces(t) {
                set.insert(p.to_string());
            }
        }
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Encode, mapping unknown words to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        pieces(text).into_iter().map(|p| self.id(p).unwrap_or(UNK)).collect()
    }

    /// Encode, failing on any out-of-vocabulary word.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        pieces(text)
            .into_iter()
            .map(|p| self.id(p).ok_or_else(|| Error::Vocab(format!("'{p}' is not in the vocabulary"))))
            .collect()
    }

    /// Decode, skipping padding, BOS and EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let w = self.words.get(id).map(String::as_str).unwrap_or("<unk>");
            if !out.is_empty() && !is_punct(w) {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

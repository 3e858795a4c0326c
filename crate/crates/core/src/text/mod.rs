//! Caption tokenization, vocabularies, keyword extraction and co-occurrence lists.

mod cooc;
mod keywords;
mod vocab;

pub use cooc::CooccurrenceTable;
pub use keywords::{meta_surfaces, KeywordVocabulary, LemmaTable};
pub use vocab::{EncodedCaption, VocabEntry, WordVocabulary};

use serde::{Deserialize, Serialize};

/// Tokenizer behaviour on hyphens and apostrophes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// `"dog-like"` becomes `[dog, like]` when set.
    pub split_hyphens: bool,
    /// `"can't"` stays one token when set; otherwise it becomes `[can, t]`.
    pub keep_contractions: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            split_hyphens: true,
            keep_contractions: true,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let is_joiner = |c: char| {
            (c == '\'' || c == '\u{2019}') && self.keep_contractions
                || c == '-' && !self.split_hyphens
        };
        let mut out = Vec::new();
        let mut current = String::new();
        let chars: Vec<char> = lower.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                current.push(c);
            } else if is_joiner(c)
                && !current.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
            {
                current.push(if c == '\u{2019}' { '\'' } else { c });
            } else if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }
}

/// Lowercase word tokens with punctuation removed, using the default tokenizer.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

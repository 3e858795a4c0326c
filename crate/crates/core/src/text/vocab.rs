use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// One persisted vocabulary row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub id: u32,
    pub count: u64,
}

/// Word ↔ id map with the four special tokens at ids 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

/// Caption ids laid out as `[BOS, w.., EOS, PAD..]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedCaption {
    pub ids: Vec<u32>,
    /// Word count clamped to `[1, l_max]`.
    pub length: usize,
    pub tokens: Vec<String>,
}

impl WordVocabulary {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    /// Words seen more than `min_count` times, ordered by count then lexicographically.
    pub fn build<'a, I, S>(captions: I, min_count: u64) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for caption in captions {
            for tok in caption {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(t, c)| c > min_count && !Self::SPECIALS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let entries = Self::SPECIALS
            .iter()
            .map(|s| (s.to_string(), 0))
            .chain(kept.into_iter().map(|(t, c)| (t.to_string(), c)));
        Self::from_pairs(entries)
    }

    fn from_pairs(pairs: impl IntoIterator<Item = (String, u64)>) -> Self {
        let (tokens, counts): (Vec<String>, Vec<u64>) = pairs.into_iter().unzip();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        id <= Self::UNK
    }

    pub fn encode(&self, tokens: &[String], n: usize, l_max: usize) -> EncodedCaption {
        let mut ids = Vec::with_capacity(n);
        ids.push(Self::BOS);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(Self::EOS);
        ids.truncate(n);
        ids.resize(n, Self::PAD);
        EncodedCaption {
            ids,
            length: tokens.len().clamp(1, l_max),
            tokens: tokens.to_vec(),
        }
    }

    /// Words up to the first EOS, skipping BOS and PAD.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != Self::EOS)
            .filter(|&&i| i != Self::BOS && i != Self::PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn entries(&self) -> Vec<VocabEntry> {
        self.tokens
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (t, &c))| VocabEntry {
                token: t.clone(),
                id: i as u32,
                count: c,
            })
            .collect()
    }

    pub fn from_entries(mut entries: Vec<VocabEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(crate::Error::Config(format!(
                    "vocabulary ids are not dense at {}",
                    e.token
                )));
            }
        }
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            if entries.get(i).map(|e| e.token.as_str()) != Some(s) {
                return Err(crate::Error::Config(format!(
                    "vocabulary special {s} missing at id {i}"
                )));
            }
        }
        Ok(Self::from_pairs(entries.into_iter().map(|e| (e.token, e.count))))
    }

    /// Hex SHA-256 over the ordered token list; equal hashes mean identical id maps.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.entries())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<VocabEntry> = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_entries(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = WordVocabulary::build(std::iter::empty::<&[String]>(), 5);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("<bos>"), WordVocabulary::BOS);
        assert_eq!(v.id("anything"), WordVocabulary::UNK);
    }

    #[test]
    fn threshold_is_strictly_greater() {
        let caps: Vec<Vec<String>> = (0..6)
            .map(|i| if i < 5 { toks("six five") } else { toks("six") })
            .collect();
        let v = WordVocabulary::build(caps.iter().map(Vec::as_slice), 5);
        assert!(v.contains("six"));
        assert!(!v.contains("five"));
    }

    #[test]
    fn ties_break_lexicographically() {
        let caps = [toks("b a c c")];
        let v = WordVocabulary::build(caps.iter().map(Vec::as_slice), 0);
        assert_eq!(v.token(4), "c");
        assert_eq!(v.token(5), "a");
        assert_eq!(v.token(6), "b");
    }

    #[test]
    fn encode_layout() {
        let caps = [toks("a car passes")];
        let v = WordVocabulary::build(caps.iter().map(Vec::as_slice), 0);
        let e = v.encode(&toks("a car zoom"), 20, 20);
        assert_eq!(e.length, 3);
        assert_eq!(e.ids[0], WordVocabulary::BOS);
        assert_eq!(e.ids[3], WordVocabulary::UNK);
        assert_eq!(e.ids[4], WordVocabulary::EOS);
        assert!(e.ids[5..].iter().all(|&i| i == WordVocabulary::PAD));

        let long: Vec<String> = (0..25).map(|_| "a".to_string()).collect();
        let e = v.encode(&long, 20, 20);
        assert_eq!(e.ids.len(), 20);
        assert_eq!(e.length, 20);
        assert!(!e.ids.contains(&WordVocabulary::EOS));
    }

    #[test]
    fn json_roundtrip() {
        let caps = [toks("x y y z z z")];
        let v = WordVocabulary::build(caps.iter().map(Vec::as_slice), 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let w = WordVocabulary::load(&p).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.hash(), w.hash());
    }
}

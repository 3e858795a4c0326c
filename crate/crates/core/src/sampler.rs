//! IDF-weighted sample and caption selection, TF-IDF word replacement and mix-up draws.

use std::collections::{HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::audio::FeatureTensor;
use crate::error::Result;

/// `ln((1 + N) / (1 + df))` for every word in `docs`.
pub fn idf_table<S: AsRef<str>>(docs: &[Vec<S>]) -> HashMap<String, f64> {
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        let unique: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for w in unique {
            *df.entry(w).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    df.into_iter()
        .map(|(w, d)| (w.to_string(), ((1.0 + n) / (1.0 + d as f64)).ln()))
        .collect()
}

fn normalise(mut weights: Vec<f64>) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        let n = weights.len();
        log::warn!("all selection weights are zero; falling back to uniform over {n}");
        return vec![1.0 / n as f64; n];
    }
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// Each document's mean token IDF, normalised into a categorical distribution.
///
/// Falls back to uniform when every average is zero.
pub fn average_idf_distribution<S: AsRef<str>>(docs: &[Vec<S>]) -> Vec<f64> {
    let idf = idf_table(docs);
    let avg = docs
        .iter()
        .map(|d| {
            if d.is_empty() {
                0.0
            } else {
                d.iter().map(|w| idf[w.as_ref()]).sum::<f64>() / d.len() as f64
            }
        })
        .collect();
    normalise(avg)
}

/// Distribution over audio items; each document is the concatenation of an item's captions.
pub fn audio_selection_distribution<S: AsRef<str>>(items: &[Vec<Vec<S>>]) -> Vec<f64> {
    let docs: Vec<Vec<&str>> = items
        .iter()
        .map(|caps| caps.iter().flatten().map(AsRef::as_ref).collect())
        .collect();
    average_idf_distribution(&docs)
}

/// Distribution over one item's captions, with those captions as the documents.
pub fn caption_selection_distribution<S: AsRef<str>>(captions: &[Vec<S>], uniform: bool) -> Vec<f64> {
    if uniform {
        return vec![1.0 / captions.len() as f64; captions.len()];
    }
    average_idf_distribution(captions)
}

/// Draw an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(probs)
        .expect("selection weights are a valid distribution")
        .sample(rng)
}

/// Word replacement with per-token probability growing as TF-IDF falls below the caption maximum.
#[derive(Clone, Debug)]
pub struct TfidfReplacer {
    idf: HashMap<String, f64>,
    unseen_idf: f64,
    candidates: Vec<String>,
    sampler: Option<WeightedIndex<f64>>,
    pub rate: f64,
}

impl TfidfReplacer {
    /// `docs` are the training captions; replacements come from words passing `allow`.
    pub fn new<S: AsRef<str>>(docs: &[Vec<S>], rate: f64, allow: impl Fn(&str) -> bool) -> Self {
        let idf = idf_table(docs);
        let unseen_idf = (1.0 + docs.len() as f64).ln();
        let mut score: HashMap<&str, f64> = HashMap::new();
        for doc in docs {
            let len = doc.len().max(1) as f64;
            for w in doc {
                let w = w.as_ref();
                *score.entry(w).or_default() += idf[w] / len;
            }
        }
        let mut pool: Vec<(&str, f64)> = score.into_iter().filter(|(w, _)| allow(w)).collect();
        pool.sort_by(|a, b| a.0.cmp(b.0));
        let max = pool.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pool.iter().map(|p| max - p.1).collect();
        let sampler = WeightedIndex::new(&weights).ok();
        Self {
            idf,
            unseen_idf,
            candidates: pool.into_iter().map(|p| p.0.to_string()).collect(),
            sampler,
            rate,
        }
    }

    pub fn idf(&self, word: &str) -> f64 {
        self.idf.get(word).copied().unwrap_or(self.unseen_idf)
    }

    /// Chance that one replacement draw returns `word`.
    pub fn draw_probability(&self, word: &str) -> f64 {
        let Some(s) = &self.sampler else { return 0.0 };
        let Some(i) = self.candidates.iter().position(|c| c == word) else {
            return 0.0;
        };
        let total: f64 = s.weights().sum();
        s.weights().nth(i).unwrap_or(0.0) / total
    }

    /// Replacement probability of every token; protected tokens get 0.
    pub fn replacement_probabilities<S: AsRef<str>>(
        &self,
        tokens: &[S],
        protected: impl Fn(&str) -> bool,
    ) -> Vec<f64> {
        if tokens.is_empty() {
            return Vec::new();
        }
        let len = tokens.len() as f64;
        let mut tf: HashMap<&str, f64> = HashMap::new();
        for t in tokens {
            *tf.entry(t.as_ref()).or_default() += 1.0 / len;
        }
        let scores: Vec<f64> = tokens
            .iter()
            .map(|t| tf[t.as_ref()] * self.idf(t.as_ref()))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean_gap = scores.iter().map(|s| max - s).sum::<f64>() / len;
        tokens
            .iter()
            .zip(&scores)
            .map(|(t, s)| {
                if protected(t.as_ref()) || mean_gap <= 0.0 {
                    0.0
                } else {
                    (self.rate * (max - s) / mean_gap).min(1.0)
                }
            })
            .collect()
    }

    pub fn replace<S: AsRef<str>, R: Rng + ?Sized>(
        &self,
        tokens: &[S],
        protected: impl Fn(&str) -> bool,
        rng: &mut R,
    ) -> Vec<String> {
        let probs = self.replacement_probabilities(tokens, protected);
        tokens
            .iter()
            .zip(probs)
            .map(|(t, p)| match &self.sampler {
                Some(s) if p > 0.0 && rng.random::<f64>() < p => self.candidates[s.sample(rng)].clone(),
                _ => t.as_ref().to_string(),
            })
            .collect()
    }
}

/// One minibatch's mixing weight and partner permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    pub beta: f64,
    pub partners: Vec<usize>,
}

/// `β ~ Beta(alpha, alpha)`, redrawn until strictly inside `(0, 1)`.
pub fn draw_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let dist = Beta::new(alpha, alpha).expect("alpha must be positive");
    loop {
        let b = dist.sample(rng);
        if b > 0.0 && b < 1.0 {
            return b;
        }
    }
}

pub fn draw_mixup<R: Rng + ?Sized>(batch: usize, alpha: f64, rng: &mut R) -> MixupDraw {
    let beta = draw_beta(alpha, rng);
    let mut partners: Vec<usize> = (0..batch).collect();
    partners.shuffle(rng);
    MixupDraw { beta, partners }
}

/// `β·x1 + (1 − β)·x2`.
pub fn mix_audio(x1: &FeatureTensor, x2: &FeatureTensor, beta: f64) -> Result<FeatureTensor> {
    x1.mix(x2, beta)
}

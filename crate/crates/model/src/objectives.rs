//! Loss terms and their combination under mix-up.
//!
//! Every term is linear in its labels, so each is expressed as a constant
//! weight tensor contracted with a network output. Mixing the labels of two
//! items with β therefore equals mixing the two losses.

use std::collections::BTreeSet;

use audiocap_core::text::WordVocabulary;
use audiocap_nn::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::net::Forward;

/// Clamp applied to probabilities inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;
/// Weight of the sentence-length loss.
pub const LENGTH_WEIGHT: f64 = 1e-2;
/// Per-step decay of the keyword loss weight.
pub const KEYWORD_DECAY: f64 = 1e-4;
/// Meta keyword loss weight under `param2`.
pub const PARAM2_META_WEIGHT: f64 = 0.8;

/// `(1 − 10⁻⁴)^s`.
pub fn keyword_loss_weight(step: u64) -> f64 {
    (1.0 - KEYWORD_DECAY).powf(step as f64)
}

/// Keyword priors with their positive/negative weights λ = 1/p and γ = 1/(1 − p).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordPriors {
    pub prior: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl KeywordPriors {
    /// Priors from per-keyword item counts; clamped to `[1/(2n), 1 − 1/(2n)]`.
    pub fn from_counts(counts: &[usize], n_items: usize) -> Self {
        let n = n_items.max(1) as f64;
        let lo = 1.0 / (2.0 * n);
        let prior: Vec<f64> = counts
            .iter()
            .map(|&c| (c as f64 / n).clamp(lo, 1.0 - lo))
            .collect();
        Self::from_priors(prior)
    }

    /// Priors taken as given (no clamping).
    pub fn from_priors(prior: Vec<f64>) -> Self {
        Self {
            lambda: prior.iter().map(|p| 1.0 / p).collect(),
            gamma: prior.iter().map(|p| 1.0 / (1.0 - p)).collect(),
            prior,
        }
    }

    /// Count items whose keyword set contains each keyword.
    pub fn from_sets<'a>(sets: impl IntoIterator<Item = &'a BTreeSet<usize>>, c_key: usize) -> Self {
        let mut counts = vec![0usize; c_key];
        let mut n = 0;
        for s in sets {
            n += 1;
            for &k in s {
                counts[k] += 1;
            }
        }
        Self::from_counts(&counts, n)
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }
}

/// Labels of one training item for every loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemLabels {
    /// `N` ids starting with BOS.
    pub ids: Vec<u32>,
    /// Sentence length in `1..=L_max`.
    pub length: usize,
    pub caption_keywords: BTreeSet<usize>,
    pub meta_keywords: BTreeSet<usize>,
    /// Co-occurrence mask `b` over the word vocabulary.
    pub cooc_mask: Vec<f64>,
}

impl ItemLabels {
    /// Decoder targets: ids shifted left by one, PAD appended.
    pub fn targets(&self) -> Vec<u32> {
        let mut t = self.ids[1..].to_vec();
        t.push(WordVocabulary::PAD);
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub label_smoothing: f64,
    pub meta_weight: f64,
    pub cooccurrence: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            meta_weight: 1.0,
            cooccurrence: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub word: f64,
    pub caption_kw: f64,
    pub meta_kw: f64,
    pub length: f64,
    pub cooccurrence: f64,
    pub keyword_weight: f64,
    pub total: f64,
}

/// `Σ x ∘ w` as a graph scalar.
fn contract(g: &mut Graph<'_>, x: NodeId, w: Tensor) -> NodeId {
    let w = g.constant(w);
    let y = g.mul(x, w);
    g.sum_all(y)
}

/// `β·a + (1 − β)·b` elementwise.
fn blend(a: Tensor, b: Option<(Tensor, f64)>) -> Tensor {
    match b {
        Some((b, beta)) => a.zip_map(&b, |x, y| beta * x + (1.0 - beta) * y),
        None => a,
    }
}

/// Weights on `−log p` giving the label-smoothed cross entropy averaged over
/// non-PAD targets of each item and over the batch.
pub fn word_loss_weights(targets: &[Vec<u32>], c_cap: usize, smoothing: f64) -> Tensor {
    let b = targets.len();
    let n = targets.first().map_or(0, Vec::len);
    let mut w = vec![0.0; b * n * c_cap];
    for (i, t) in targets.iter().enumerate() {
        let count = t.iter().filter(|&&x| x != WordVocabulary::PAD).count().max(1) as f64;
        let scale = 1.0 / (count * b as f64);
        for (s, &tok) in t.iter().enumerate() {
            if tok == WordVocabulary::PAD {
                continue;
            }
            let row = &mut w[(i * n + s) * c_cap..(i * n + s + 1) * c_cap];
            for v in row.iter_mut() {
                *v = scale * smoothing / c_cap as f64;
            }
            row[tok as usize] += scale * (1.0 - smoothing);
        }
    }
    Tensor::new(vec![b, n, c_cap], w)
}

/// Label-smoothed cross entropy from log-posteriors `[B, N, C]`.
pub fn word_loss(g: &mut Graph<'_>, log_probs: NodeId, weights: Tensor) -> NodeId {
    let s = contract(g, log_probs, weights);
    g.scale(s, -1.0)
}

/// Keyword targets `z` as a `[B, C_key]` tensor.
pub fn keyword_targets<'a>(sets: impl IntoIterator<Item = &'a BTreeSet<usize>>, c_key: usize) -> Tensor {
    let mut data = Vec::new();
    let mut b = 0;
    for s in sets {
        b += 1;
        let mut row = vec![0.0; c_key];
        for &k in s {
            row[k] = 1.0;
        }
        data.extend(row);
    }
    Tensor::new(vec![b, c_key], data)
}

/// Weighted binary cross entropy of `p: [B, C_key]` against (possibly soft) targets `z`,
/// averaged over keywords and the batch.
pub fn keyword_loss(g: &mut Graph<'_>, p: NodeId, z: &Tensor, priors: &KeywordPriors) -> NodeId {
    let (b, c) = (z.dim(0), z.dim(1));
    assert_eq!(priors.len(), c, "priors/keyword count mismatch");
    let norm = 1.0 / (b * c) as f64;
    let mut wp = Vec::with_capacity(b * c);
    let mut wn = Vec::with_capacity(b * c);
    for (i, &zi) in z.data().iter().enumerate() {
        let k = i % c;
        wp.push(norm * priors.lambda[k] * zi);
        wn.push(norm * priors.gamma[k] * (1.0 - zi));
    }
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = g.ln(pc);
    let q = g.affine(pc, -1.0, 1.0);
    let lq = g.ln(q);
    let a = contract(g, lp, Tensor::new(vec![b, c], wp));
    let bn = contract(g, lq, Tensor::new(vec![b, c], wn));
    let s = g.add(a, bn);
    g.scale(s, -1.0)
}

/// One-hot length targets at class `L − 1`, `L` clamped to `1..=l_max`.
pub fn length_targets(lengths: &[usize], l_max: usize) -> Tensor {
    let mut data = vec![0.0; lengths.len() * l_max];
    for (i, &l) in lengths.iter().enumerate() {
        if l > l_max || l == 0 {
            log::debug!("sentence length {l} clamped into 1..={l_max}");
        }
        data[i * l_max + l.clamp(1, l_max) - 1] = 1.0;
    }
    Tensor::new(vec![lengths.len(), l_max], data)
}

/// `10⁻² ×` cross entropy of the length logits `[B, L_max]`, batch mean.
pub fn length_loss(g: &mut Graph<'_>, len_logits: NodeId, targets: &Tensor) -> NodeId {
    let b = targets.dim(0) as f64;
    let lp = g.log_softmax(len_logits);
    let s = contract(g, lp, targets.scale(1.0 / b));
    g.scale(s, -LENGTH_WEIGHT)
}

/// `(1/C_cap) Σ_n Σ_i b_i p(w_n = i)`, batch mean. `masks` is `[B, C_cap]`.
pub fn cooccurrence_penalty(g: &mut Graph<'_>, log_probs: NodeId, masks: &Tensor) -> NodeId {
    let shape = g.shape(log_probs).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let scale = 1.0 / (c * b) as f64;
    let mut w = Vec::with_capacity(b * n * c);
    for i in 0..b {
        let row = masks.row(i);
        for _ in 0..n {
            w.extend(row.iter().map(|v| v * scale));
        }
    }
    let p = g.exp(log_probs);
    contract(g, p, Tensor::new(shape, w))
}

fn masks_tensor(items: &[&ItemLabels], c_cap: usize) -> Tensor {
    let mut data = Vec::with_capacity(items.len() * c_cap);
    for it in items {
        assert_eq!(it.cooc_mask.len(), c_cap, "co-occurrence mask width");
        data.extend_from_slice(&it.cooc_mask);
    }
    Tensor::new(vec![items.len(), c_cap], data)
}

/// Mixing partner labels and weight β for item 1.
pub struct MixedLabels<'a> {
    pub partners: &'a [&'a ItemLabels],
    pub beta: f64,
}

pub struct TotalLoss {
    pub node: NodeId,
    pub breakdown: LossBreakdown,
}

/// Sum of all terms:
/// `word + w(s)·(caption + meta_weight·meta) + length + co-occurrence`,
/// each term mixed as `β·(item 1) + (1 − β)·(item 2)`.
pub fn total_loss(
    g: &mut Graph<'_>,
    fwd: &Forward,
    items: &[&ItemLabels],
    mix: Option<MixedLabels<'_>>,
    cap_priors: &KeywordPriors,
    meta_priors: &KeywordPriors,
    step: u64,
    settings: &LossSettings,
) -> TotalLoss {
    let shape = g.shape(fwd.log_probs).to_vec();
    let (c_cap, l_max) = (shape[2], g.shape(fwd.enc.len_logits)[1]);
    let c_key = g.shape(fwd.enc.p_cap)[1];
    let part = |items: &[&ItemLabels]| {
        let targets: Vec<Vec<u32>> = items.iter().map(|i| i.targets()).collect();
        let lengths: Vec<usize> = items.iter().map(|i| i.length).collect();
        (
            word_loss_weights(&targets, c_cap, settings.label_smoothing),
            keyword_targets(items.iter().map(|i| &i.caption_keywords), c_key),
            keyword_targets(items.iter().map(|i| &i.meta_keywords), c_key),
            length_targets(&lengths, l_max),
            masks_tensor(items, c_cap),
        )
    };
    let (w1, zc1, zm1, l1, b1) = part(items);
    let (w, zc, zm, lt, bm) = match &mix {
        Some(m) => {
            let (w2, zc2, zm2, l2, b2) = part(m.partners);
            (
                blend(w1, Some((w2, m.beta))),
                blend(zc1, Some((zc2, m.beta))),
                blend(zm1, Some((zm2, m.beta))),
                blend(l1, Some((l2, m.beta))),
                blend(b1, Some((b2, m.beta))),
            )
        }
        None => (w1, zc1, zm1, l1, b1),
    };
    let word = word_loss(g, fwd.log_probs, w);
    let cap = keyword_loss(g, fwd.enc.p_cap, &zc, cap_priors);
    let meta = fwd.enc.p_meta.map(|p| keyword_loss(g, p, &zm, meta_priors));
    let length = length_loss(g, fwd.enc.len_logits, &lt);
    let cooc = settings
        .cooccurrence
        .then(|| cooccurrence_penalty(g, fwd.log_probs, &bm));

    let kw = keyword_loss_weight(step);
    let mut keyword = cap;
    if let Some(m) = meta {
        let m = g.scale(m, settings.meta_weight);
        keyword = g.add(keyword, m);
    }
    let keyword = g.scale(keyword, kw);
    let mut total = g.add(word, keyword);
    total = g.add(total, length);
    if let Some(c) = cooc {
        total = g.add(total, c);
    }
    let v = |g: &Graph<'_>, n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).to_scalar());
    let breakdown = LossBreakdown {
        step,
        word: v(g, Some(word)),
        caption_kw: v(g, Some(cap)),
        meta_kw: v(g, meta),
        length: v(g, Some(length)),
        cooccurrence: v(g, cooc),
        keyword_weight: kw,
        total: v(g, Some(total)),
    };
    TotalLoss { node: total, breakdown }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priors_from_counts() {
        let p = KeywordPriors::from_counts(&[1, 0, 4], 4);
        assert_eq!(p.lambda[0], 4.0);
        assert!((p.gamma[0] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.prior[1], 1.0 / 8.0);
        assert_eq!(p.prior[2], 1.0 - 1.0 / 8.0);
    }

    #[test]
    fn weight_schedule() {
        assert_eq!(keyword_loss_weight(0), 1.0);
        assert!((keyword_loss_weight(6931) - 0.5).abs() < 5e-4);
        assert!(keyword_loss_weight(10) > keyword_loss_weight(11));
    }
}

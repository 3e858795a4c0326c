//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D in the usual caption-evaluation conventions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// A candidate caption and its references, as tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        Self {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r.as_ref())).collect(),
        }
    }
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU-`n` on a 0..100 scale with clipped counts and the closest-reference brevity penalty.
///
/// A zero match count at any order gives 0.
pub fn bleu(pairs: &[EvalPair], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let mut correct = [0usize; 4];
    let mut guess = [0usize; 4];
    let (mut test_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let c = p.candidate.len();
        test_len += c;
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c), l))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngram_counts(&p.candidate, k);
            let mut max_ref: HashMap<Ngram<'_>, usize> = HashMap::new();
            for r in &p.references {
                for (g, cnt) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(cnt);
                }
            }
            guess[k - 1] += c.saturating_sub(k - 1);
            correct[k - 1] += cand
                .iter()
                .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if test_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 0..n {
        if correct[k] == 0 || guess[k] == 0 {
            return 0.0;
        }
        log_p += (correct[k] as f64 / guess[k] as f64).ln();
    }
    let bp = if test_len < ref_len {
        1.0 - ref_len as f64 / test_len as f64
    } else {
        0.0
    };
    100.0 * (log_p / n as f64 + bp).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure from the best precision and best recall over references.
pub fn rouge_l_pair(pair: &EvalPair) -> f64 {
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in &pair.references {
        let l = lcs(&pair.candidate, r) as f64;
        if !pair.candidate.is_empty() {
            p_max = p_max.max(l / pair.candidate.len() as f64);
        }
        if !r.is_empty() {
            r_max = r_max.max(l / r.len() as f64);
        }
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Mean ROUGE-L over pairs, 0..100.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    100.0 * pairs.iter().map(rouge_l_pair).sum::<f64>() / pairs.len() as f64
}

pub const CIDER_SIGMA: f64 = 6.0;
/// Native CIDEr-D maximum; reported scores are this scale ×10.
pub const CIDER_NATIVE_MAX: f64 = 10.0;

struct CiderVec {
    vec: [HashMap<Vec<String>, f64>; 4],
    norm: [f64; 4],
    length: f64,
}

fn cider_vec(tokens: &[String], df: &HashMap<Vec<String>, f64>, ref_len: f64) -> CiderVec {
    let mut vec: [HashMap<Vec<String>, f64>; 4] = Default::default();
    let mut norm = [0.0; 4];
    let mut length = 0.0;
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let v = tf as f64 * (ref_len - d);
            norm[n - 1] += v * v;
            if n == 2 {
                length += tf as f64;
            }
            vec[n - 1].insert(g.to_vec(), v);
        }
    }
    CiderVec {
        vec,
        norm: norm.map(f64::sqrt),
        length,
    }
}

fn cider_sim(hyp: &CiderVec, r: &CiderVec) -> [f64; 4] {
    let delta = hyp.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; 4];
    for n in 0..4 {
        for (g, &v) in &hyp.vec[n] {
            if let Some(&rv) = r.vec[n].get(g) {
                val[n] += v.min(rv) * rv;
            }
        }
        if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val[n] /= hyp.norm[n] * r.norm[n];
        }
        val[n] *= penalty;
    }
    val
}

/// Per-pair CIDEr-D on the native 0..10 scale.
pub fn cider_scores(pairs: &[EvalPair]) -> Vec<f64> {
    if pairs.len() < 2 {
        log::warn!("CIDEr document frequencies are degenerate for fewer than two items");
    }
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for p in pairs {
        let mut seen: std::collections::HashSet<&[String]> = Default::default();
        for r in &p.references {
            for n in 1..=4 {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_default() += 1.0;
        }
    }
    let ref_len = (pairs.len().max(1) as f64).ln();
    pairs
        .iter()
        .map(|p| {
            if p.references.is_empty() {
                return 0.0;
            }
            let hyp = cider_vec(&p.candidate, &df, ref_len);
            let mut total = 0.0;
            for r in &p.references {
                let rv = cider_vec(r, &df, ref_len);
                total += cider_sim(&hyp, &rv).iter().sum::<f64>() / 4.0;
            }
            total / p.references.len() as f64 * 10.0
        })
        .collect()
}

/// Corpus CIDEr-D on the reporting scale (native ×10, so at most 100).
pub fn cider(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let s = cider_scores(pairs);
    10.0 * s.iter().sum::<f64>() / s.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Present only when SPICE was supplied externally.
    pub spice: Option<f64>,
    pub spider: Option<f64>,
    pub items: usize,
}

impl MetricReport {
    pub fn compute(pairs: &[EvalPair], spice: Option<f64>) -> Self {
        let cider = cider(pairs);
        Self {
            bleu_1: bleu(pairs, 1),
            bleu_2: bleu(pairs, 2),
            bleu_3: bleu(pairs, 3),
            bleu_4: bleu(pairs, 4),
            rouge_l: rouge_l(pairs),
            cider,
            spice,
            spider: spice.map(|s| (cider + s) / 2.0),
            items: pairs.len(),
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| B-1 | B-2 | B-3 | B-4 | ROUGE-L | CIDEr | SPIDEr |")?;
        writeln!(f, "|-----|-----|-----|-----|---------|-------|--------|")?;
        let spider = self
            .spider
            .map_or_else(|| "n/a".to_string(), |s| format!("{s:.1}"));
        write!(
            f,
            "| {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
            self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4, self.rouge_l, self.cider, spider
        )
    }
}

/// SPICE input: one corpus score or per-file scores (averaged over the evaluated files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpiceInput {
    Corpus(f64),
    PerFile(BTreeMap<String, f64>),
}

/// Score `(file_name, caption)` candidates against raw reference captions.
pub fn evaluate(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
    spice: Option<&SpiceInput>,
) -> Result<MetricReport> {
    let missing: Vec<String> = candidates
        .iter()
        .filter(|(f, _)| !references.contains_key(f))
        .map(|(f, _)| f.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingReferences(missing));
    }
    let pairs: Vec<EvalPair> = candidates
        .iter()
        .map(|(f, c)| EvalPair::from_text(c, &references[f]))
        .collect();
    let spice = match spice {
        None => None,
        Some(SpiceInput::Corpus(v)) => Some(*v),
        Some(SpiceInput::PerFile(m)) => {
            let vals: Vec<f64> = candidates.iter().filter_map(|(f, _)| m.get(f).copied()).collect();
            if vals.len() != candidates.len() {
                return Err(Error::Config("SPICE file does not cover every candidate".into()));
            }
            Some(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
        }
    };
    Ok(MetricReport::compute(&pairs, spice))
}

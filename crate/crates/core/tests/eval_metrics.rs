use std::collections::{BTreeMap, BTreeSet};

use audiocap_core::metrics::{bleu, cider, evaluate, rouge_l, EvalPair, MetricReport};
use proptest::prelude::*;

fn pair(c: &str, refs: &[&str]) -> EvalPair {
    EvalPair::from_text(c, refs)
}

fn identical_corpus() -> Vec<EvalPair> {
    let caps = [
        "a dog barks loudly in the yard",
        "rain falls softly on a tin roof",
        "a car engine starts and idles",
    ];
    caps.iter().map(|c| pair(c, &[c, c, c, c, c])).collect()
}

#[test]
fn identical_corpus_reaches_maxima() {
    let p = identical_corpus();
    let r = MetricReport::compute(&p, None);
    for v in [r.bleu_1, r.bleu_2, r.bleu_3, r.bleu_4, r.rouge_l] {
        assert!((v - 100.0).abs() < 1e-9, "{r:?}");
    }
    assert!((r.cider - 100.0).abs() < 1e-9, "{}", r.cider);
}

#[test]
fn bleu_two_pair_hand_fixture() {
    let p = [
        pair("the cat sat on the hat", &["the cat is on the mat", "a cat sat on a mat"]),
        pair("a dog", &["a dog runs fast", "the dog runs"]),
    ];
    // unigram 7/8, bigram 5/6, candidate length 8, closest reference lengths 6 + 3
    let bp = (1.0f64 - 9.0 / 8.0).exp();
    assert!((bleu(&p, 1) - 100.0 * 7.0 / 8.0 * bp).abs() < 1e-9);
    assert!((bleu(&p, 2) - 100.0 * (7.0f64 / 8.0 * 5.0 / 6.0).sqrt() * bp).abs() < 1e-9);
}

#[test]
fn rouge_lcs_fixture() {
    let p = [pair("a b c d", &["a c d e"])];
    assert!((rouge_l(&p) - 75.0).abs() < 1e-9);
}

/// Straightforward CIDEr-D over string-keyed n-grams.
fn cider_oracle(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    fn grams(t: &[String], n: usize) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if t.len() >= n {
            for i in 0..=t.len() - n {
                *m.entry(t[i..i + n].join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    }
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for (_, refs) in pairs {
        let mut s = BTreeSet::new();
        for r in refs {
            for n in 1..=4 {
                s.extend(grams(r, n).into_keys());
            }
        }
        for g in s {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let big_n = (pairs.len() as f64).ln();
    let weight = |g: &str, tf: f64| tf * (big_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln());
    let mut total = 0.0;
    for (cand, refs) in pairs {
        let mut item = 0.0;
        for r in refs {
            let len_c = cand.len().saturating_sub(1) as f64;
            let len_r = r.len().saturating_sub(1) as f64;
            let pen = (-(len_c - len_r).powi(2) / 72.0).exp();
            let mut per_n = 0.0;
            for n in 1..=4 {
                let gc = grams(cand, n);
                let gr = grams(r, n);
                let vc: BTreeMap<&String, f64> = gc.iter().map(|(g, &tf)| (g, weight(g, tf))).collect();
                let vr: BTreeMap<&String, f64> = gr.iter().map(|(g, &tf)| (g, weight(g, tf))).collect();
                let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                let mut dot = 0.0;
                for (g, v) in &vc {
                    if let Some(w) = vr.get(g) {
                        dot += v.min(*w) * w;
                    }
                }
                if nc != 0.0 && nr != 0.0 {
                    dot /= nc * nr;
                }
                per_n += dot * pen;
            }
            item += per_n / 4.0;
        }
        total += item / refs.len() as f64 * 10.0;
    }
    10.0 * total / pairs.len() as f64
}

#[test]
fn cider_three_item_oracle() {
    let p = [
        pair("a dog barks at a car", &["a dog barks", "the dog barks at cars", "a dog is barking loudly"]),
        pair("rain on the roof", &["rain falls on the roof", "heavy rain on a roof"]),
        pair("birds sing", &["birds are singing in trees", "a bird sings", "birds chirp and sing"]),
    ];
    let raw: Vec<_> = p.iter().map(|x| (x.candidate.clone(), x.references.clone())).collect();
    let want = cider_oracle(&raw);
    assert!(want > 0.0);
    assert!((cider(&p) - want).abs() < 1e-6, "{} vs {want}", cider(&p));
}

#[test]
fn self_evaluation_direction() {
    let mut refs = BTreeMap::new();
    let mut cands = Vec::new();
    for (i, c) in ["a dog barks", "rain falls on a roof", "a bell rings twice"].iter().enumerate() {
        let name = format!("{i}.wav");
        refs.insert(name.clone(), vec![c.to_string(), format!("{c} again"), "something else".into()]);
        cands.push((name, c.to_string()));
    }
    let r = evaluate(&cands, &refs, None).unwrap();
    assert!(r.bleu_1 > 50.0);
    let json = serde_json::to_value(&r).unwrap();
    for k in ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "cider", "spider"] {
        assert!(json.get(k).is_some(), "{k}");
    }
}

fn sentence() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-f]", 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reorder_invariance_and_bounds(items in proptest::collection::vec((sentence(), proptest::collection::vec(sentence(), 1..4)), 2..6), rot in 0usize..6) {
        let pairs: Vec<EvalPair> = items.iter().map(|(c, r)| EvalPair::from_text(c, r)).collect();
        let mut rotated = pairs.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let a = MetricReport::compute(&pairs, None);
        let b = MetricReport::compute(&rotated, None);
        for (x, y) in [(a.bleu_1, b.bleu_1), (a.bleu_4, b.bleu_4), (a.rouge_l, b.rouge_l), (a.cider, b.cider)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for v in [a.bleu_1, a.bleu_2, a.bleu_3, a.bleu_4, a.rouge_l] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
        prop_assert!(a.cider >= 0.0);
        let raw: Vec<_> = pairs.iter().map(|x| (x.candidate.clone(), x.references.clone())).collect();
        prop_assert!((a.cider - cider_oracle(&raw)).abs() < 1e-6);
    }
}

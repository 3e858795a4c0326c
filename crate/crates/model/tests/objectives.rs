use std::collections::BTreeSet;

use audiocap_model::objectives::{
    cooccurrence_penalty, keyword_loss, keyword_loss_weight, keyword_targets, length_loss, length_targets,
    word_loss, word_loss_weights, ItemLabels, KeywordPriors,
};
use audiocap_nn::{Graph, Tensor};
use proptest::prelude::*;

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

/// Direct transcription of the weighted binary cross entropy, written loop by loop.
fn keyword_oracle(p: &[f64], z: &[f64], prior: &[f64], c: usize) -> f64 {
    let b = p.len() / c;
    let mut s = 0.0;
    for i in 0..b {
        for k in 0..c {
            let pk = p[i * c + k].clamp(1e-7, 1.0 - 1e-7);
            let zk = z[i * c + k];
            s += zk / prior[k] * pk.ln() + (1.0 - zk) / (1.0 - prior[k]) * (1.0 - pk).ln();
        }
    }
    -s / (b * c) as f64
}

fn smoothed_ce_oracle(logp: &[f64], targets: &[Vec<u32>], c: usize, eps: f64) -> f64 {
    let n = targets[0].len();
    let mut total = 0.0;
    for (b, t) in targets.iter().enumerate() {
        let mut s = 0.0;
        let mut count = 0;
        for (i, &tok) in t.iter().enumerate() {
            if tok == 0 {
                continue;
            }
            count += 1;
            let row = &logp[(b * n + i) * c..(b * n + i + 1) * c];
            let uniform: f64 = row.iter().sum::<f64>() / c as f64;
            s -= (1.0 - eps) * row[tok as usize] + eps * uniform;
        }
        total += s / count.max(1) as f64;
    }
    total / targets.len() as f64
}

fn log_softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            r.iter().map(move |v| v - z).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn keyword_loss_at_half_is_two_ln_two() {
    let c = 6;
    let priors = KeywordPriors::from_priors(vec![0.5; c]);
    let z = keyword_targets([&set(&[0, 3]), &set(&[]), &set(&[1, 2, 4, 5])], c);
    let mut g = Graph::detached();
    let p = g.constant(Tensor::full(vec![3, c], 0.5));
    let l = keyword_loss(&mut g, p, &z, &priors);
    assert!((g.value(l).to_scalar() - 2.0 * 2f64.ln()).abs() < 1e-9);
}

#[test]
fn cooccurrence_penalty_with_full_mask_is_steps_over_vocab() {
    let (b, n, c) = (3, 7, 11);
    let raw: Vec<f64> = (0..b * n * c).map(|i| ((i * 37 % 17) as f64).sin()).collect();
    let mut g = Graph::detached();
    let lp = g.constant(Tensor::new(vec![b, n, c], log_softmax_rows(&raw, c)));
    let pen = cooccurrence_penalty(&mut g, lp, &Tensor::full(vec![b, c], 1.0));
    assert!((g.value(pen).to_scalar() - n as f64 / c as f64).abs() < 1e-9);
    let zero = cooccurrence_penalty(&mut g, lp, &Tensor::zeros(vec![b, c]));
    assert_eq!(g.value(zero).to_scalar(), 0.0);
}

#[test]
fn keyword_weight_halves_near_6931_steps() {
    assert!((keyword_loss_weight(6931) - 0.5).abs() < 5e-4);
    assert_eq!(keyword_loss_weight(0), 1.0);
    assert!(keyword_loss_weight(1) < 1.0);
}

#[test]
fn priors_give_inverse_weights() {
    let p = KeywordPriors::from_sets([&set(&[0, 1]), &set(&[0]), &set(&[0]), &set(&[2])], 4);
    // keyword 0 in 3 of 4 items, 1 and 2 in 1 of 4, keyword 3 never (clamped to 1/8)
    assert_eq!(p.prior, vec![0.75, 0.25, 0.25, 0.125]);
    assert!((p.lambda[1] - 4.0).abs() < 1e-12);
    assert!((p.gamma[1] - 4.0 / 3.0).abs() < 1e-12);
    assert!((p.lambda[3] - 8.0).abs() < 1e-12);
    let all = KeywordPriors::from_counts(&[4], 4);
    assert_eq!(all.prior, vec![0.875]);
}

#[test]
fn uniform_posteriors_give_log_vocab() {
    let (b, n, c) = (2, 5, 4);
    let targets = vec![vec![2, 3, 2, 0, 0], vec![1, 2, 3, 3, 2]];
    let mut g = Graph::detached();
    let lp = g.constant(Tensor::full(vec![b, n, c], -(c as f64).ln()));
    for eps in [0.0, 0.1, 0.5] {
        let l = word_loss(&mut g, lp, word_loss_weights(&targets, c, eps));
        assert!((g.value(l).to_scalar() - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn smoothed_cross_entropy_hand_value() {
    // one step, C = 3, target 1, eps = 0.1, p = (0.2, 0.5, 0.3):
    // -(0.9 ln 0.5 + 0.1/3 (ln 0.2 + ln 0.5 + ln 0.3))
    let lp = [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
    let want = -(0.9 * 0.5f64.ln() + 0.1 / 3.0 * lp.iter().sum::<f64>());
    let mut g = Graph::detached();
    let x = g.constant(Tensor::new(vec![1, 1, 3], lp.to_vec()));
    let l = word_loss(&mut g, x, word_loss_weights(&[vec![1]], 3, 0.1));
    assert!((g.value(l).to_scalar() - want).abs() < 1e-12);
    assert!((want - 0.7407177257).abs() < 1e-9);
}

#[test]
fn pad_targets_carry_no_weight() {
    let w = word_loss_weights(&[vec![5, 6, 0, 0]], 8, 0.1);
    assert!(w.data()[2 * 8..].iter().all(|&v| v == 0.0));
    assert!((w.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn length_loss_fixture() {
    // logits (0, ln 3) over two lengths, target length 2: 1e-2 × ln(4/3)
    let mut g = Graph::detached();
    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]));
    let l = length_loss(&mut g, x, &length_targets(&[2], 2));
    assert!((g.value(l).to_scalar() - 1e-2 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    // lengths beyond L_max land in the last class
    assert_eq!(length_targets(&[9], 3).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn targets_shift_left_and_pad() {
    let item = ItemLabels {
        ids: vec![1, 7, 8, 2, 0],
        length: 2,
        caption_keywords: set(&[]),
        meta_keywords: set(&[]),
        cooc_mask: vec![],
    };
    assert_eq!(item.targets(), vec![7, 8, 2, 0, 0]);
}

fn probs(c: usize, b: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, b * c)
}

proptest! {
    #[test]
    fn keyword_loss_matches_oracle(
        (c, b) in (1usize..6, 1usize..4),
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 };
        let p: Vec<f64> = (0..b * c).map(|_| next()).collect();
        let z: Vec<f64> = (0..b * c).map(|_| next()).collect();
        let prior: Vec<f64> = (0..c).map(|_| 0.05 + 0.9 * next()).collect();
        let priors = KeywordPriors::from_priors(prior.clone());
        let mut g = Graph::detached();
        let pn = g.constant(Tensor::new(vec![b, c], p.clone()));
        let l = keyword_loss(&mut g, pn, &Tensor::new(vec![b, c], z.clone()), &priors);
        let want = keyword_oracle(&p, &z, &prior, c);
        prop_assert!((g.value(l).to_scalar() - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn word_loss_matches_oracle(raw in probs(5, 12), eps in 0.0f64..0.5, toks in proptest::collection::vec(0u32..5, 12)) {
        let c = 5;
        let lp = log_softmax_rows(&raw, c);
        let targets = vec![toks[..6].to_vec(), toks[6..].to_vec()];
        let mut g = Graph::detached();
        let x = g.constant(Tensor::new(vec![2, 6, c], lp.clone()));
        let l = word_loss(&mut g, x, word_loss_weights(&targets, c, eps));
        let want = smoothed_ce_oracle(&lp, &targets, c, eps);
        prop_assert!((g.value(l).to_scalar() - want).abs() < 1e-10);
    }

    #[test]
    fn keyword_loss_is_nonnegative_and_linear_in_targets(p in probs(4, 2), z1 in probs(4, 2), z2 in probs(4, 2), beta in 0.0f64..1.0) {
        let priors = KeywordPriors::from_priors(vec![0.2, 0.4, 0.6, 0.8]);
        let mut g = Graph::detached();
        let pn = g.constant(Tensor::new(vec![2, 4], p));
        let t1 = Tensor::new(vec![2, 4], z1);
        let t2 = Tensor::new(vec![2, 4], z2);
        let mixed = t1.zip_map(&t2, |a, b| beta * a + (1.0 - beta) * b);
        let l1 = keyword_loss(&mut g, pn, &t1, &priors);
        let l2 = keyword_loss(&mut g, pn, &t2, &priors);
        let lm = keyword_loss(&mut g, pn, &mixed, &priors);
        let (l1, l2, lm) = (g.value(l1).to_scalar(), g.value(l2).to_scalar(), g.value(lm).to_scalar());
        prop_assert!(l1 >= 0.0 && l2 >= 0.0);
        prop_assert!((lm - (beta * l1 + (1.0 - beta) * l2)).abs() < 1e-9 * lm.abs().max(1.0));
    }

    #[test]
    fn keyword_weight_is_monotone(s in 0u64..1_000_000) {
        let w = keyword_loss_weight(s);
        prop_assert!(w > 0.0 && w <= 1.0);
        prop_assert!(keyword_loss_weight(s + 1) < w);
    }
}

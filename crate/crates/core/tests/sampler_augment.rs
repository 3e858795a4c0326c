use audiocap_core::audio::FeatureTensor;
use audiocap_core::sampler::{
    audio_selection_distribution, caption_selection_distribution, mix_audio, TfidfReplacer,
};
use audiocap_core::text::tokenize;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn docs() -> Vec<Vec<String>> {
    [
        "a car passes by on a wet road",
        "a dog barks at a passing car",
        "birds chirp in the morning",
        "a car horn honks twice",
        "rain falls on a metal roof",
    ]
    .iter()
    .map(|s| tokenize(s))
    .collect()
}

#[test]
fn three_item_hand_idf() {
    // items: {x y}, {x y}, {x z}; N = 3, idf(x) = ln(4/4) = 0, idf(y) = ln(4/3), idf(z) = ln(4/2)
    let item = |s: &str| vec![tokenize(s)];
    let p = audio_selection_distribution(&[item("x y"), item("x y"), item("x z")]);
    let (y, z) = ((4.0f64 / 3.0).ln() / 2.0, 2f64.ln() / 2.0);
    let total = 2.0 * y + z;
    for (got, want) in p.iter().zip([y / total, y / total, z / total]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn five_caption_hand_idf() {
    let caps: Vec<Vec<String>> = ["a b", "a b", "a b", "a b", "a c"].iter().map(|s| tokenize(s)).collect();
    let p = caption_selection_distribution(&caps, false);
    // N = 5: idf(a) = 0, idf(b) = ln(6/5), idf(c) = ln(6/2)
    let (b, c) = ((6.0f64 / 5.0).ln() / 2.0, 3f64.ln() / 2.0);
    let total = 4.0 * b + c;
    for (k, got) in p.iter().enumerate() {
        let want = if k < 4 { b / total } else { c / total };
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn empirical_replacement_matches_analytic() {
    let docs = docs();
    let r = TfidfReplacer::new(&docs, 0.3, |_| true);
    let toks = tokenize("a dog barks at a passing car");
    let probs = r.replacement_probabilities(&toks, |w| w == "dog");
    assert_eq!(probs[1], 0.0);
    let draws = 10_000;
    let mut hits = vec![0usize; toks.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..draws {
        let out = r.replace(&toks, |w| w == "dog", &mut rng);
        for (i, (a, b)) in out.iter().zip(&toks).enumerate() {
            if a != b {
                hits[i] += 1;
            }
        }
    }
    for (i, &p) in probs.iter().enumerate() {
        let f = hits[i] as f64 / draws as f64;
        // analytic change probability: p * (1 - q_w) where q_w is the chance of drawing w itself
        let q = r.draw_probability(&toks[i]);
        let pc = p * (1.0 - q);
        let sigma = (pc * (1.0 - pc) / draws as f64).sqrt();
        assert!((f - pc).abs() <= 3.0 * sigma + 1e-12, "token {} freq {f} expected {pc}", toks[i]);
    }
}

proptest! {
    #[test]
    fn distributions_normalised(words in proptest::collection::vec(proptest::collection::vec("[a-f]", 1..6), 1..12)) {
        let items: Vec<Vec<Vec<String>>> = words.chunks(2).map(|c| c.to_vec()).collect();
        let p = audio_selection_distribution(&items);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let q = caption_selection_distribution(&words, false);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mix_is_affine(beta in 0.0f64..1.0, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = FeatureTensor::zeros(2, 3);
        let mut b = FeatureTensor::zeros(2, 3);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) { *v = rng.random_range(-1.0..1.0); }
        let m = mix_audio(&a, &b, beta).unwrap();
        for i in 0..m.data.len() {
            let want = beta * f64::from(a.data[i]) + (1.0 - beta) * f64::from(b.data[i]);
            prop_assert!((f64::from(m.data[i]) - want).abs() < 1e-6);
        }
        prop_assert_eq!(mix_audio(&a, &a, beta).unwrap().data.iter().zip(&a.data).filter(|(x, y)| (**x - **y).abs() > 1e-6).count(), 0);
        prop_assert_eq!(mix_audio(&a, &b, 1.0).unwrap(), a.clone());
    }
}

use std::collections::BTreeSet;

use audiocap_core::text::{tokenize, CooccurrenceTable, KeywordVocabulary, LemmaTable, WordVocabulary};
use proptest::prelude::*;

const FIXTURE: [&str; 6] = [
    "A car passes by.",
    "Birds, birds!",
    "Rain falls on a tin roof.",
    "Someone's footsteps echo in a hall.",
    "A dog-like bark, then silence...",
    "WIND blows; leaves rustle.",
];

#[test]
fn fixture_tokens_match_hand_tokenization() {
    let hand: [&[&str]; 6] = [
        &["a", "car", "passes", "by"],
        &["birds", "birds"],
        &["rain", "falls", "on", "a", "tin", "roof"],
        &["someone's", "footsteps", "echo", "in", "a", "hall"],
        &["a", "dog", "like", "bark", "then", "silence"],
        &["wind", "blows", "leaves", "rustle"],
    ];
    for (c, h) in FIXTURE.iter().zip(hand) {
        assert_eq!(tokenize(c), h);
    }
}

#[test]
fn fixture_keyword_extraction_matches_hand() {
    let table = LemmaTable::bundled();
    let rows = [
        ("car_birds.wav", "cars;birds;rain;wind;leaves;dog"),
        ("x.wav", "car;bird;rain;wind;leaf;dog"),
    ];
    let kv = KeywordVocabulary::build(rows, table, 1);
    let lemmas: BTreeSet<&str> = (0..kv.len()).map(|i| kv.lemma(i)).collect();
    assert_eq!(lemmas, BTreeSet::from(["bird", "car", "dog", "leaf", "rain", "wind"]));
    let name = |set: BTreeSet<usize>| -> BTreeSet<String> { set.into_iter().map(|i| kv.lemma(i).to_string()).collect() };
    let hand: [&[&str]; 6] = [&["car"], &["bird"], &["rain"], &[], &["dog"], &["wind", "leaf"]];
    for (c, h) in FIXTURE.iter().zip(hand) {
        let got = name(kv.extract(&tokenize(c)));
        let want: BTreeSet<String> = h.iter().map(|s| s.to_string()).collect();
        assert_eq!(got, want, "{c}");
    }
    assert!(kv.extract(&tokenize("nothing matches here")).is_empty());
}

#[test]
fn cooccurrence_worked_example() {
    let captions = [
        "Cars are driving and birds are singing",
        "A car passes by while birds are chirping and singing",
    ];
    let toks: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let vocab = WordVocabulary::build(toks.iter().map(Vec::as_slice), 0);
    let table = LemmaTable::bundled();
    let kv = KeywordVocabulary::build([("x.wav", "car;sing;bird")], table, 0);
    let meta = kv.meta_keywords("x.wav", "car;sing;bird");
    assert_eq!(meta.len(), 3);
    let encoded: Vec<Vec<u32>> = toks.iter().map(|t| vocab.encode(t, 20, 20).ids).collect();
    let cooc = CooccurrenceTable::build([(&meta, encoded.iter().map(Vec::as_slice))]);
    let words: BTreeSet<&str> = [
        "cars", "are", "driving", "and", "birds", "singing", "a", "car", "passes", "by", "while", "chirping",
    ]
    .into();
    for &k in &meta {
        let list: BTreeSet<&str> = cooc.list(k).unwrap().iter().map(|&w| vocab.token(w)).filter(|t| !t.starts_with('<')).collect();
        assert_eq!(list, words);
    }
}

#[test]
fn vocab_is_deterministic() {
    let toks: Vec<Vec<String>> = FIXTURE.iter().map(|c| tokenize(c)).collect();
    let a = WordVocabulary::build(toks.iter().map(Vec::as_slice), 0);
    let rev: Vec<Vec<String>> = toks.iter().rev().cloned().collect();
    let b = WordVocabulary::build(rev.iter().map(Vec::as_slice), 0);
    assert_eq!(a.entries(), b.entries());
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(words in proptest::collection::vec("[a-e]{1,3}", 0..30), known in proptest::collection::vec("[a-e]{1,3}", 1..40)) {
        let known_toks: Vec<String> = known;
        let vocab = WordVocabulary::build([known_toks.as_slice()], 0);
        let enc = vocab.encode(&words, 20, 20);
        prop_assert_eq!(enc.ids.len(), 20);
        prop_assert!(enc.length >= 1 && enc.length <= 20);
        let decoded = vocab.decode(&enc.ids);
        let expect: Vec<String> = words.iter().take(19).map(|w| if vocab.contains(w) { w.clone() } else { "<unk>".into() }).collect();
        prop_assert_eq!(decoded, expect);
        // PAD only after EOS
        if let Some(e) = enc.ids.iter().position(|&i| i == WordVocabulary::EOS) {
            prop_assert!(enc.ids[..e].iter().all(|&i| i != WordVocabulary::PAD));
            prop_assert!(enc.ids[e + 1..].iter().all(|&i| i == WordVocabulary::PAD));
        }
    }

    #[test]
    fn cooccurrence_is_sound(items in proptest::collection::vec((proptest::collection::btree_set(0usize..5, 0..3), proptest::collection::vec(proptest::collection::vec(4u32..30, 1..8), 1..4)), 1..6)) {
        let table = CooccurrenceTable::build(items.iter().map(|(m, caps)| (m, caps.iter().map(Vec::as_slice))));
        for (meta, caps) in &items {
            let b = table.mask(meta, 30);
            for cap in caps {
                for &w in cap {
                    for k in meta {
                        prop_assert!(table.list(*k).unwrap().contains(&w));
                    }
                    if !meta.is_empty() {
                        prop_assert_eq!(b[w as usize], 0.0);
                    }
                }
            }
        }
    }
}

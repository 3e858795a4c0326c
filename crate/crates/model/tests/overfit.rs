mod common;

use std::time::Instant;

use audiocap_core::ingest::SplitSpec;
use audiocap_model::decode::{caption_features, detokenize};
use audiocap_model::train::teacher_forced_word_loss;
use audiocap_model::{train, DecodeSettings, TrainConfig};

#[test]
fn desk_model_memorises_ten_clips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::overfit("Model1".parse().unwrap());
    let (data, vocabs) = common::synthetic(dir.path(), 10, 1, SplitSpec { valid: 0, test: 0 }, &cfg);
    let start = Instant::now();
    let mut log = Vec::new();
    let out = train(&data, &vocabs, &cfg, &mut log, None).unwrap();
    let model = out.best.to_model().unwrap();
    let loss = teacher_forced_word_loss(&model, &data.train, &vocabs).unwrap();
    let mut hits = 0;
    for item in &data.train {
        let r = caption_features(std::slice::from_ref(&model), &item.features, &DecodeSettings::default(), 0).unwrap();
        let got = detokenize(&vocabs.words, &r.tokens);
        let want = item.captions[0].join(" ");
        eprintln!("{got:?} / {want:?}");
        hits += usize::from(got == want);
    }
    eprintln!("word loss {loss:.4}, {hits}/10 exact, {:?}", start.elapsed());
    let last = out.history.last().unwrap();
    eprintln!("{last:?}");
    assert!(loss < 0.1, "teacher-forced word loss {loss}");
    assert!(hits >= 9, "{hits}/10 captions reproduced");
}

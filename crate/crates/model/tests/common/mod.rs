#![allow(dead_code)]

use std::path::Path;

use audiocap_core::audio::FrontendConfig;
use audiocap_core::ingest::{build_corpus, featurize_corpus, load_caption_csv, load_metadata_csv, SplitSpec};
use audiocap_core::synth::{make_synthetic_corpus, SynthSpec};
use audiocap_core::text::LemmaTable;
use audiocap_model::{Dataset, TrainConfig, Vocabularies};

/// Synthetic corpus featurized and turned into a training set.
pub fn synthetic(dir: &Path, items: usize, variants: usize, split: SplitSpec, cfg: &TrainConfig) -> (Dataset, Vocabularies) {
    let s = make_synthetic_corpus(
        &SynthSpec {
            items,
            seconds: 5.0,
            caption_variants: variants,
            seed: 11,
        },
        dir,
    )
    .unwrap();
    let corpus = build_corpus(
        load_caption_csv(&s.captions_csv).unwrap(),
        load_metadata_csv(&s.metadata_csv).unwrap(),
        &s.audio_dir,
        split,
        0,
    )
    .unwrap();
    let store = featurize_corpus(&corpus, &FrontendConfig::default(), false).unwrap();
    let m = cfg.profile.model(cfg.variant);
    let vocabs = Vocabularies::build(&corpus, LemmaTable::load(&s.lemma_table).unwrap(), &cfg.vocab, m.n_steps, m.l_max).unwrap();
    let data = Dataset::build(&corpus, &store, &vocabs).unwrap();
    (data, vocabs)
}

//! Vocabularies and per-item training labels built from the training split.

use std::collections::BTreeSet;
use std::path::Path;

use audiocap_core::audio::FeatureTensor;
use audiocap_core::ingest::{Corpus, CorpusEntry, FeatureStore, Split};
use audiocap_core::text::{tokenize, CooccurrenceTable, KeywordVocabulary, LemmaTable, WordVocabulary};
use audiocap_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::objectives::KeywordPriors;

/// Frequency thresholds: words and keywords are kept when their count exceeds them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub word_min_count: u64,
    pub keyword_min_count: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            word_min_count: 5,
            keyword_min_count: 10,
        }
    }
}

pub const WORDS_FILE: &str = "vocab.json";
pub const KEYWORDS_FILE: &str = "keywords.json";
pub const COOC_FILE: &str = "cooccurrence.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub words: WordVocabulary,
    pub keywords: KeywordVocabulary,
    pub cooc: CooccurrenceTable,
}

fn caption_tokens(e: &CorpusEntry) -> Vec<Vec<String>> {
    e.caption.captions.iter().map(|c| tokenize(c)).collect()
}

impl Vocabularies {
    /// Build all three tables from the training split. `n_steps` and `l_max`
    /// fix the caption encoding used for the co-occurrence lists.
    pub fn build(corpus: &Corpus, table: LemmaTable, cfg: &VocabConfig, n_steps: usize, l_max: usize) -> Result<Self> {
        let train: Vec<&CorpusEntry> = corpus.split(Split::Train).collect();
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let toks: Vec<Vec<Vec<String>>> = train.iter().map(|e| caption_tokens(e)).collect();
        let words = WordVocabulary::build(toks.iter().flatten().map(Vec::as_slice), cfg.word_min_count);
        let keywords = KeywordVocabulary::build(
            train.iter().map(|e| (e.meta.file_name.as_str(), e.meta.keywords_raw.as_str())),
            table,
            cfg.keyword_min_count,
        );
        if keywords.is_empty() {
            return Err(Error::Config(format!(
                "no keyword occurs more than {} times; lower keyword_min_count",
                cfg.keyword_min_count
            )));
        }
        let metas: Vec<BTreeSet<usize>> = train
            .iter()
            .map(|e| keywords.meta_keywords(&e.meta.file_name, &e.meta.keywords_raw))
            .collect();
        let encoded: Vec<Vec<Vec<u32>>> = toks
            .iter()
            .map(|caps| caps.iter().map(|t| words.encode(t, n_steps, l_max).ids).collect())
            .collect();
        let cooc = CooccurrenceTable::build(
            metas
                .iter()
                .zip(&encoded)
                .map(|(m, caps)| (m, caps.iter().map(Vec::as_slice))),
        );
        Ok(Self { words, keywords, cooc })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.words.save(&dir.join(WORDS_FILE))?;
        self.keywords.save(&dir.join(KEYWORDS_FILE))?;
        self.cooc.save(&dir.join(COOC_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            words: WordVocabulary::load(&dir.join(WORDS_FILE))?,
            keywords: KeywordVocabulary::load(&dir.join(KEYWORDS_FILE))?,
            cooc: CooccurrenceTable::load(&dir.join(COOC_FILE))?,
        })
    }
}

/// One clip with everything the sampler and the losses need.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub file_name: String,
    pub features: FeatureTensor,
    pub captions: Vec<Vec<String>>,
    pub caption_keywords: Vec<BTreeSet<usize>>,
    pub meta_keywords: BTreeSet<usize>,
    pub cooc_mask: Vec<f64>,
    pub references: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainItem>,
    pub valid: Vec<TrainItem>,
    pub cap_priors: KeywordPriors,
    pub meta_priors: KeywordPriors,
}

fn make_item(e: &CorpusEntry, store: &FeatureStore, v: &Vocabularies) -> Result<TrainItem> {
    let name = e.file_name();
    let features = store
        .get(name)
        .ok_or_else(|| Error::Ingest {
            file_name: name.to_string(),
            message: "no cached features".into(),
        })?
        .clone();
    let captions = caption_tokens(e);
    let caption_keywords = captions.iter().map(|t| v.keywords.extract(t)).collect();
    let meta_keywords = v.keywords.meta_keywords(&e.meta.file_name, &e.meta.keywords_raw);
    let cooc_mask = v.cooc.mask(&meta_keywords, v.words.len());
    Ok(TrainItem {
        file_name: name.to_string(),
        features,
        captions,
        caption_keywords,
        meta_keywords,
        cooc_mask,
        references: e.caption.captions.to_vec(),
    })
}

impl Dataset {
    pub fn build(corpus: &Corpus, store: &FeatureStore, v: &Vocabularies) -> Result<Self> {
        let collect = |split| -> Result<Vec<TrainItem>> {
            corpus.split(split).map(|e| make_item(e, store, v)).collect()
        };
        let train = collect(Split::Train)?;
        let valid = collect(Split::Valid)?;
        let c_key = v.keywords.len();
        // An item carries a caption keyword when any of its captions mentions it.
        let cap_sets: Vec<BTreeSet<usize>> = train
            .iter()
            .map(|t| t.caption_keywords.iter().flatten().copied().collect())
            .collect();
        let cap_priors = KeywordPriors::from_sets(&cap_sets, c_key);
        let meta_priors = KeywordPriors::from_sets(train.iter().map(|t| &t.meta_keywords), c_key);
        Ok(Self {
            train,
            valid,
            cap_priors,
            meta_priors,
        })
    }
}

//! Stage operations shared by the subcommands and the pipeline runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use audiocap_core::audio::{featurize, read_wav, FrontendConfig};
use audiocap_core::ingest::{
    build_corpus, cache_features, featurize_corpus, load_cached, load_caption_csv, load_metadata_csv, read_manifest,
    Corpus, CorpusEntry, FeatureStore, Split, SplitSpec, MANIFEST,
};
use audiocap_core::metrics::{evaluate, MetricReport, SpiceInput};
use audiocap_core::text::LemmaTable;
use audiocap_model::checkpoint::CONFIG_FILE;
use audiocap_model::decode::{caption_features, detokenize};
use audiocap_model::train::{sweep, EnsembleManifest, ENSEMBLE_FILE};
use audiocap_model::{load_ensemble, Dataset, DecodeSettings, LoadedModel, TrainConfig, VariantName, Vocabularies};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CORPUS_FILE: &str = "corpus.json";
pub const FRONTEND_FILE: &str = "frontend.json";

/// One decoded caption as written by `caption`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub file: String,
    pub caption: String,
    pub logprob: f64,
}

fn prerequisite(stage: &str, needs: &str, reason: String) -> CliError {
    CliError::Prerequisite {
        stage: stage.into(),
        needs: needs.into(),
        reason,
        hint: format!("audiocap {needs}"),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Join the CSVs with the audio directory, split, and write `corpus.json` into `cache`.
pub fn ingest(captions: &Path, metadata: &Path, audio_dir: &Path, split: SplitSpec, seed: u64, cache: &Path) -> Result<Corpus> {
    let corpus = build_corpus(load_caption_csv(captions)?, load_metadata_csv(metadata)?, audio_dir, split, seed)?;
    std::fs::create_dir_all(cache)?;
    corpus.save(&cache.join(CORPUS_FILE))?;
    log::info!(
        "ingested {} items ({} train, {} valid, {} test)",
        corpus.entries.len(),
        corpus.count(Split::Train),
        corpus.count(Split::Valid),
        corpus.count(Split::Test)
    );
    Ok(corpus)
}

pub fn load_corpus(dir: &Path, stage: &str) -> Result<Corpus> {
    let path = if dir.is_dir() { dir.join(CORPUS_FILE) } else { dir.to_path_buf() };
    if !path.exists() {
        return Err(prerequisite(stage, "ingest", format!("{} not found", path.display())));
    }
    Ok(Corpus::load(&path)?)
}

/// WAV files named by `input`: one file, or every `.wav` in a directory (sorted).
pub fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::Data(format!("{} does not exist", input.display())));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Data(format!("no .wav files in {}", input.display())));
    }
    Ok(out)
}

fn file_label(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Featurize a corpus (a directory holding `corpus.json`), or loose WAVs, into the cache `out`.
pub fn featurize_into(input: &Path, cfg: &FrontendConfig, single: bool, out: &Path) -> Result<FeatureStore> {
    let store = if input.is_dir() && input.join(CORPUS_FILE).exists() {
        featurize_corpus(&Corpus::load(&input.join(CORPUS_FILE))?, cfg, single)?
    } else if input.file_name().is_some_and(|n| n == CORPUS_FILE) {
        featurize_corpus(&Corpus::load(input)?, cfg, single)?
    } else {
        let mut items = BTreeMap::new();
        for p in wav_inputs(input)? {
            let wave = read_wav(&p, cfg.sample_rate)?;
            items.insert(file_label(&p), featurize(&wave, cfg, single)?);
        }
        FeatureStore {
            config: cfg.clone(),
            single,
            items,
        }
    };
    cache_features(&store, out)?;
    log::info!("cached {} feature tensors in {}", store.items.len(), out.display());
    Ok(store)
}

/// Load a feature cache using the configuration recorded in its manifest.
pub fn load_features(dir: &Path, stage: &str) -> Result<FeatureStore> {
    if !dir.join(MANIFEST).exists() {
        return Err(prerequisite(stage, "featurize", format!("no feature cache in {}", dir.display())));
    }
    let m = read_manifest(dir)?;
    Ok(load_cached(dir, &m.config, m.single)?)
}

/// Corpus with every caption row in the training split (no audio needed).
pub fn corpus_from_csv(captions: &Path, metadata: &Path) -> Result<Corpus> {
    let meta: BTreeMap<String, _> = load_metadata_csv(metadata)?
        .into_iter()
        .map(|m| (m.file_name.clone(), m))
        .collect();
    let mut entries = Vec::new();
    for c in load_caption_csv(captions)? {
        let m = meta.get(&c.file_name).cloned().ok_or_else(|| {
            CliError::Data(format!("{}: no metadata row for {}", metadata.display(), c.file_name))
        })?;
        entries.push(CorpusEntry {
            audio: PathBuf::from(&c.file_name),
            caption: c,
            meta: m,
            split: Split::Train,
        });
    }
    Ok(Corpus { entries })
}

/// Build and save the word, keyword and co-occurrence tables.
pub fn build_vocab(corpus: &Corpus, lemma_table: &Path, train: &TrainConfig, out: &Path) -> Result<Vocabularies> {
    let m = train.profile.model(train.variant);
    let v = Vocabularies::build(corpus, LemmaTable::load(lemma_table)?, &train.vocab, m.n_steps, m.l_max)?;
    v.save(out)?;
    log::info!("{} words, {} keywords", v.words.len(), v.keywords.len());
    Ok(v)
}

pub fn load_vocab(dir: &Path, stage: &str) -> Result<Vocabularies> {
    if !dir.join(audiocap_model::data::WORDS_FILE).exists() {
        return Err(prerequisite(stage, "build-vocab", format!("no vocabulary in {}", dir.display())));
    }
    Ok(Vocabularies::load(dir)?)
}

/// Train one checkpoint per variant under `out`, plus the ensemble manifest.
pub fn train_variants(
    variants: &[VariantName],
    cfg: &TrainConfig,
    data: &Dataset,
    vocabs: &Vocabularies,
    frontend: &FrontendConfig,
    out: &Path,
) -> Result<EnsembleManifest> {
    let manifest = sweep(variants, cfg, data, vocabs, out)?;
    for dir in manifest.dirs(out) {
        write_json(&dir.join(FRONTEND_FILE), frontend)?;
    }
    Ok(manifest)
}

/// Checkpoint directories: each entry is a checkpoint or a directory with an ensemble manifest.
pub fn checkpoint_dirs(list: &[PathBuf], stage: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in list {
        if p.join(ENSEMBLE_FILE).exists() {
            out.extend(EnsembleManifest::load(p)?.dirs(p));
        } else if p.join(CONFIG_FILE).exists() {
            out.push(p.clone());
        } else {
            return Err(prerequisite(stage, "train", format!("no checkpoint in {}", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no checkpoints given".into()));
    }
    Ok(out)
}

/// Ensemble, its vocabulary and the front-end the members were trained with.
pub fn load_models(dirs: &[PathBuf]) -> Result<(Vec<LoadedModel>, Vocabularies, FrontendConfig)> {
    let (models, vocab) = load_ensemble(dirs)?;
    let frontend_path = dirs[0].join(FRONTEND_FILE);
    let frontend = if frontend_path.exists() {
        serde_json::from_slice(&std::fs::read(&frontend_path)?).map_err(|e| CliError::Data(e.to_string()))?
    } else {
        FrontendConfig::default()
    };
    Ok((models, vocab, frontend))
}

/// Caption WAV files.
pub fn caption_wavs(
    models: &[LoadedModel],
    vocab: &Vocabularies,
    frontend: &FrontendConfig,
    wavs: &[PathBuf],
    settings: &DecodeSettings,
    seed: u64,
) -> Result<Vec<CaptionLine>> {
    let mut out = Vec::with_capacity(wavs.len());
    for p in wavs {
        let wave = read_wav(p, frontend.sample_rate)?;
        let r = audiocap_model::caption(models, &vocab.words, &wave, frontend, settings, seed)?;
        out.push(CaptionLine {
            file: file_label(p),
            caption: r.caption,
            logprob: r.logprob,
        });
    }
    Ok(out)
}

/// Caption cached features of the given corpus split.
pub fn caption_split(
    models: &[LoadedModel],
    vocab: &Vocabularies,
    corpus: &Corpus,
    store: &FeatureStore,
    split: Split,
    settings: &DecodeSettings,
    seed: u64,
) -> Result<Vec<CaptionLine>> {
    let mut out = Vec::new();
    for e in corpus.split(split) {
        let x = store
            .get(e.file_name())
            .ok_or_else(|| CliError::Data(format!("no cached features for {}", e.file_name())))?;
        let r = caption_features(models, x, settings, seed)?;
        out.push(CaptionLine {
            file: e.file_name().to_string(),
            caption: detokenize(&vocab.words, &r.tokens),
            logprob: r.logprob,
        });
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("the {split:?} split is empty; nothing to caption")));
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Candidates {
    Many(Vec<CandidateRow>),
    One(CandidateRow),
}

#[derive(Deserialize)]
struct CandidateRow {
    file: String,
    caption: String,
}

/// `(file, caption)` pairs from a `caption` output file (an object or an array of objects).
pub fn read_candidates(path: &Path) -> Result<Vec<(String, String)>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let parsed: Candidates =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rows = match parsed {
        Candidates::Many(v) => v,
        Candidates::One(r) => vec![r],
    };
    Ok(rows.into_iter().map(|r| (r.file, r.caption)).collect())
}

pub fn read_spice(path: &Path) -> Result<SpiceInput> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn evaluate_candidates(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
    spice: Option<&SpiceInput>,
    out: &Path,
) -> Result<MetricReport> {
    let report = evaluate(candidates, references, spice)?;
    write_json(out, &report)?;
    Ok(report)
}

/// Raw reference captions keyed by file name from a caption CSV.
pub fn references_from_csv(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    Ok(load_caption_csv(path)?
        .into_iter()
        .map(|r| (r.file_name, r.captions.to_vec()))
        .collect())
}

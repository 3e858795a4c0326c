//! Stage DAG over a work directory with a provenance manifest; a stage whose
//! configuration hash is unchanged and whose outputs exist is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use audiocap_core::ingest::SplitSpec;
use audiocap_model::Dataset;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::commands::{self, CORPUS_FILE};
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Featurize,
    BuildVocab,
    Train,
    Caption,
    Evaluate,
}

impl Stage {
    /// Topological order.
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::BuildVocab,
        Stage::Featurize,
        Stage::Train,
        Stage::Caption,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Featurize => "featurize",
            Stage::BuildVocab => "build-vocab",
            Stage::Train => "train",
            Stage::Caption => "caption",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Featurize | Stage::BuildVocab => &[Stage::Ingest],
            Stage::Train => &[Stage::Featurize, Stage::BuildVocab],
            Stage::Caption => &[Stage::Featurize, Stage::Train],
            Stage::Evaluate => &[Stage::Ingest, Stage::Caption],
        }
    }

    /// Paths written, relative to the work directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[CORPUS_FILE],
            Stage::Featurize => &["features"],
            Stage::BuildVocab => &["vocab"],
            Stage::Train => &["models"],
            Stage::Caption => &["captions.json"],
            Stage::Evaluate => &["report.json"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    /// The hashed stage configuration.
    pub config: Value,
    pub upstream: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub versions: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Provenance {
    pub fn load(work: &Path) -> Result<Self> {
        let p = work.join(PROVENANCE_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        serde_json::from_slice(&std::fs::read(&p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, work: &Path) -> Result<()> {
        commands::write_json(&work.join(PROVENANCE_FILE), self)
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("audiocap-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("audiocap-core".to_string(), audiocap_core::VERSION.to_string()),
        ("audiocap-model".to_string(), audiocap_model::VERSION.to_string()),
    ])
}

/// Hex SHA-256 over the canonical JSON of a stage's configuration and upstream hashes.
pub fn stage_hash(stage: &str, config: &Value, upstream: &BTreeMap<String, String>) -> String {
    let body = json!({ "stage": stage, "config": config, "upstream": upstream });
    hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("json")))
}

fn file_digest(p: &Path) -> Result<String> {
    let bytes = std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serialises")
}

/// The configuration slice each stage depends on.
fn stage_config(cfg: &PipelineConfig, stage: Stage) -> Result<Value> {
    Ok(match stage {
        Stage::Ingest => json!({
            "data": to_value(&cfg.data),
            "seed": cfg.seed,
            "captions_sha256": file_digest(&cfg.data.captions)?,
            "metadata_sha256": file_digest(&cfg.data.metadata)?,
        }),
        Stage::Featurize => json!({ "frontend": to_value(&cfg.frontend) }),
        Stage::BuildVocab => {
            let m = cfg.train.profile.model(cfg.train.variant);
            json!({
                "vocab": to_value(&cfg.train.vocab),
                "n_steps": m.n_steps,
                "l_max": m.l_max,
                "lemma_sha256": file_digest(&cfg.data.lemma_table)?,
            })
        }
        Stage::Train => json!({ "train": to_value(&cfg.train), "variants": to_value(&cfg.variants) }),
        Stage::Caption => json!({
            "decode": to_value(&cfg.decode),
            "split": to_value(&cfg.caption_split),
            "seed": cfg.seed,
        }),
        Stage::Evaluate => json!({}),
    })
}

/// Current hashes of every stage, computed from the configuration alone.
pub fn plan_hashes(cfg: &PipelineConfig) -> Result<BTreeMap<Stage, (Value, BTreeMap<String, String>, String)>> {
    let mut out: BTreeMap<Stage, (Value, BTreeMap<String, String>, String)> = BTreeMap::new();
    for stage in Stage::ALL {
        let config = stage_config(cfg, stage)?;
        let upstream: BTreeMap<String, String> = stage
            .deps()
            .iter()
            .map(|d| (d.name().to_string(), out[d].2.clone()))
            .collect();
        let h = stage_hash(stage.name(), &config, &upstream);
        out.insert(stage, (config, upstream, h));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

fn outputs_exist(work: &Path, stage: Stage) -> bool {
    stage.outputs().iter().all(|o| work.join(o).exists())
}

fn current(prov: &Provenance, work: &Path, stage: Stage, hash: &str) -> bool {
    prov.stages
        .get(stage.name())
        .is_some_and(|r| r.config_hash == hash && outputs_exist(work, stage))
}

/// Run `only` (or every stage in order). Prerequisites must be current.
pub fn run(cfg: &PipelineConfig, only: Option<Stage>, force: bool) -> Result<Vec<(Stage, Outcome)>> {
    let work = &cfg.work_dir;
    std::fs::create_dir_all(work)?;
    let plan = plan_hashes(cfg)?;
    let mut prov = Provenance::load(work)?;
    let selected: Vec<Stage> = match only {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    let mut report = Vec::new();
    for stage in selected {
        for dep in stage.deps() {
            if !current(&prov, work, *dep, &plan[dep].2) {
                let reason = if prov.stages.contains_key(dep.name()) {
                    "its outputs are missing or were produced with a different configuration"
                } else {
                    "it has not been run"
                };
                return Err(CliError::Prerequisite {
                    stage: stage.name().into(),
                    needs: dep.name().into(),
                    reason: reason.into(),
                    hint: format!("audiocap run --config <file> --stage {dep}"),
                });
            }
        }
        let (config, upstream, hash) = plan[&stage].clone();
        if !force && current(&prov, work, stage, &hash) {
            log::info!("{stage}: up to date, skipped");
            report.push((stage, Outcome::Skipped));
            continue;
        }
        log::info!("{stage}: running");
        execute(cfg, stage)?;
        prov.stages.insert(
            stage.name().to_string(),
            StageRecord {
                config_hash: hash,
                seed: cfg.seed,
                config,
                upstream,
                outputs: stage.outputs().iter().map(|s| s.to_string()).collect(),
                versions: versions(),
            },
        );
        prov.save(work)?;
        report.push((stage, Outcome::Ran));
    }
    Ok(report)
}

fn path(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.work_dir.join(stage.outputs()[0])
}

fn execute(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    let work = &cfg.work_dir;
    let name = stage.name();
    match stage {
        Stage::Ingest => {
            let split = SplitSpec {
                valid: cfg.data.valid_count,
                test: cfg.data.test_count,
            };
            commands::ingest(&cfg.data.captions, &cfg.data.metadata, &cfg.data.audio_dir, split, cfg.seed, work)?;
        }
        Stage::Featurize => {
            let corpus = work.join(CORPUS_FILE);
            commands::featurize_into(&corpus, &cfg.frontend, false, &path(cfg, stage))?;
        }
        Stage::BuildVocab => {
            let corpus = commands::load_corpus(work, name)?;
            commands::build_vocab(&corpus, &cfg.data.lemma_table, &cfg.train, &path(cfg, stage))?;
        }
        Stage::Train => {
            let corpus = commands::load_corpus(work, name)?;
            let store = commands::load_features(&path(cfg, Stage::Featurize), name)?;
            let vocabs = commands::load_vocab(&path(cfg, Stage::BuildVocab), name)?;
            let data = Dataset::build(&corpus, &store, &vocabs)?;
            let out = path(cfg, stage);
            if out.exists() {
                std::fs::remove_dir_all(&out)?;
            }
            commands::train_variants(&cfg.variants, &cfg.train, &data, &vocabs, &cfg.frontend, &out)?;
        }
        Stage::Caption => {
            let corpus = commands::load_corpus(work, name)?;
            let store = commands::load_features(&path(cfg, Stage::Featurize), name)?;
            let dirs = commands::checkpoint_dirs(&[path(cfg, Stage::Train)], name)?;
            let (models, vocabs, _) = commands::load_models(&dirs)?;
            let lines = commands::caption_split(&models, &vocabs, &corpus, &store, cfg.caption_split, &cfg.decode, cfg.seed)?;
            commands::write_json(&path(cfg, stage), &lines)?;
        }
        Stage::Evaluate => {
            let corpus = commands::load_corpus(work, name)?;
            let candidates = commands::read_candidates(&path(cfg, Stage::Caption))?;
            let report = commands::evaluate_candidates(&candidates, &corpus.references(), None, &path(cfg, stage))?;
            log::info!("\n{report}");
        }
    }
    Ok(())
}


//! Caption/metadata CSV loading, corpus assembly with seeded splits, and the feature cache.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{featurize, read_wav, FeatureTensor, FrontendConfig};
use crate::error::{Error, Result};

pub const CAPTIONS_PER_ITEM: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub file_name: String,
    pub captions: [String; CAPTIONS_PER_ITEM],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub file_name: String,
    pub keywords_raw: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Items held out from training; the rest train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub valid: usize,
    pub test: usize,
}

impl SplitSpec {
    /// Development-set split used for the full-data configuration (3842 train, 96 valid).
    pub const FULL_DATA: SplitSpec = SplitSpec { valid: 96, test: 0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub audio: PathBuf,
    pub caption: CaptionRecord,
    pub meta: MetaRecord,
    pub split: Split,
}

impl CorpusEntry {
    pub fn file_name(&self) -> &str {
        &self.caption.file_name
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Raw captions keyed by file name.
    pub fn references(&self) -> BTreeMap<String, Vec<String>> {
        self.entries
            .iter()
            .map(|e| (e.caption.file_name.clone(), e.caption.captions.to_vec()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn read_rows(path: &Path, required: &[&str]) -> Result<Vec<HashMap<String, String>>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for col in required {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("missing column {col}"),
            });
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(
            headers
                .iter()
                .cloned()
                .zip(rec.iter().map(str::to_string))
                .collect(),
        );
    }
    Ok(rows)
}

fn check_unique<'a>(path: &Path, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Duplicate {
                path: path.to_path_buf(),
                file_name: n.to_string(),
            });
        }
    }
    Ok(())
}

/// Rows with `file_name` and `caption_1..caption_5`; captions are kept verbatim.
pub fn load_caption_csv(path: &Path) -> Result<Vec<CaptionRecord>> {
    let cols: Vec<String> = (1..=CAPTIONS_PER_ITEM).map(|k| format!("caption_{k}")).collect();
    let mut required = vec!["file_name"];
    required.extend(cols.iter().map(String::as_str));
    let rows = read_rows(path, &required)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows.into_iter().enumerate() {
        let file_name = row["file_name"].trim().to_string();
        let captions: [String; CAPTIONS_PER_ITEM] = std::array::from_fn(|k| row[&cols[k]].clone());
        if let Some(k) = captions.iter().position(|c| c.trim().is_empty()) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("row {} ({file_name}): caption_{} is empty", line + 2, k + 1),
            });
        }
        out.push(CaptionRecord {
            file_name,
            captions,
        });
    }
    check_unique(path, out.iter().map(|r| r.file_name.as_str()))?;
    Ok(out)
}

/// Rows with `file_name` and `keywords` (";"-delimited).
pub fn load_metadata_csv(path: &Path) -> Result<Vec<MetaRecord>> {
    let rows = read_rows(path, &["file_name", "keywords"])?;
    let out: Vec<MetaRecord> = rows
        .into_iter()
        .map(|row| MetaRecord {
            file_name: row["file_name"].trim().to_string(),
            keywords_raw: row["keywords"].clone(),
        })
        .collect();
    check_unique(path, out.iter().map(|r| r.file_name.as_str()))?;
    Ok(out)
}

/// Join captions with metadata and audio, then assign a seeded uniform-random split.
pub fn build_corpus(
    captions: Vec<CaptionRecord>,
    metadata: Vec<MetaRecord>,
    audio_dir: &Path,
    split: SplitSpec,
    seed: u64,
) -> Result<Corpus> {
    if split.valid + split.test > captions.len() {
        return Err(Error::Config(format!(
            "split asks for {} held-out items but the corpus has {}",
            split.valid + split.test,
            captions.len()
        )));
    }
    let mut meta: HashMap<String, MetaRecord> = metadata
        .into_iter()
        .map(|m| (m.file_name.clone(), m))
        .collect();
    let mut entries = Vec::with_capacity(captions.len());
    for caption in captions {
        let name = caption.file_name.clone();
        let meta = meta.remove(&name).ok_or_else(|| Error::Ingest {
            file_name: name.clone(),
            message: "no metadata row".into(),
        })?;
        let audio = audio_dir.join(&name);
        hound::WavReader::open(&audio).map_err(|e| Error::Ingest {
            file_name: name.clone(),
            message: format!("unreadable WAV {}: {e}", audio.display()),
        })?;
        entries.push(CorpusEntry {
            audio,
            caption,
            meta,
            split: Split::Train,
        });
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < split.valid {
            Split::Valid
        } else if rank < split.valid + split.test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(Corpus { entries })
}

/// Featurized clips keyed by file name, tagged with the front-end configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub config: FrontendConfig,
    pub single: bool,
    pub items: BTreeMap<String, FeatureTensor>,
}

impl FeatureStore {
    pub fn get(&self, file_name: &str) -> Option<&FeatureTensor> {
        self.items.get(file_name)
    }

    /// Hash of the front-end configuration and the channel mode.
    pub fn config_hash(config: &FrontendConfig, single: bool) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(format!("{}:{single}", config.hash())))
    }
}

pub fn featurize_corpus(corpus: &Corpus, config: &FrontendConfig, single: bool) -> Result<FeatureStore> {
    let mut items = BTreeMap::new();
    for e in &corpus.entries {
        let wave = read_wav(&e.audio, config.sample_rate)?;
        let x = featurize(&wave, config, single).map_err(|err| Error::Ingest {
            file_name: e.file_name().to_string(),
            message: err.to_string(),
        })?;
        items.insert(e.file_name().to_string(), x);
    }
    Ok(FeatureStore {
        config: config.clone(),
        single,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file_name: String,
    pub shape: [usize; 3],
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub config_hash: String,
    pub config: FrontendConfig,
    pub single: bool,
    pub count: usize,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST: &str = "manifest.json";

/// Write one little-endian f32 file per item plus `manifest.json`.
pub fn cache_features(store: &FeatureStore, dir: &Path) -> Result<CacheManifest> {
    std::fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(store.items.len());
    for (i, (name, x)) in store.items.iter().enumerate() {
        let rel = format!("{i:06}.f32");
        let bytes: Vec<u8> = x.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(&rel), bytes)?;
        items.push(ManifestItem {
            file_name: name.clone(),
            shape: x.shape(),
            path: rel,
        });
    }
    let manifest = CacheManifest {
        config_hash: FeatureStore::config_hash(&store.config, store.single),
        config: store.config.clone(),
        single: store.single,
        count: items.len(),
        items,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CacheManifest> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?)
}

/// Load a cache written with the same front-end configuration and channel mode.
pub fn load_cached(dir: &Path, config: &FrontendConfig, single: bool) -> Result<FeatureStore> {
    let manifest = read_manifest(dir)?;
    let expected = FeatureStore::config_hash(config, single);
    if manifest.config_hash != expected {
        return Err(Error::StaleCache {
            path: dir.to_path_buf(),
            found: manifest.config_hash,
            expected,
        });
    }
    let mut items = BTreeMap::new();
    for it in manifest.items {
        let bytes = std::fs::read(dir.join(&it.path))?;
        let [c, f, t] = it.shape;
        if c != FeatureTensor::CHANNELS || bytes.len() != 4 * c * f * t {
            return Err(Error::Shape(format!(
                "{}: {} bytes for shape {:?}",
                it.path,
                bytes.len(),
                it.shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        items.insert(
            it.file_name,
            FeatureTensor {
                n_mels: f,
                frames: t,
                data,
            },
        );
    }
    Ok(FeatureStore {
        config: manifest.config,
        single: manifest.single,
        items,
    })
}

//! Deterministic toy corpus of tones, buzzes and hisses with templated captions.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::text::{tokenize, LemmaTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub items: usize,
    pub seconds: f64,
    /// Number of distinct caption templates per item (1 gives five identical captions).
    pub caption_variants: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            items: 10,
            seconds: 6.0,
            caption_variants: 5,
            seed: 0,
        }
    }
}

const PITCHES: [(&str, f64); 3] = [("low", 220.0), ("medium", 660.0), ("high", 1760.0)];
const SOURCES: [&str; 3] = ["tone", "buzz", "hiss"];
const PATTERNS: [(&str, &str); 3] = [
    ("steady", "continues steadily"),
    ("repeats", "repeats several times"),
    ("fades", "fades away slowly"),
];
const META_SOURCE: [&str; 3] = ["tones", "buzzing", "hissing"];
const META_PATTERN: [&str; 3] = ["steady", "repeating", "fading"];

/// One generated clip's attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthItem {
    pub pitch: usize,
    pub source: usize,
    pub pattern: usize,
}

impl SynthItem {
    pub fn file_name(&self, index: usize) -> String {
        format!(
            "{}_{}_{}_{index:03}.wav",
            SOURCES[self.source], PITCHES[self.pitch].0, PATTERNS[self.pattern].0
        )
    }

    pub fn captions(&self, variants: usize) -> [String; 5] {
        let (p, s, pat) = (PITCHES[self.pitch].0, SOURCES[self.source], PATTERNS[self.pattern].1);
        let templates = [
            format!("A {p} {s} {pat}."),
            format!("There is a {p} {s} that {pat}."),
            format!("The {p} pitched {s} {pat}."),
            format!("A {s} with a {p} pitch {pat}."),
            format!("Someone plays a {p} {s} that {pat}."),
        ];
        let v = variants.clamp(1, 5);
        std::array::from_fn(|k| templates[k % v].clone())
    }

    pub fn keywords(&self) -> String {
        format!(
            "{};{};{};synthetic sound",
            PITCHES[self.pitch].0, META_SOURCE[self.source], META_PATTERN[self.pattern]
        )
    }

    pub fn render(&self, seconds: f64, rng: &mut ChaCha8Rng) -> Waveform {
        let sr = f64::from(SAMPLE_RATE);
        let n = (seconds * sr).round() as usize;
        let f0 = PITCHES[self.pitch].1;
        // one-pole low-pass state for the hiss, tuned so brightness follows the pitch class
        let alpha = (2.0 * PI * f0 / sr).min(0.9);
        let mut lp = 0.0;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let phase = 2.0 * PI * f0 * t;
                let carrier = match self.source {
                    0 => phase.sin(),
                    1 => (1..=8).map(|h| (h as f64 * phase).sin() / h as f64).sum::<f64>() * 0.6,
                    _ => {
                        let white: f64 = rng.random_range(-1.0..1.0);
                        lp += alpha * (white - lp);
                        (white - lp) * 0.5 + lp
                    }
                };
                let envelope = match self.pattern {
                    0 => 1.0,
                    1 => {
                        if (t * 2.0).fract() < 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => (1.0 - t / seconds).max(0.0),
                };
                (0.5 * carrier * envelope) as f32
            })
            .collect();
        Waveform::new(samples, SAMPLE_RATE)
    }
}

/// Paths of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub audio_dir: PathBuf,
    pub captions_csv: PathBuf,
    pub metadata_csv: PathBuf,
    pub lemma_table: PathBuf,
    pub items: Vec<(String, [String; 5])>,
}

/// Attribute triples for `count` items; the first 27 are distinct.
pub fn plan(count: usize, seed: u64) -> Vec<SynthItem> {
    let mut all: Vec<SynthItem> = (0..27)
        .map(|k| SynthItem {
            pitch: k / 9,
            source: (k / 3) % 3,
            pattern: k % 3,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    (0..count).map(|i| all[i % all.len()]).collect()
}

/// Every word the generator can emit, for building the lemma table.
pub fn vocabulary_words() -> Vec<String> {
    let mut words: Vec<String> = (0..27)
        .flat_map(|k| {
            let it = SynthItem {
                pitch: k / 9,
                source: (k / 3) % 3,
                pattern: k % 3,
            };
            let mut w: Vec<String> = it.captions(5).iter().flat_map(|c| tokenize(c)).collect();
            w.extend(tokenize(&it.keywords()));
            w
        })
        .collect();
    words.sort();
    words.dedup();
    words
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Write WAVs, caption CSV, metadata CSV and a lemma table under `out`.
pub fn make_synthetic_corpus(spec: &SynthSpec, out: &Path) -> Result<SynthCorpus> {
    if spec.items == 0 || spec.seconds <= 0.0 {
        return Err(Error::Config("synthetic corpus needs items > 0 and seconds > 0".into()));
    }
    let audio_dir = out.join("audio");
    std::fs::create_dir_all(&audio_dir)?;
    let captions_csv = out.join("captions.csv");
    let metadata_csv = out.join("metadata.csv");
    let lemma_table = out.join("lemmas.csv");

    let mut cw = csv::Writer::from_path(&captions_csv).map_err(csv_err(&captions_csv))?;
    cw.write_record(["file_name", "caption_1", "caption_2", "caption_3", "caption_4", "caption_5"])
        .map_err(csv_err(&captions_csv))?;
    let mut mw = csv::Writer::from_path(&metadata_csv).map_err(csv_err(&metadata_csv))?;
    mw.write_record(["file_name", "keywords", "sound_id"])
        .map_err(csv_err(&metadata_csv))?;

    let mut items = Vec::with_capacity(spec.items);
    for (i, it) in plan(spec.items, spec.seed).into_iter().enumerate() {
        let name = it.file_name(i);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        write_wav(&audio_dir.join(&name), &it.render(spec.seconds, &mut rng))?;
        let caps = it.captions(spec.caption_variants);
        let mut row = vec![name.clone()];
        row.extend(caps.iter().cloned());
        cw.write_record(&row).map_err(csv_err(&captions_csv))?;
        mw.write_record([name.as_str(), it.keywords().as_str(), &i.to_string()])
            .map_err(csv_err(&metadata_csv))?;
        items.push((name, caps));
    }
    cw.flush()?;
    mw.flush()?;
    LemmaTable::from_suffix_rules(vocabulary_words()).save(&lemma_table)?;
    Ok(SynthCorpus {
        audio_dir,
        captions_csv,
        metadata_csv,
        lemma_table,
        items,
    })
}

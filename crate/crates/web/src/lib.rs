//! Browser demo. Each exported function takes plain values and returns JSON text.

use audiocap_core::audio::{hpss, stft_magnitude, FrontendConfig, HpssParams, Waveform};
use audiocap_core::beam::{beam_search, would_repeat, BeamConfig, StepScorer};
use audiocap_core::metrics::{EvalPair, MetricReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

// log-mel / HPSS explorer

#[derive(Debug, Serialize)]
pub struct Explored {
    pub n_mels: usize,
    pub frames: usize,
    pub seconds: f64,
    /// Mel-major `n_mels × frames` natural-log energies.
    pub logmel: Vec<f32>,
    pub harmonic: Vec<f32>,
    pub percussive: Vec<f32>,
    /// Share of spectrogram energy in the harmonic part.
    pub harmonic_share: f64,
    /// Largest relative deviation of `H + P` from the magnitude.
    pub max_conservation_error: f64,
}

/// Synthetic test signal at `sample_rate`: `tone` (440 Hz with a slow vibrato),
/// `clicks` (four impulses per second), `mix` (both plus light noise) or `chirp`.
pub fn signal(kind: &str, seconds: f64, sample_rate: u32) -> Result<Vec<f32>, String> {
    if !(0.1..=30.0).contains(&seconds) {
        return Err(format!("length {seconds} s is outside 0.1..30"));
    }
    let sr = f64::from(sample_rate);
    let n = (seconds * sr) as usize;
    let tau = std::f64::consts::TAU;
    let tone = |i: usize| {
        let t = i as f64 / sr;
        0.4 * (tau * 440.0 * t + 2.0 * (tau * 0.5 * t).sin()).sin()
    };
    let period = (sr / 4.0) as usize;
    let click = |i: usize| if i % period < 40 { 0.9 * (-((i % period) as f64) / 8.0).exp() } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = match kind {
        "tone" => (0..n).map(tone).collect::<Vec<f64>>(),
        "clicks" => (0..n).map(click).collect(),
        "mix" => (0..n).map(|i| 0.6 * tone(i) + click(i) + 0.02 * rng.random_range(-1.0..1.0)).collect(),
        "chirp" => (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                0.4 * (tau * (100.0 * t + 400.0 * t * t / seconds)).sin()
            })
            .collect(),
        other => return Err(format!("unknown signal {other:?}")),
    };
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Log-mel of a waveform and of its harmonic and percussive parts.
pub fn explore_samples(
    samples: Vec<f32>,
    sample_rate: u32,
    n_fft: usize,
    hop: usize,
    n_mels: usize,
    kernel: usize,
) -> Result<Explored, String> {
    if samples.is_empty() {
        return Err("no samples".into());
    }
    if !n_fft.is_power_of_two() || !(64..=8192).contains(&n_fft) {
        return Err("FFT size must be a power of two in 64..8192".into());
    }
    if hop == 0 || hop > n_fft {
        return Err("hop must be in 1..=FFT size".into());
    }
    if n_mels == 0 || n_mels > n_fft / 2 {
        return Err("mel band count must be in 1..=FFT size / 2".into());
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err("median kernel must be odd".into());
    }
    let wave = Waveform::new(samples, sample_rate);
    let cfg = FrontendConfig {
        n_fft,
        hop,
        n_mels,
        f_max: f64::from(sample_rate) / 2.0,
        sample_rate,
        hpss: HpssParams {
            kernel,
            ..HpssParams::default()
        },
        ..FrontendConfig::default()
    };
    let mag = stft_magnitude(&wave.samples, n_fft, hop);
    let (h, p) = hpss(&mag, &cfg.hpss);
    let fb = cfg.filterbank();
    let f32s = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let max_conservation_error = mag
        .data
        .iter()
        .zip(h.data.iter().zip(&p.data))
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, (a, b))| (a + b - x).abs() / x)
        .fold(0.0, f64::max);
    Ok(Explored {
        n_mels,
        frames: mag.frames,
        seconds: wave.duration_secs(),
        logmel: f32s(cfg.log_mel_of(&mag, &fb)),
        harmonic: f32s(cfg.log_mel_of(&h, &fb)),
        percussive: f32s(cfg.log_mel_of(&p, &fb)),
        harmonic_share: h.energy() / (h.energy() + p.energy()).max(f64::MIN_POSITIVE),
        max_conservation_error,
    })
}

#[wasm_bindgen]
pub fn demo_signal(kind: &str, seconds: f64, sample_rate: u32) -> Result<Vec<f32>, JsValue> {
    signal(kind, seconds, sample_rate).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn explore(samples: Vec<f32>, sample_rate: u32, n_fft: usize, hop: usize, n_mels: usize, kernel: usize) -> Result<String, JsValue> {
    explore_samples(samples, sample_rate, n_fft, hop, n_mels, kernel)
        .map(|e| to_json(&e))
        .map_err(JsValue::from)
}

// blocked beam search on toy bigram tables

/// Token 0 is end-of-sequence; `vocab` is the start token.
#[derive(Clone, Debug, Serialize)]
pub struct BigramTable {
    pub vocab: usize,
    /// `(vocab + 1) × vocab` row-major log-probabilities; row `vocab` follows the start token.
    pub logprobs: Vec<f64>,
}

impl BigramTable {
    /// Random table; larger `sharpness` makes rows peakier.
    pub fn random(vocab: usize, sharpness: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logprobs = Vec::with_capacity((vocab + 1) * vocab);
        for _ in 0..=vocab {
            let logits: Vec<f64> = (0..vocab).map(|_| sharpness * rng.random_range(-1.0..1.0)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            logprobs.extend(logits.iter().map(|l| l - z));
        }
        Self { vocab, logprobs }
    }

    pub fn row(&self, prev: u32) -> &[f64] {
        let r = prev as usize;
        &self.logprobs[r * self.vocab..(r + 1) * self.vocab]
    }
}

impl StepScorer for BigramTable {
    type State = ();

    fn initial_state(&mut self) -> audiocap_core::Result<()> {
        Ok(())
    }

    fn step(&mut self, hyps: &[(&[u32], &())]) -> audiocap_core::Result<Vec<(Vec<f64>, ())>> {
        Ok(hyps
            .iter()
            .map(|(p, _)| (self.row(*p.last().expect("hypotheses start with BOS")).to_vec(), ()))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

#[derive(Debug, Serialize)]
pub struct BeamDemo {
    pub table: BigramTable,
    pub blocked: Decoded,
    pub unblocked: Decoded,
    /// Best sequence under the same blocking rule by full enumeration, when small enough.
    pub exhaustive: Option<Decoded>,
}

/// Highest-scoring sequence of at most `max_tokens` tokens (EOS ends early) that never
/// repeats an n-gram of order `block_n`.
pub fn enumerate_best(table: &BigramTable, max_tokens: usize, block_n: usize) -> Decoded {
    fn rec(t: &BigramTable, max_tokens: usize, n: usize, seq: &mut Vec<u32>, score: f64, best: &mut Decoded) {
        let row = t.row(*seq.last().unwrap()).to_vec();
        for tok in 0..t.vocab as u32 {
            if would_repeat(seq, tok, n) {
                continue;
            }
            let s = score + row[tok as usize];
            seq.push(tok);
            if tok == 0 || seq.len() == max_tokens + 1 {
                if s > best.logprob {
                    best.tokens = seq.clone();
                    best.logprob = s;
                }
            } else {
                rec(t, max_tokens, n, seq, s, best);
            }
            seq.pop();
        }
    }
    let mut best = Decoded {
        tokens: Vec::new(),
        logprob: f64::NEG_INFINITY,
    };
    rec(table, max_tokens, block_n, &mut vec![table.vocab as u32], 0.0, &mut best);
    best.tokens.remove(0);
    if best.tokens.last() == Some(&0) {
        best.tokens.pop();
    }
    best
}

pub const EXHAUSTIVE_LIMIT: f64 = 2e5;

pub fn beam_demo(vocab: usize, max_tokens: usize, beam: usize, block_n: usize, sharpness: f64, seed: u64) -> Result<BeamDemo, String> {
    if !(2..=12).contains(&vocab) {
        return Err("vocabulary size must be in 2..=12".into());
    }
    if !(1..=30).contains(&max_tokens) || !(1..=64).contains(&beam) {
        return Err("length must be in 1..=30 and beam in 1..=64".into());
    }
    let mut table = BigramTable::random(vocab, sharpness, seed);
    let mut run = |n: usize| -> Result<Decoded, String> {
        let cfg = BeamConfig {
            beam,
            block_n: n,
            max_len: max_tokens + 1,
            bos: vocab as u32,
            eos: 0,
        };
        let r = beam_search(&mut table, &cfg).map_err(|e| e.to_string())?;
        Ok(Decoded {
            tokens: r.tokens,
            logprob: r.logprob,
        })
    };
    let blocked = run(block_n)?;
    let unblocked = run(0)?;
    let exhaustive = ((vocab as f64).powi(max_tokens as i32) <= EXHAUSTIVE_LIMIT)
        .then(|| enumerate_best(&table, max_tokens, block_n));
    Ok(BeamDemo {
        table,
        blocked,
        unblocked,
        exhaustive,
    })
}

#[wasm_bindgen]
pub fn toy_beam(vocab: usize, max_tokens: usize, beam: usize, block_n: usize, sharpness: f64, seed: u32) -> Result<String, JsValue> {
    beam_demo(vocab, max_tokens, beam, block_n, sharpness, u64::from(seed))
        .map(|d| to_json(&d))
        .map_err(JsValue::from)
}

// metrics calculator

/// One item per non-empty line: `candidate | reference | reference ...`.
pub fn parse_pairs(text: &str) -> Result<Vec<EvalPair>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('|').map(str::trim);
        let cand = parts.next().unwrap_or_default();
        let refs: Vec<&str> = parts.filter(|r| !r.is_empty()).collect();
        if refs.is_empty() {
            return Err(format!("line {}: expected `candidate | reference ...`", i + 1));
        }
        out.push(EvalPair::from_text(cand, &refs));
    }
    if out.is_empty() {
        return Err("no items".into());
    }
    Ok(out)
}

pub fn score_text(text: &str, spice: Option<f64>) -> Result<MetricReport, String> {
    Ok(MetricReport::compute(&parse_pairs(text)?, spice))
}

/// Metric report as JSON; a negative `spice` means none was supplied.
#[wasm_bindgen]
pub fn score(text: &str, spice: f64) -> Result<String, JsValue> {
    score_text(text, (spice >= 0.0).then_some(spice))
        .map(|r| to_json(&r))
        .map_err(JsValue::from)
}

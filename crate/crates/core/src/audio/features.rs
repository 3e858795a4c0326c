use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::hpss::{hpss, HpssParams};
use super::mel::{mel_filterbank, MelFilterbank};
use super::stft::{stft_magnitude, Spectrogram};
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Front-end parameters. Their hash keys the feature cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Floor added before the natural log.
    pub log_eps: f64,
    pub hpss: HpssParams,
    /// Per-channel standardisation of log-mels before the network (off by default).
    #[serde(default)]
    pub standardize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: 4096,
            hop: 2048,
            n_mels: 64,
            f_min: 0.0,
            f_max: f64::from(SAMPLE_RATE) / 2.0,
            log_eps: 1e-10,
            hpss: HpssParams::default(),
            standardize: false,
        }
    }
}

impl FrontendConfig {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn filterbank(&self) -> MelFilterbank {
        mel_filterbank(
            f64::from(self.sample_rate),
            self.n_fft,
            self.n_mels,
            self.f_min,
            self.f_max,
        )
    }

    /// Natural-log mel energies (`n_mels × frames`, mel-major) of a magnitude spectrogram.
    pub fn log_mel_of(&self, mag: &Spectrogram, fb: &MelFilterbank) -> Vec<f64> {
        let power: Vec<f64> = mag.data.iter().map(|v| v * v).collect();
        fb.apply(&power, mag.frames)
            .into_iter()
            .map(|e| (e + self.log_eps).ln())
            .collect()
    }

    /// Log-mel spectrogram of a waveform: `(n_mels × frames data, frames)`.
    pub fn logmel(&self, wave: &Waveform) -> Result<(Vec<f64>, usize)> {
        if wave.is_empty() {
            return Err(Error::Length("empty waveform".into()));
        }
        let mag = stft_magnitude(&wave.samples, self.n_fft, self.hop);
        let fb = self.filterbank();
        Ok((self.log_mel_of(&mag, &fb), mag.frames))
    }
}

/// Three stacked log-mel channels `(S, H, P)` of shape `3 × n_mels × frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub n_mels: usize,
    pub frames: usize,
    /// Channel-major, then mel, then frame.
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub const CHANNELS: usize = 3;

    pub fn zeros(n_mels: usize, frames: usize) -> Self {
        Self {
            n_mels,
            frames,
            data: vec![0.0; Self::CHANNELS * n_mels * frames],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.n_mels, self.frames]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_mels * self.frames;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, mel: usize, t: usize) -> f32 {
        self.data[(c * self.n_mels + mel) * self.frames + t]
    }

    /// `X = S` semantics: harmonic and percussive channels replaced by copies of channel 0.
    pub fn as_single(&self) -> FeatureTensor {
        let s = self.channel(0).to_vec();
        let mut data = Vec::with_capacity(self.data.len());
        for _ in 0..Self::CHANNELS {
            data.extend_from_slice(&s);
        }
        FeatureTensor { data, ..*self }
    }

    /// Contiguous frames `[start, start + len)`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> FeatureTensor {
        let mut out = FeatureTensor::zeros(self.n_mels, len);
        let avail = self.frames.saturating_sub(start).min(len);
        for c in 0..Self::CHANNELS {
            for m in 0..self.n_mels {
                let src = (c * self.n_mels + m) * self.frames + start;
                let dst = (c * self.n_mels + m) * len;
                out.data[dst..dst + avail].copy_from_slice(&self.data[src..src + avail]);
            }
        }
        out
    }

    /// Standardise each channel to zero mean / unit variance.
    pub fn standardized(&self) -> FeatureTensor {
        let n = self.n_mels * self.frames;
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            let ch = &mut out.data[c * n..(c + 1) * n];
            let mean = ch.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = ch.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var.sqrt() + 1e-8);
            for v in ch.iter_mut() {
                *v = ((f64::from(*v) - mean) * inv) as f32;
            }
        }
        out
    }

    /// Elementwise `beta * self + (1 - beta) * other`.
    pub fn mix(&self, other: &FeatureTensor, beta: f64) -> Result<FeatureTensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot mix {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (beta * f64::from(a) + (1.0 - beta) * f64::from(b)) as f32)
            .collect();
        Ok(FeatureTensor { data, ..*self })
    }
}

/// Log-mel of the full signal, its harmonic part and its percussive part.
pub fn featurize(wave: &Waveform, cfg: &FrontendConfig, single: bool) -> Result<FeatureTensor> {
    if wave.is_empty() {
        return Err(Error::Length("empty waveform".into()));
    }
    let mag = stft_magnitude(&wave.samples, cfg.n_fft, cfg.hop);
    let fb = cfg.filterbank();
    let s = cfg.log_mel_of(&mag, &fb);
    let (h, p) = if single {
        (s.clone(), s.clone())
    } else {
        let (hm, pm) = hpss(&mag, &cfg.hpss);
        (cfg.log_mel_of(&hm, &fb), cfg.log_mel_of(&pm, &fb))
    };
    let data = s
        .iter()
        .chain(&h)
        .chain(&p)
        .map(|&v| v as f32)
        .collect();
    let x = FeatureTensor {
        n_mels: cfg.n_mels,
        frames: mag.frames,
        data,
    };
    Ok(if cfg.standardize { x.standardized() } else { x })
}

/// Random contiguous crop when longer than `frames`, zero-pad at the end when shorter.
pub fn crop_or_pad<R: Rng + ?Sized>(x: &FeatureTensor, frames: usize, rng: &mut R) -> FeatureTensor {
    assert!(frames >= 1, "target length must be positive");
    if x.frames > frames {
        let start = rng.random_range(0..=x.frames - frames);
        x.window(start, frames)
    } else if x.frames < frames {
        x.window(0, frames)
    } else {
        x.clone()
    }
}

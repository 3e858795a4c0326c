//! Waveform I/O and the log-mel / HPSS feature front end.

mod features;
mod hpss;
mod mel;
mod stft;

use std::path::Path;

use crate::error::{Error, Result};

pub use features::{crop_or_pad, featurize, FeatureTensor, FrontendConfig};
pub use hpss::{hpss, median_filter_freq, median_filter_time, HpssParams};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use stft::{frame_count, stft_magnitude, Spectrogram};

/// Rate every clip is resampled to at ingest.
pub const SAMPLE_RATE: u32 = 22_050;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Resample with a Hann-windowed sinc kernel. Identity when rates agree.
    pub fn resample(&self, target_rate: u32) -> Waveform {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Waveform::new(self.samples.clone(), target_rate);
        }
        let ratio = f64::from(target_rate) / f64::from(self.sample_rate);
        let cutoff = ratio.min(1.0) * 0.97;
        const ZERO_CROSSINGS: f64 = 16.0;
        let half_width = ZERO_CROSSINGS / cutoff;
        let out_len = ((self.samples.len() as f64) * ratio).round().max(1.0) as usize;
        let n = self.samples.len() as isize;
        let mut out = Vec::with_capacity(out_len);
        for j in 0..out_len {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n - 1) {
                let x = t - k as f64;
                let w = 0.5 + 0.5 * (std::f64::consts::PI * x / half_width).cos();
                acc += f64::from(self.samples[k as usize]) * cutoff * sinc(cutoff * x) * w;
            }
            out.push(acc as f32);
        }
        Waveform::new(out, target_rate)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Read a PCM (16/24/32-bit) or float WAV, mix to mono and resample to `target_rate`.
pub fn read_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Waveform::new(mono, spec.sample_rate).resample(target_rate))
}

/// Write a 16-bit PCM mono WAV.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(())
}

//! Slaney-style mel scale and area-normalised triangular filter bank.

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// `n_mels × bins` weights.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
    /// Filter edge/centre frequencies in Hz (`n_mels + 2` points).
    pub points_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.bins + bin]
    }

    /// Project a `bins × frames` power matrix (frequency-major) to `n_mels × frames`.
    pub fn apply(&self, power: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels * frames];
        for m in 0..self.n_mels {
            let row = &self.weights[m * self.bins..(m + 1) * self.bins];
            let dst = &mut out[m * frames..(m + 1) * frames];
            for (bin, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &power[bin * frames..(bin + 1) * frames];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

pub fn mel_filterbank(
    sample_rate: f64,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> MelFilterbank {
    let bins = n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..bins)
        .map(|i| i as f64 * sample_rate / n_fft as f64)
        .collect();
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (points_hz[m], points_hz[m + 1], points_hz[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for (bin, &f) in fft_freqs.iter().enumerate() {
            let lower = (f - lo) / (mid - lo);
            let upper = (hi - f) / (hi - mid);
            weights[m * bins + bin] = lower.min(upper).max(0.0) * enorm;
        }
    }
    MelFilterbank {
        n_mels,
        bins,
        weights,
        points_hz,
    }
}

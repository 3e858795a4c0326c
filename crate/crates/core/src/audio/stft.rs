use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Non-negative magnitude matrix stored frequency-major: `data[bin * frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn get(&self, bin: usize, t: usize) -> f64 {
        self.data[bin * self.frames + t]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Frames produced by centred framing: `1 + floor(len / hop)`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Mirror an out-of-range index back into `[0, n)` (edge sample not repeated).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Centred STFT magnitude with a Hann window and reflect padding of `n_fft / 2`.
pub fn stft_magnitude(samples: &[f32], n_fft: usize, hop: usize) -> Spectrogram {
    assert!(!samples.is_empty(), "stft of an empty signal");
    let bins = n_fft / 2 + 1;
    let frames = frame_count(samples.len(), hop);
    let window = hann(n_fft);
    let pad = (n_fft / 2) as isize;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = vec![0.0; bins * frames];
    for t in 0..frames {
        let start = (t * hop) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + k as isize, samples.len());
            *slot = Complex::new(f64::from(samples[idx]) * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, c) in buf.iter().take(bins).enumerate() {
            data[bin * frames + t] = c.norm();
        }
    }
    Spectrogram {
        bins,
        frames,
        n_fft,
        hop,
        data,
    }
}

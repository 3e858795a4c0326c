//! Median-filtering harmonic/percussive separation with soft masks.

use super::stft::Spectrogram;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HpssParams {
    /// Median kernel length along time (harmonic) and frequency (percussive).
    pub kernel: usize,
    pub power: f64,
    pub margin: f64,
}

impl Default for HpssParams {
    fn default() -> Self {
        Self {
            kernel: 31,
            power: 2.0,
            margin: 1.0,
        }
    }
}

/// Half-sample symmetric boundary (`d c b a | a b c d | d c b a`).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn median_1d(src: &[f64], kernel: usize, out: &mut [f64], window: &mut Vec<f64>) {
    let n = src.len();
    let half = (kernel / 2) as isize;
    for (i, o) in out.iter_mut().enumerate() {
        window.clear();
        for k in -half..=half {
            window.push(src[mirror(i as isize + k, n)]);
        }
        let mid = window.len() / 2;
        let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
        *o = *m;
    }
}

/// Median over time for every frequency row.
pub fn median_filter_time(spec: &Spectrogram, kernel: usize) -> Spectrogram {
    let mut out = spec.zeros_like();
    let mut window = Vec::with_capacity(kernel);
    for bin in 0..spec.bins {
        let row = &spec.data[bin * spec.frames..(bin + 1) * spec.frames];
        median_1d(
            row,
            kernel,
            &mut out.data[bin * spec.frames..(bin + 1) * spec.frames],
            &mut window,
        );
    }
    out
}

/// Median over frequency for every time frame.
pub fn median_filter_freq(spec: &Spectrogram, kernel: usize) -> Spectrogram {
    let mut out = spec.zeros_like();
    let mut window = Vec::with_capacity(kernel);
    let mut col = vec![0.0; spec.bins];
    let mut res = vec![0.0; spec.bins];
    for t in 0..spec.frames {
        for (bin, c) in col.iter_mut().enumerate() {
            *c = spec.data[bin * spec.frames + t];
        }
        median_1d(&col, kernel, &mut res, &mut window);
        for (bin, r) in res.iter().enumerate() {
            out.data[bin * spec.frames + t] = *r;
        }
    }
    out
}

/// `x^p / (x^p + r^p)`, computed relative to `max(x, r)`; 0.5 where both vanish.
fn soft_mask(x: f64, reference: f64, power: f64) -> f64 {
    let z = x.max(reference);
    if z < f64::MIN_POSITIVE {
        return 0.5;
    }
    let a = (x / z).powf(power);
    let b = (reference / z).powf(power);
    a / (a + b)
}

/// Split a magnitude spectrogram into harmonic and percussive parts.
///
/// With `margin == 1` the two masks sum to one, so `H + P == spec`.
pub fn hpss(spec: &Spectrogram, params: &HpssParams) -> (Spectrogram, Spectrogram) {
    let harm = median_filter_time(spec, params.kernel);
    let perc = median_filter_freq(spec, params.kernel);
    let mut h = spec.zeros_like();
    let mut p = spec.zeros_like();
    for i in 0..spec.data.len() {
        let mh = soft_mask(harm.data[i], perc.data[i] * params.margin, params.power);
        let mp = soft_mask(perc.data[i], harm.data[i] * params.margin, params.power);
        h.data[i] = spec.data[i] * mh;
        p.data[i] = spec.data[i] * mp;
    }
    (h, p)
}

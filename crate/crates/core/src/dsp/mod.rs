//! Audio front-end: resampling, circular padding, snippet extraction and the
//! dB-scaled 96-bin mel spectrogram the tagger consumes.
//!
//! Pipeline for one clip:
//!
//! 1. resample to 16 kHz (band-limited windowed-sinc, polyphase table)
//! 2. power STFT with a 2048-point periodic Hann window, hop 512, no centering
//! 3. projection onto 96 HTK-mel triangular filters between 40 Hz and 8 kHz
//! 4. `10·log10(max(p, 1e-10))`, clamped at -100 dB
//!
//! No per-spectrogram normalisation or max-referencing is applied.

mod cache;
mod wav;

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use cache::{read_feature_cache, write_feature_cache};
pub use wav::{read_wav, write_wav};

pub const TARGET_RATE: u32 = 16_000;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 512;
pub const N_MELS: usize = 96;
pub const F_MIN: f64 = 40.0;
pub const F_MAX: f64 = 8000.0;
pub const DB_FLOOR: f64 = -100.0;
pub const POWER_EPS: f64 = 1e-10;
pub const SNIPPET_SECONDS: f64 = 3.0;

/// Zero crossings of the resampling kernel on each side, at the output cutoff.
const RESAMPLE_ZERO_CROSSINGS: usize = 24;
/// Largest interpolation factor for which the polyphase table is precomputed.
const MAX_TABLE_PHASES: usize = 4096;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Dense row-major matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Frames × 96 matrix of dB mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Matrix,
}

impl MelSpectrogram {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::invalid("spectrogram has no frames"));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("spectrogram contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling to `target_rate`.
///
/// Output sample `n` sits at input position `n·M/L` where `L/M` is the reduced
/// rate ratio; it is the dot product of the input with a Blackman-windowed
/// sinc whose cutoff is the lower of the two Nyquist frequencies.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if w.is_empty() {
        return Err(Error::invalid("cannot resample an empty waveform"));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = w.sample_rate as u64 / g;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half = (RESAMPLE_ZERO_CROSSINGS as f64 / cutoff).ceil() as i64;
    let taps = (2 * half) as usize;

    let kernel = |tau: f64| -> f64 {
        let x = tau / half as f64;
        if x.abs() >= 1.0 {
            return 0.0;
        }
        // Blackman window over [-half, half]
        let u = PI * (x + 1.0);
        let win = 0.42 - 0.5 * u.cos() + 0.08 * (2.0 * u).cos();
        cutoff * sinc(cutoff * tau) * win
    };

    let table: Option<Vec<f64>> = (up as usize <= MAX_TABLE_PHASES).then(|| {
        let mut t = Vec::with_capacity(up as usize * taps);
        for p in 0..up {
            let frac = p as f64 / up as f64;
            for j in 0..taps as i64 {
                t.push(kernel(frac - (j - half + 1) as f64));
            }
        }
        t
    });

    let len = w.len() as u64;
    let out_len = (len * up).div_ceil(down) as usize;
    let x = &w.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let idx = (pos / up) as i64;
        let phase = pos % up;
        let frac = phase as f64 / up as f64;
        let mut acc = 0.0;
        for j in 0..taps as i64 {
            let k = idx + j - half + 1;
            if k < 0 || k >= len as i64 {
                continue;
            }
            let h = match &table {
                Some(t) => t[phase as usize * taps + j as usize],
                None => kernel(frac - (j - half + 1) as f64),
            };
            acc += x[k as usize] * h;
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

/// Tiles `w` until it is at least `target_len` samples long.
pub fn circular_pad(w: &Waveform, target_len: usize) -> Result<Waveform> {
    if target_len == 0 {
        return Err(Error::invalid("circular padding target must be positive"));
    }
    if w.len() >= target_len {
        return Ok(w.clone());
    }
    let samples = w.samples.iter().copied().cycle().take(target_len).collect();
    Waveform::new(samples, w.sample_rate)
}

/// One random excerpt of `duration_s` seconds; short clips are circularly
/// padded to the snippet length first.
pub fn extract_snippet<R: Rng + ?Sized>(
    w: &Waveform,
    duration_s: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid("snippet duration must be positive"));
    }
    let n = (duration_s * w.sample_rate as f64).round() as usize;
    if w.len() <= n {
        return circular_pad(w, n);
    }
    let start = rng.gen_range(0..=w.len() - n);
    Waveform::new(w.samples[start..start + n].to_vec(), w.sample_rate)
}

/// Number of STFT frames for a signal of `len` samples (no centering).
pub fn frame_count(len: usize) -> usize {
    if len < N_FFT {
        0
    } else {
        1 + (len - N_FFT) / HOP
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable STFT plan (FFT + window).
#[derive(Clone)]
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("n_fft", &N_FFT).finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self {
            fft,
            window: hann_window(N_FFT),
        }
    }

    /// Squared magnitude of the windowed 2048-point DFT, frames × 1025.
    pub fn power(&self, samples: &[f64]) -> Result<Matrix> {
        let frames = frame_count(samples.len());
        if frames == 0 {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one {N_FFT}-sample frame",
                samples.len()
            )));
        }
        let bins = N_FFT / 2 + 1;
        let mut out = Matrix::zeros(frames, bins);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &samples[t * HOP..t * HOP + N_FFT];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (o, c) in out.row_mut(t).iter_mut().zip(&buf[..bins]) {
                *o = c.norm_sqr();
            }
        }
        Ok(out)
    }
}

/// Power STFT of a waveform (see [`Stft::power`]).
pub fn stft_power(w: &Waveform) -> Result<Matrix> {
    shared_extractor().stft.power(&w.samples)
}

/// HTK mel scale, `2595·log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::invalid(format!("frequency {f} Hz is negative")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank stored sparsely: each row keeps only its
/// non-zero span of FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    center_freqs: Vec<f64>,
    /// (first bin, weights) per filter
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.rows.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    /// Dense `n_mels × n_bins` weight matrix.
    pub fn weights(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows.len(), self.n_bins);
        for (r, (start, w)) in self.rows.iter().enumerate() {
            m.row_mut(r)[*start..*start + w.len()].copy_from_slice(w);
        }
        m
    }

    /// Projects a power frame (length `n_bins`) onto the filters.
    pub fn project_frame(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (o, (start, w)) in out.iter_mut().zip(&self.rows) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Projects every row of a power spectrogram.
    pub fn apply(&self, power: &Matrix) -> Result<Matrix> {
        if power.cols() != self.n_bins {
            return Err(Error::shape(format!(
                "power spectrogram has {} bins, filterbank expects {}",
                power.cols(),
                self.n_bins
            )));
        }
        let mut out = Matrix::zeros(power.rows(), self.n_mels());
        for t in 0..power.rows() {
            self.project_frame(power.row(t), out.row_mut(t));
        }
        Ok(out)
    }
}

/// Triangular filters with centres equally spaced on the HTK mel scale.
pub fn build_mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank> {
    if n_mels == 0 || n_fft < 2 {
        return Err(Error::invalid("filterbank needs n_mels > 0 and n_fft >= 2"));
    }
    if !(f_min < f_max) {
        return Err(Error::invalid(format!(
            "f_min ({f_min} Hz) must be below f_max ({f_max} Hz)"
        )));
    }
    if f_max > sample_rate as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "f_max ({f_max} Hz) exceeds Nyquist ({} Hz)",
            sample_rate as f64 / 2.0
        )));
    }
    let lo_mel = hz_to_mel(f_min)?;
    let hi_mel = hz_to_mel(f_max)?;
    let mut edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo_mel + (hi_mel - lo_mel) * i as f64 / (n_mels + 1) as f64))
        .collect();
    edges[0] = f_min;
    edges[n_mels + 1] = f_max;
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;

    let mut rows = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut dense = vec![0.0; n_bins];
        for (k, d) in dense.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (c - lo);
            let fall = (hi - f) / (hi - c);
            *d = rise.min(fall).max(0.0);
        }
        if dense.iter().all(|&v| v == 0.0) {
            // narrower than one bin: fall back to the nearest bin
            let k = ((c / bin_hz).round() as usize).min(n_bins - 1);
            dense[k] = 1.0;
        }
        let first = dense.iter().position(|&v| v > 0.0).unwrap_or(0);
        let last = dense.iter().rposition(|&v| v > 0.0).unwrap_or(0);
        rows.push((first, dense[first..=last].to_vec()));
    }
    Ok(MelFilterbank {
        n_bins,
        center_freqs: edges[1..=n_mels].to_vec(),
        rows,
    })
}

/// `10·log10(max(p, 1e-10))`, clamped below at -100 dB.
pub fn power_to_db(p: f64) -> f64 {
    (10.0 * p.max(POWER_EPS).log10()).max(DB_FLOOR)
}

pub fn power_to_db_matrix(p: Matrix) -> Matrix {
    p.map(power_to_db)
}

/// STFT plan and filterbank for the fixed 16 kHz front-end.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stft: Stft,
    filterbank: MelFilterbank,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self {
            stft: Stft::new(),
            filterbank: build_mel_filterbank(TARGET_RATE, N_FFT, N_MELS, F_MIN, F_MAX)
                .expect("default filterbank parameters are valid"),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let resampled;
        let w = if w.sample_rate() == TARGET_RATE {
            w
        } else {
            resampled = resample(w, TARGET_RATE)?;
            &resampled
        };
        let power = self.stft.power(w.samples())?;
        let mel = self.filterbank.apply(&power)?;
        MelSpectrogram::new(power_to_db_matrix(mel))
    }
}

fn shared_extractor() -> &'static FeatureExtractor {
    static EXTRACTOR: OnceLock<FeatureExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(FeatureExtractor::new)
}

/// Unnormalised dB mel spectrogram of a waveform at any sample rate.
pub fn compute_features(w: &Waveform) -> Result<MelSpectrogram> {
    shared_extractor().compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wf(samples: &[f64]) -> Waveform {
        Waveform::new(samples.to_vec(), TARGET_RATE).unwrap()
    }

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Waveform {
        let s = (0..len)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
    }

    #[test]
    fn circular_pad_examples() {
        let out = circular_pad(&wf(&[1.0, 2.0, 3.0]), 7).unwrap();
        assert_eq!(out.samples(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        let out = circular_pad(&wf(&[1.0, 2.0, 3.0, 4.0]), 3).unwrap();
        assert_eq!(out.samples(), &[1.0, 2.0, 3.0, 4.0]);
        let out = circular_pad(&wf(&[5.0]), 4).unwrap();
        assert_eq!(out.samples(), &[5.0; 4]);
        assert!(circular_pad(&wf(&[1.0]), 0).is_err());
    }

    #[test]
    fn snippet_of_exact_length_is_the_clip() {
        let w = sine(100.0, TARGET_RATE, 48000, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(extract_snippet(&w, 3.0, &mut rng).unwrap(), w);
    }

    #[test]
    fn short_snippet_tiles_input() {
        let w = sine(100.0, TARGET_RATE, 24000, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = extract_snippet(&w, 3.0, &mut rng).unwrap();
        assert_eq!(s.len(), 48000);
        assert_eq!(&s.samples()[..24000], w.samples());
        assert_eq!(&s.samples()[24000..], w.samples());
    }

    #[test]
    fn snippet_replays_under_same_seed() {
        let s: Vec<f64> = (0..96000).map(|i| (i as f64 * 0.001).sin()).collect();
        let w = wf(&s);
        let a = extract_snippet(&w, 3.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = extract_snippet(&w, 3.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 48000);
    }

    #[test]
    fn resample_identity_and_length() {
        let w = sine(440.0, TARGET_RATE, 1000, 0.3);
        assert_eq!(resample(&w, TARGET_RATE).unwrap(), w);
        let w = sine(440.0, 32000, 32000, 0.3);
        let r = resample(&w, 16000).unwrap();
        assert!((r.len() as i64 - 16000).abs() <= 1);
        assert_eq!(r.sample_rate(), 16000);
        assert!(resample(&w, 0).is_err());
    }

    #[test]
    fn stft_rejects_short_input() {
        assert!(stft_power(&wf(&vec![0.0; 2047])).is_err());
        assert_eq!(stft_power(&wf(&vec![0.0; 2048])).unwrap().rows(), 1);
    }

    #[test]
    fn stft_of_silence_is_zero() {
        let p = stft_power(&wf(&vec![0.0; 48000])).unwrap();
        assert_eq!(p.rows(), 90);
        assert_eq!(p.cols(), 1025);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hz_to_mel_examples() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 781.172_838_748).abs() < 1e-6);
        assert!(hz_to_mel(440.0).unwrap() < hz_to_mel(880.0).unwrap());
        assert!(hz_to_mel(-1.0).is_err());
        assert!((mel_to_hz(hz_to_mel(1234.5).unwrap()) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rejects_bad_range() {
        assert!(build_mel_filterbank(16000, 2048, 96, 8000.0, 40.0).is_err());
        assert!(build_mel_filterbank(16000, 2048, 96, 40.0, 40.0).is_err());
        assert!(build_mel_filterbank(16000, 2048, 96, 40.0, 9000.0).is_err());
    }

    #[test]
    fn db_examples() {
        assert_eq!(power_to_db(1.0), 0.0);
        assert!((power_to_db(100.0) - 20.0).abs() < 1e-12);
        assert_eq!(power_to_db(0.0), DB_FLOOR);
    }

    #[test]
    fn silence_maps_to_floor() {
        let f = compute_features(&wf(&vec![0.0; 48000])).unwrap();
        assert_eq!((f.frames(), f.bins()), (90, 96));
        assert!(f.values().data().iter().all(|&v| v == DB_FLOOR));
    }
}

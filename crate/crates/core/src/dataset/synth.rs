//! Synthetic 12-class corpus standing in for the musical subset of a weakly
//! labelled tagging dataset.
//!
//! Each class owns a timbre recipe: ten harmonic (or mildly inharmonic)
//! partial stacks with their own pitch range and envelope, and two band-passed
//! noise "voices". A clip mixes one source, or two with probability
//! `multi_label_rate`. Noisy-source clips are additionally buried in
//! background noise and, with probability `p_noise`, get one tag replaced.
//! Every sample is quantised to the 16-bit grid so written WAVs read back
//! bit-identically.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClipRecord, Manifest, Source, SplitRole, TagVocabulary, N_CLASSES};
use crate::dsp::{self, Waveform, TARGET_RATE};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Corpus size and corruption knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub curated_per_class: usize,
    pub noisy_per_class: usize,
    pub test_per_class: usize,
    pub multi_label_rate: f64,
    pub p_noise: f64,
    pub background_snr_db: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl CorpusSpec {
    /// 240 curated training clips, a 4x larger noisy split and 120 test clips.
    pub fn desk() -> Self {
        Self {
            curated_per_class: 20,
            noisy_per_class: 80,
            test_per_class: 10,
            multi_label_rate: 0.2,
            p_noise: 0.5,
            background_snr_db: 0.0,
            min_duration_s: 1.0,
            max_duration_s: 8.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.multi_label_rate) || !prob(self.p_noise) {
            return Err(Error::invalid("corpus probabilities must lie in [0, 1]"));
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return Err(Error::invalid("corpus durations must satisfy 0 < min <= max"));
        }
        if !self.background_snr_db.is_finite() {
            return Err(Error::invalid("background SNR must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Envelope {
    /// Held notes with attack, optional vibrato (relative depth) and tremolo.
    Sustained {
        attack_s: f64,
        vibrato_hz: f64,
        vibrato_depth: f64,
        tremolo_hz: f64,
        tremolo_depth: f64,
    },
    /// Exponentially decaying strikes.
    Struck { decay_s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Timbre {
    /// Partials as (frequency ratio, amplitude).
    Partials(Vec<(f64, f64)>),
    /// Band-passed noise whose centre follows the note pitch; `q` is the
    /// resonator quality factor.
    NoiseBand { q: f64 },
}

/// How one class sounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecipe {
    pub pitch_range_hz: (f64, f64),
    pub note_len_s: (f64, f64),
    pub timbre: Timbre,
    pub envelope: Envelope,
}

fn harmonic(n: usize, amp: impl Fn(usize) -> f64) -> Timbre {
    Timbre::Partials((1..=n).map(|k| (k as f64, amp(k))).collect())
}

fn sustained(attack_s: f64, vibrato: (f64, f64), tremolo: (f64, f64)) -> Envelope {
    Envelope::Sustained {
        attack_s,
        vibrato_hz: vibrato.0,
        vibrato_depth: vibrato.1,
        tremolo_hz: tremolo.0,
        tremolo_depth: tremolo.1,
    }
}

/// Recipe for class `c` of the default vocabulary ordering.
pub fn class_recipe(c: usize) -> ClassRecipe {
    let (pitch_range_hz, note_len_s, timbre, envelope) = match c {
        // accordion: reedy, even decay, bellows tremolo
        0 => (
            (196.0, 392.0),
            (0.4, 1.0),
            harmonic(10, |k| 0.85f64.powi(k as i32 - 1)),
            sustained(0.05, (0.0, 0.0), (5.5, 0.3)),
        ),
        1 => (
            (110.0, 330.0),
            (0.3, 0.7),
            harmonic(12, |k| (k as f64).powf(-1.2)),
            Envelope::Struck { decay_s: 0.5 },
        ),
        2 => (
            (41.0, 98.0),
            (0.4, 0.9),
            harmonic(8, |k| (k as f64).powf(-1.8)),
            Envelope::Struck { decay_s: 0.9 },
        ),
        3 => (
            (98.0, 220.0),
            (0.5, 1.2),
            harmonic(12, |k| (k as f64).powf(-0.8)),
            sustained(0.12, (5.0, 0.015), (0.0, 0.0)),
        ),
        4 => (
            (147.0, 440.0),
            (0.2, 0.5),
            harmonic(16, |k| (k as f64).powf(-0.4)),
            sustained(0.01, (0.0, 0.0), (0.0, 0.0)),
        ),
        5 => (
            (523.0, 1568.0),
            (0.3, 0.9),
            Timbre::Partials(vec![(1.0, 1.0), (2.0, 0.25), (3.0, 0.1), (4.0, 0.04)]),
            sustained(0.06, (4.5, 0.01), (0.0, 0.0)),
        ),
        6 => (
            (1568.0, 3136.0),
            (0.15, 0.4),
            Timbre::Partials(vec![(1.0, 1.0), (2.76, 0.4), (5.4, 0.2)]),
            Envelope::Struck { decay_s: 0.35 },
        ),
        7 => (
            (392.0, 1047.0),
            (0.25, 0.8),
            Timbre::Partials(vec![
                (1.0, 1.0),
                (2.0, 0.3),
                (3.0, 0.7),
                (4.0, 0.2),
                (5.0, 0.5),
                (6.0, 0.15),
                (7.0, 0.3),
            ]),
            sustained(0.03, (0.0, 0.0), (7.0, 0.2)),
        ),
        8 => (
            (262.0, 1047.0),
            (0.12, 0.3),
            Timbre::Partials(vec![(1.0, 1.0), (3.93, 0.3), (9.2, 0.08)]),
            Envelope::Struck { decay_s: 0.18 },
        ),
        9 => (
            (233.0, 698.0),
            (0.3, 0.8),
            Timbre::Partials(
                [0.5, 0.8, 1.0, 0.9, 0.8, 0.65, 0.5, 0.4, 0.3, 0.2]
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| ((k + 1) as f64, a))
                    .collect(),
            ),
            sustained(0.04, (5.5, 0.006), (0.0, 0.0)),
        ),
        10 => (
            (300.0, 600.0),
            (0.25, 0.6),
            Timbre::NoiseBand { q: 2.5 },
            sustained(0.05, (5.5, 0.03), (4.0, 0.5)),
        ),
        11 => (
            (900.0, 1600.0),
            (0.25, 0.6),
            Timbre::NoiseBand { q: 3.0 },
            sustained(0.05, (6.0, 0.03), (4.0, 0.5)),
        ),
        _ => panic!("class index {c} out of range"),
    };
    ClassRecipe {
        pitch_range_hz,
        note_len_s,
        timbre,
        envelope,
    }
}

const NYQUIST_GUARD_HZ: f64 = 7900.0;
const SOURCE_RMS: f64 = 0.1;

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn envelope_gain(env: &Envelope, t: f64, note_len: f64) -> f64 {
    let release = ((note_len - t) / 0.01).clamp(0.0, 1.0);
    match *env {
        Envelope::Sustained {
            attack_s,
            tremolo_hz,
            tremolo_depth,
            ..
        } => {
            let attack = (t / attack_s).min(1.0);
            let trem = 1.0 - tremolo_depth * 0.5 * (1.0 - (2.0 * PI * tremolo_hz * t).cos());
            attack * release * trem
        }
        Envelope::Struck { decay_s } => (t / 0.003).min(1.0) * (-t / decay_s).exp() * release,
    }
}

fn vibrato(env: &Envelope, t: f64) -> f64 {
    match *env {
        Envelope::Sustained {
            vibrato_hz,
            vibrato_depth,
            ..
        } => 1.0 + vibrato_depth * (2.0 * PI * vibrato_hz * t).sin(),
        Envelope::Struck { .. } => 1.0,
    }
}

/// Two-pole resonator band-pass, coefficients refreshed every block.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, center: f64, q: f64, sr: f64) -> f64 {
        let r = (-PI * center / (q * sr)).exp();
        let theta = 2.0 * PI * center / sr;
        let gain = 1.0 - r;
        let y = gain * x + 2.0 * r * theta.cos() * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One class source of `len` samples at 16 kHz, RMS-normalised.
fn render_source(c: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let recipe = class_recipe(c);
    let sr = TARGET_RATE as f64;
    let mut out = vec![0.0; len];
    let mut start = 0usize;
    let mut stage = (Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 });
    while start < len {
        let (lo, hi) = recipe.note_len_s;
        let note_len = lo + rng.gen::<f64>() * (hi - lo);
        let note_samples = ((note_len * sr) as usize).max(1);
        let end = (start + note_samples).min(len);
        let f0 = log_uniform(rng, recipe.pitch_range_hz);
        let velocity = 0.6 + 0.4 * rng.gen::<f64>();
        match &recipe.timbre {
            Timbre::Partials(partials) => {
                let mut phases: Vec<f64> = partials.iter().map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
                for (i, o) in out[start..end].iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let f = f0 * vibrato(&recipe.envelope, t);
                    let mut acc = 0.0;
                    for ((ratio, amp), ph) in partials.iter().zip(phases.iter_mut()) {
                        let fk = f * ratio;
                        if fk < NYQUIST_GUARD_HZ {
                            acc += amp * ph.sin();
                        }
                        *ph += 2.0 * PI * fk / sr;
                    }
                    *o += velocity * envelope_gain(&recipe.envelope, t, note_len) * acc;
                }
            }
            Timbre::NoiseBand { q } => {
                for (i, o) in out[start..end].iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let center = f0 * vibrato(&recipe.envelope, t);
                    let x = rng.gen::<f64>() * 2.0 - 1.0;
                    let y = stage.0.step(x, center, *q, sr);
                    let y = stage.1.step(y, center, *q, sr);
                    *o += velocity * envelope_gain(&recipe.envelope, t, note_len) * y;
                }
            }
        }
        start = end;
    }
    normalise_rms(&mut out, SOURCE_RMS);
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalise_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        let g = target / r;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Low-passed white noise used as the noisy split's acoustic background.
fn background(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut y = 0.0;
    (0..len)
        .map(|_| {
            let x = rng.gen::<f64>() * 2.0 - 1.0;
            y = 0.7 * y + 0.3 * x;
            y + 0.3 * x
        })
        .collect()
}

fn quantise(x: f64) -> f64 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
}

/// A generated clip: its record and its audio.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub waveform: Waveform,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocabulary: TagVocabulary,
    pub curated_train: Vec<SynthClip>,
    pub noisy_train: Vec<SynthClip>,
    pub test: Vec<SynthClip>,
}

/// Paths written by [`SyntheticCorpus::write`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub vocabulary: PathBuf,
    pub curated_train: PathBuf,
    pub noisy_train: PathBuf,
    pub test: PathBuf,
}

fn manifest_of(clips: &[SynthClip], role: SplitRole) -> Result<Manifest> {
    Manifest::new(clips.iter().map(|c| c.record.clone()).collect(), role)
}

impl SyntheticCorpus {
    pub fn curated_manifest(&self) -> Result<Manifest> {
        manifest_of(&self.curated_train, SplitRole::Train)
    }

    pub fn noisy_manifest(&self) -> Result<Manifest> {
        manifest_of(&self.noisy_train, SplitRole::Train)
    }

    pub fn test_manifest(&self) -> Result<Manifest> {
        manifest_of(&self.test, SplitRole::Test)
    }

    /// Writes `audio/<id>.wav`, the three split manifests and the vocabulary.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<CorpusPaths> {
        let dir = dir.as_ref();
        let audio = dir.join("audio");
        std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
        for clip in self.curated_train.iter().chain(&self.noisy_train).chain(&self.test) {
            dsp::write_wav(dir.join(&clip.record.audio_ref), &clip.waveform)?;
        }
        let paths = CorpusPaths {
            vocabulary: dir.join("vocabulary.txt"),
            curated_train: dir.join("curated_train.csv"),
            noisy_train: dir.join("noisy_train.csv"),
            test: dir.join("test.csv"),
        };
        self.vocabulary.write(&paths.vocabulary)?;
        self.curated_manifest()?
            .write_csv(&paths.curated_train, &self.vocabulary)?;
        self.noisy_manifest()?
            .write_csv(&paths.noisy_train, &self.vocabulary)?;
        self.test_manifest()?.write_csv(&paths.test, &self.vocabulary)?;
        Ok(paths)
    }
}

#[derive(Clone, Copy)]
enum Split {
    Curated,
    Noisy,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Curated => 1,
            Split::Noisy => 2,
            Split::Test => 3,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Curated => "ct",
            Split::Noisy => "nt",
            Split::Test => "te",
        }
    }
}

fn make_clip(
    spec: &CorpusSpec,
    seed: u64,
    split: Split,
    index: usize,
    primary: usize,
) -> Result<SynthClip> {
    let mut rng = stream_rng(seed, Stream::Corpus, (split.code() << 32) | index as u64);
    let sr = TARGET_RATE as f64;
    let dur = spec.min_duration_s + rng.gen::<f64>() * (spec.max_duration_s - spec.min_duration_s);
    let len = ((dur * sr).round() as usize).max(1);

    let mut tags = BTreeSet::from([primary]);
    if rng.gen::<f64>() < spec.multi_label_rate {
        let other = (primary + rng.gen_range(1..N_CLASSES)) % N_CLASSES;
        tags.insert(other);
    }
    let mut mix = vec![0.0; len];
    for &c in &tags {
        for (m, s) in mix.iter_mut().zip(render_source(c, len, &mut rng)) {
            *m += s;
        }
    }
    let source = match split {
        Split::Noisy => Source::Noisy,
        _ => Source::Curated,
    };
    if let Split::Noisy = split {
        let mut bg = background(len, &mut rng);
        let target = rms(&mix) / 10f64.powf(spec.background_snr_db / 20.0);
        normalise_rms(&mut bg, target);
        mix.iter_mut().zip(&bg).for_each(|(m, b)| *m += b);
        if rng.gen::<f64>() < spec.p_noise {
            let victims: Vec<usize> = tags.iter().copied().collect();
            let removed = victims[rng.gen_range(0..victims.len())];
            let candidates: Vec<usize> = (0..N_CLASSES).filter(|c| !tags.contains(c)).collect();
            let inserted = candidates[rng.gen_range(0..candidates.len())];
            tags.remove(&removed);
            tags.insert(inserted);
        }
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let gain = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    let samples = mix.into_iter().map(|v| quantise(v * gain)).collect();

    let id = format!("{}{:05}", split.prefix(), index);
    Ok(SynthClip {
        record: ClipRecord {
            audio_ref: format!("audio/{id}.wav"),
            id,
            tags,
            source,
        },
        waveform: Waveform::new(samples, TARGET_RATE)?,
    })
}

fn make_split(spec: &CorpusSpec, seed: u64, split: Split, per_class: usize) -> Result<Vec<SynthClip>> {
    (0..per_class * N_CLASSES)
        .map(|i| make_clip(spec, seed, split, i, i % N_CLASSES))
        .collect()
}

/// Generates all three splits; fully determined by `(spec, seed)`.
pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    Ok(SyntheticCorpus {
        vocabulary: TagVocabulary::default(),
        curated_train: make_split(spec, seed, Split::Curated, spec.curated_per_class)?,
        noisy_train: make_split(spec, seed, Split::Noisy, spec.noisy_per_class)?,
        test: make_split(spec, seed, Split::Test, spec.test_per_class)?,
    })
}

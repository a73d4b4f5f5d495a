use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

/// Reads a PCM WAV (16-bit integer or 32-bit float), averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                message: format!("unsupported sample format {fmt:?} with {bits} bits"),
            })
        }
    };
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV. Samples are scaled by 32768 and saturated,
/// so values already on the 16-bit grid survive a write/read cycle exactly.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stereo_float_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(0.5f32, -0.5f32), (1.0, 0.0), (0.25, 0.75)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let wf = read_wav(&path).unwrap();
        assert_eq!(wf.sample_rate(), 22050);
        assert_eq!(wf.samples(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn pcm16_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        let src = Waveform::new(vec![0.0, 0.5, -0.5, 0.999, -1.0], 16000).unwrap();
        write_wav(&path, &src).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in src.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }
}

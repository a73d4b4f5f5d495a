//! Log-mel features of a WAV file, or of a synthetic two-tone chord when no
//! path is given.
//!
//! ```bash
//! cargo run --example features -- clip.wav
//! ```

use tagnoise::dsp::{compute_features, read_wav, Waveform, TARGET_RATE};

fn main() -> tagnoise::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(path) => read_wav(path)?,
        None => {
            let rate = 44_100;
            let samples = (0..3 * rate)
                .map(|i| {
                    let t = i as f64 / rate as f64;
                    0.3 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
                        + 0.2 * (2.0 * std::f64::consts::PI * 1760.0 * t).sin()
                })
                .collect();
            Waveform::new(samples, rate as u32)?
        }
    };
    println!("input: {} samples at {} Hz ({:.2} s)", wave.len(), wave.sample_rate(), wave.duration_s());

    let mel = compute_features(&wave)?;
    println!("features: {} frames x {} mel bands (resampled to {TARGET_RATE} Hz)", mel.frames(), mel.bins());

    let band_mean: Vec<f64> = (0..mel.bins())
        .map(|b| (0..mel.frames()).map(|t| mel.values().get(t, b)).sum::<f64>() / mel.frames() as f64)
        .collect();
    let mut loudest: Vec<usize> = (0..band_mean.len()).collect();
    loudest.sort_by(|&a, &b| band_mean[b].total_cmp(&band_mean[a]));
    for &b in &loudest[..5] {
        println!("  band {b:2}: {:7.2} dB", band_mean[b]);
    }
    Ok(())
}

//! Per-clip feature cache: `u32 frames`, `u32 bins`, then row-major
//! little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Matrix, MelSpectrogram};

pub fn write_feature_cache(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let m = spec.values();
    let mut buf = Vec::with_capacity(8 + 4 * m.data().len());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::CorruptFile {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 {
        return Err(corrupt("missing shape header".into()));
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() != frames * bins * 4 {
        return Err(corrupt(format!(
            "expected {} payload bytes for {frames}x{bins}, found {}",
            frames * bins * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    MelSpectrogram::new(Matrix::from_vec(frames, bins, data)?)
}

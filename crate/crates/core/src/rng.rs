//! Seed derivation for the independent random streams a run consumes.
//!
//! Every stream is a ChaCha8 generator keyed by `(run seed, stream id)` and
//! positioned on a 64-bit sub-stream. Sub-streams let the snippet generator be
//! addressed by `(epoch, clip)` so the snippet drawn for a clip never depends
//! on batch composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams derived from a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Snippet = 3,
    Dropout = 4,
    Corpus = 5,
    Labels = 6,
    Subsample = 7,
    Holdout = 8,
}

/// Generator for `stream` of `seed`, positioned at sub-stream `sub`.
pub fn stream_rng(seed: u64, stream: Stream, sub: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"tagnoise");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(sub);
    rng
}

/// Sub-stream index for a `(epoch, clip)` pair.
pub fn epoch_clip_sub(epoch: usize, clip: usize) -> u64 {
    ((epoch as u64) << 32) | (clip as u64 & 0xffff_ffff)
}

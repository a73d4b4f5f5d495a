//! Label-noise robustness experiments for weakly labelled multi-label music
//! tagging.
//!
//! The crate synthesises a 12-instrument corpus with curated and noisy label
//! sources, extracts log-mel features, trains a small batch-normalised CNN
//! tagger with Adam, corrupts training labels at controlled rates, and scores
//! models with class-wise MAP/MAUC plus paired t-tests across seeds.
//!
//! ```no_run
//! use tagnoise::dataset::{synth_corpus, CorpusSpec};
//!
//! let corpus = synth_corpus(&CorpusSpec::desk(), 7)?;
//! corpus.write("out/corpus")?;
//! # Ok::<(), tagnoise::Error>(())
//! ```

pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod tagger;
pub mod trainer;

pub use error::{Error, Result};

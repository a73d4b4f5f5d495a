//! The CNN tagger: eight 3×3 convolutions in four blocks, average pooling
//! after the first three blocks, global average pooling and a 12-way sigmoid
//! head. Global pooling lets evaluation run on full clips of any length.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::N_CLASSES;
use crate::dsp::{self, FeatureExtractor, MelSpectrogram, Waveform, N_MELS, SNIPPET_SECONDS, TARGET_RATE};
use crate::error::{Error, Result};
use crate::nn::{ForwardPass, Graph, LayerSpec, Mode, Network, Parameters, Tensor, Var};
use crate::rng::{stream_rng, Stream};

pub const N_CONV: usize = 8;
pub const N_POOL: usize = 3;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Conv layer indices (0-based) after which a 2×2 average pool follows.
    pub pool_after: Vec<usize>,
    pub dropout: f64,
    pub n_classes: usize,
    pub n_mels: usize,
}

impl Default for TaggerConfig {
    /// 32,32 / 64,64 / 128,128 / 256,256 channels.
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 32, 64, 64, 128, 128, 256, 256],
            kernel_size: 3,
            pool_after: vec![1, 3, 5],
            dropout: 0.3,
            n_classes: N_CLASSES,
            n_mels: N_MELS,
        }
    }
}

impl TaggerConfig {
    /// Narrow variant of the default layout sized for single-core training.
    pub fn desk() -> Self {
        Self {
            conv_channels: vec![4, 4, 8, 8, 16, 16, 32, 32],
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != N_CONV {
            return Err(Error::Config(format!(
                "tagger needs exactly {N_CONV} conv layers, got {}",
                self.conv_channels.len()
            )));
        }
        if self.pool_after.len() != N_POOL {
            return Err(Error::Config(format!(
                "tagger needs exactly {N_POOL} pooling layers, got {}",
                self.pool_after.len()
            )));
        }
        if self.pool_after.windows(2).any(|w| w[0] >= w[1]) || self.pool_after.iter().any(|&p| p >= N_CONV) {
            return Err(Error::Config(format!(
                "pool positions {:?} must be strictly increasing conv indices",
                self.pool_after
            )));
        }
        if self.conv_channels.contains(&0) || self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config("channels must be positive and the kernel size odd".into()));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!(
                "n_classes must equal the vocabulary size {N_CLASSES}"
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Smallest frame count the pooling stack accepts.
    pub fn min_frames(&self) -> usize {
        1 << N_POOL
    }

    /// Layer stack: conv → BN → ReLU per conv, pool + dropout after pooled
    /// convs, then global pooling, dense, sigmoid.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in self.conv_channels.iter().enumerate() {
            layers.push(LayerSpec::Conv {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: self.kernel_size,
                stride: 1,
                padding: self.kernel_size / 2,
            });
            layers.push(LayerSpec::BatchNorm { channels: out_ch });
            layers.push(LayerSpec::Relu);
            if self.pool_after.contains(&i) {
                layers.push(LayerSpec::AvgPool { size: 2 });
                layers.push(LayerSpec::Dropout { rate: self.dropout });
            }
            in_ch = out_ch;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense {
            in_features: in_ch,
            out_features: self.n_classes,
        });
        layers.push(LayerSpec::Sigmoid);
        Ok(layers)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("tagger config serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    config: TaggerConfig,
    net: Network,
    mode: Mode,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TNTG";

impl TaggerModel {
    /// Deterministic He-uniform initialisation from `init_seed`.
    pub fn build(config: TaggerConfig, init_seed: u64) -> Result<Self> {
        let layers = config.layers()?;
        let mut rng = stream_rng(init_seed, Stream::Init, 0);
        Ok(Self {
            net: Network::new(layers, &mut rng)?,
            config,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        self.net.params_mut()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameter_count(&self) -> usize {
        self.net.params().trainable_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, frames, mels) = x.dims4()?;
        if c != 1 || mels != self.config.n_mels {
            return Err(Error::shape(format!(
                "tagger input must be N×1×frames×{}, got {:?}",
                self.config.n_mels,
                x.shape()
            )));
        }
        if frames < self.config.min_frames() {
            return Err(Error::shape(format!(
                "input has {frames} frames; pad to at least {} before scoring",
                self.config.min_frames()
            )));
        }
        Ok(())
    }

    /// Records a forward pass in the model's current mode. In train mode the
    /// returned pass carries the batch statistics for [`Self::commit_bn_stats`].
    pub fn forward_graph<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, rng: &mut R) -> Result<ForwardPass> {
        self.check_input(g.value(x))?;
        self.net.forward(g, x, self.mode, rng)
    }

    pub fn commit_bn_stats(&mut self, pass: &ForwardPass) {
        self.net.apply_bn_stats(&pass.bn_stats);
    }

    /// `N×12` probabilities. In train mode this also advances the batch-norm
    /// running statistics.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let pass = self.forward_graph(&mut g, x, rng)?;
        if self.mode == Mode::Train {
            self.commit_bn_stats(&pass);
        }
        Ok(g.value(pass.output).clone())
    }

    /// Eval-mode probabilities; never mutates the model.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        self.net.infer(batch)
    }

    /// Scores a full-length spectrogram.
    pub fn predict_features(&self, features: &MelSpectrogram) -> Result<Vec<f64>> {
        let x = features_to_batch(std::slice::from_ref(features))?;
        Ok(self.infer(&x)?.into_data())
    }

    /// Scores a whole clip; clips shorter than 3 s are circularly padded.
    pub fn predict_clip(&self, w: &Waveform) -> Result<Vec<f64>> {
        self.predict_features(&clip_features(&FeatureExtractor::new(), w)?)
    }

    /// Canonical config text header followed by the parameter file.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.net.params().to_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err("not a tagger checkpoint".into());
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = bytes.get(8..8 + len).ok_or("truncated config header")?;
        let text = std::str::from_utf8(header).map_err(|_| "config header is not UTF-8")?;
        let config = TaggerConfig::from_text(text).map_err(|e| e.to_string())?;
        let mut model = Self::build(config, 0).map_err(|e| e.to_string())?;
        let records = Parameters::decode(&bytes[8 + len..])?;
        model.net.params_mut().load_records(records)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|message| Error::CorruptFile {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Features of a full clip for scoring, padded to at least 3 s.
pub fn clip_features(extractor: &FeatureExtractor, w: &Waveform) -> Result<MelSpectrogram> {
    let w = dsp::resample(w, TARGET_RATE)?;
    let min_len = (SNIPPET_SECONDS * TARGET_RATE as f64).round() as usize;
    let w = dsp::circular_pad(&w, min_len)?;
    extractor.compute(&w)
}

/// Stacks equally sized spectrograms into an `N×1×frames×bins` batch.
pub fn features_to_batch(features: &[MelSpectrogram]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::invalid("cannot batch zero spectrograms"))?;
    let (frames, bins) = (first.frames(), first.bins());
    let mut data = Vec::with_capacity(features.len() * frames * bins);
    for f in features {
        if (f.frames(), f.bins()) != (frames, bins) {
            return Err(Error::shape(format!(
                "batch mixes {frames}x{bins} and {}x{} spectrograms",
                f.frames(),
                f.bins()
            )));
        }
        data.extend_from_slice(f.values().data());
    }
    Tensor::new(vec![features.len(), 1, frames, bins], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TaggerConfig {
        TaggerConfig {
            conv_channels: vec![2, 2, 2, 2, 3, 3, 4, 4],
            ..TaggerConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TaggerConfig::default().validate().is_ok());
        assert!(TaggerConfig::desk().validate().is_ok());
        let mut c = TaggerConfig::default();
        c.conv_channels.pop();
        assert!(matches!(TaggerModel::build(c, 0), Err(Error::Config(_))));
        let c = TaggerConfig {
            pool_after: vec![1, 3],
            ..TaggerConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TaggerConfig {
            n_classes: 10,
            ..TaggerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = TaggerModel::build(tiny(), 42).unwrap();
        let b = TaggerModel::build(tiny(), 42).unwrap();
        let c = TaggerModel::build(tiny(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn variable_length_eval() {
        let m = TaggerModel::build(tiny(), 1).unwrap();
        for frames in [8, 90, 300] {
            let x = Tensor::new(vec![2, 1, frames, 96], (0..2 * frames * 96).map(|i| (i % 17) as f64).collect())
                .unwrap();
            let y = m.infer(&x).unwrap();
            assert_eq!(y.shape(), &[2, 12]);
            assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
            assert_eq!(y, m.infer(&x).unwrap());
        }
        let short = Tensor::zeros(&[1, 1, 7, 96]);
        assert!(matches!(m.infer(&short), Err(Error::Shape(_))));
        assert!(m.infer(&Tensor::zeros(&[1, 1, 16, 40])).is_err());
    }

    #[test]
    fn train_mode_updates_running_stats_only_in_train() {
        let mut m = TaggerModel::build(tiny(), 1).unwrap();
        let x = Tensor::new(vec![2, 1, 16, 96], (0..2 * 16 * 96).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let before = m.clone();
        let mut rng = stream_rng(0, Stream::Dropout, 0);
        m.forward(&x, &mut rng).unwrap();
        assert_eq!(m, before);
        m.set_mode(Mode::Train);
        m.forward(&x, &mut rng).unwrap();
        assert_ne!(m.params(), before.params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = TaggerModel::build(tiny(), 9).unwrap();
        let bytes = m.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"TNTG");
        let back = TaggerModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        let mut bad = bytes.clone();
        let last = bad.len() - 10;
        bad[last] ^= 1;
        assert!(TaggerModel::from_checkpoint_bytes(&bad).is_err());
    }

    #[test]
    fn short_and_silent_clips_are_scored() {
        let m = TaggerModel::build(tiny(), 3).unwrap();
        let two_s = Waveform::new((0..32000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(), 16000).unwrap();
        let ext = FeatureExtractor::new();
        assert_eq!(clip_features(&ext, &two_s).unwrap().frames(), 90);
        let eight_s = Waveform::new(vec![0.1; 128000], 16000).unwrap();
        assert_eq!(clip_features(&ext, &eight_s).unwrap().frames(), 247);
        let silence = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let p = m.predict_clip(&silence).unwrap();
        assert_eq!(p.len(), 12);
        assert!(p.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    }
}

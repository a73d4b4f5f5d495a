//! Adam training with a step learning-rate schedule on random 3 s snippets,
//! plus the seeded multi-run suite.
//!
//! Random streams per run seed (see [`crate::rng`]): `Init` for weights,
//! `Shuffle` sub-stream `epoch` for clip order, `Snippet` sub-stream
//! `(epoch, clip)` for snippet offsets and `Dropout` sub-stream `epoch`
//! for dropout masks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMatrix, LoadedSplit, TagVocabulary, N_CLASSES};
use crate::dsp::{self, FeatureExtractor, MelSpectrogram, SNIPPET_SECONDS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ScoreMatrix};
use crate::nn::{Graph, Mode, Parameters, Tensor};
use crate::rng::{epoch_clip_sub, stream_rng, Stream};
use crate::tagger::{clip_features, features_to_batch, TaggerConfig, TaggerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnippetPolicy {
    /// A fresh snippet per clip every epoch.
    PerEpoch,
    /// One snippet per clip, drawn once and reused.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_drop_epoch: usize,
    pub total_epochs: usize,
    pub drop_factor: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seeds: Vec<u64>,
    pub snippet_policy: SnippetPolicy,
    /// Disables feature prefetch on a helper thread.
    pub strict_deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// 100 epochs at 0.001, divided by 10 from epoch 80, batch 32.
    pub fn paper() -> Self {
        Self {
            lr0: 0.001,
            lr_drop_epoch: 80,
            total_epochs: 100,
            drop_factor: 10.0,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seeds: vec![1, 2, 3, 4, 5],
            snippet_policy: SnippetPolicy::PerEpoch,
            strict_deterministic: true,
        }
    }

    /// 30 epochs with the drop at epoch 24, batch 16.
    pub fn desk() -> Self {
        Self {
            lr_drop_epoch: 19,
            total_epochs: 24,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.lr_drop_epoch >= self.total_epochs {
            return Err(Error::Config(format!(
                "lr_drop_epoch {} must be below total_epochs {}",
                self.lr_drop_epoch, self.total_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if !(self.lr0 > 0.0) || !(self.drop_factor > 0.0) {
            return Err(Error::Config("lr0 and drop_factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() || seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty and distinct".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside [0, {})",
                self.total_epochs
            )));
        }
        Ok(if epoch < self.lr_drop_epoch {
            self.lr0
        } else {
            self.lr0 / self.drop_factor
        })
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Optimizer steps one run performs on `n_clips` clips.
    pub fn steps_per_run(&self, n_clips: usize) -> usize {
        self.total_epochs * batch_bounds(n_clips, self.batch_size).len()
    }
}

/// The 100-epoch schedule: 0.001 before epoch 80, 0.0001 from then on.
pub fn lr_schedule(epoch: usize) -> Result<f64> {
    TrainConfig::paper().lr(epoch)
}

/// `[start, end)` ranges of the batches of one epoch. A trailing batch of a
/// single clip is dropped since batch norm needs two samples.
pub fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|s| (s, (s + batch_size).min(n)))
        .filter(|(s, e)| e - s >= 2)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `theta` at step `t ≥ 1`.
pub fn adam_step(
    name: &str,
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step counter starts at 1"));
    }
    if theta.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::shape(format!(
            "parameter {name}: {} values, {} gradients, state {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of parameter {name}"),
        });
    }
    let bc1 = 1.0 - hyper.beta1.powf(t as f64);
    let bc2 = 1.0 - hyper.beta2.powf(t as f64);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + hyper.eps);
    }
    Ok(())
}

/// Adam over the trainable entries of a [`Parameters`] set.
#[derive(Debug, Clone)]
pub struct Adam {
    hyper: AdamHyper,
    states: Vec<Option<AdamState>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &Parameters, hyper: AdamHyper) -> Self {
        let states = params
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| AdamState::new(e.tensor.len())))
            .collect();
        Self { hyper, states, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` is indexed like the parameter entries;
    /// every gradient is checked before any parameter moves.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of parameter {}", e.name),
                    });
                }
            }
        }
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), Some(state)) = (g, self.states[i].as_mut()) else {
                continue;
            };
            let name = params.entry(i).name.clone();
            adam_step(&name, params.tensor_mut(i).data_mut(), g, state, lr, self.hyper, self.t)?;
        }
        Ok(())
    }
}

/// Full-clip features and labels of an evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub features: Vec<MelSpectrogram>,
    pub labels: LabelMatrix,
}

impl EvalSet {
    pub fn from_split(split: &LoadedSplit, extractor: &FeatureExtractor) -> Result<Self> {
        let features = split
            .waveforms
            .iter()
            .map(|w| clip_features(extractor, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            labels: split.labels.clone(),
        })
    }

    pub fn scores(&self, model: &TaggerModel) -> Result<ScoreMatrix> {
        let mut data = Vec::with_capacity(self.features.len() * N_CLASSES);
        for f in &self.features {
            data.extend(model.predict_features(f)?);
        }
        ScoreMatrix::new(self.features.len(), data)
    }

    pub fn evaluate(&self, model: &TaggerModel, vocab: &TagVocabulary) -> Result<EvalReport> {
        evaluate(&self.scores(model)?, &self.labels, vocab)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub model: TaggerModel,
    /// Mean training BCE per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: u64,
    pub report: Option<EvalReport>,
}

struct SnippetSource<'a> {
    split: &'a LoadedSplit,
    extractor: &'a FeatureExtractor,
    seed: u64,
    policy: SnippetPolicy,
    fixed: Vec<Option<MelSpectrogram>>,
}

impl SnippetSource<'_> {
    fn compute(&self, epoch: usize, clip: usize) -> Result<MelSpectrogram> {
        let draw_epoch = match self.policy {
            SnippetPolicy::PerEpoch => epoch,
            SnippetPolicy::Fixed => 0,
        };
        let mut rng = stream_rng(self.seed, Stream::Snippet, epoch_clip_sub(draw_epoch, clip));
        let snippet = dsp::extract_snippet(&self.split.waveforms[clip], SNIPPET_SECONDS, &mut rng)?;
        self.extractor.compute(&snippet)
    }

    fn batch(&self, epoch: usize, clips: &[usize]) -> Result<Vec<MelSpectrogram>> {
        clips
            .iter()
            .map(|&c| match &self.fixed[c] {
                Some(f) => Ok(f.clone()),
                None => self.compute(epoch, c),
            })
            .collect()
    }

    fn remember(&mut self, clips: &[usize], features: &[MelSpectrogram]) {
        if self.policy == SnippetPolicy::Fixed {
            for (&c, f) in clips.iter().zip(features) {
                self.fixed[c].get_or_insert_with(|| f.clone());
            }
        }
    }
}

fn label_batch(labels: &LabelMatrix, clips: &[usize]) -> Result<Tensor> {
    let data = clips
        .iter()
        .flat_map(|&c| labels.row(c).iter().map(|&v| f64::from(v)))
        .collect();
    Tensor::new(vec![clips.len(), N_CLASSES], data)
}

/// Trains `model` on `train` for `config.total_epochs` epochs and, when
/// `test` is given, evaluates the final model on it.
pub fn train_run(
    train: &LoadedSplit,
    mut model: TaggerModel,
    config: &TrainConfig,
    seed: u64,
    test: Option<(&EvalSet, &TagVocabulary)>,
) -> Result<RunResult> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 clips, got {}",
            train.len()
        )));
    }
    let extractor = FeatureExtractor::new();
    let mut source = SnippetSource {
        split: train,
        extractor: &extractor,
        seed,
        policy: config.snippet_policy,
        fixed: vec![None; train.len()],
    };
    let mut adam = Adam::new(model.params(), config.adam());
    let bounds = batch_bounds(train.len(), config.batch_size);
    let mut loss_trace = Vec::with_capacity(config.total_epochs);
    model.set_mode(Mode::Train);

    for epoch in 0..config.total_epochs {
        let lr = config.lr(epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch as u64));
        let mut dropout_rng = stream_rng(seed, Stream::Dropout, epoch as u64);
        let (mut loss_sum, mut seen) = (0.0, 0usize);

        let mut pending = Some(source.batch(epoch, &order[bounds[0].0..bounds[0].1])?);
        for (b, &(start, end)) in bounds.iter().enumerate() {
            let clips = &order[start..end];
            let features = pending.take().expect("batch features prepared");
            source.remember(clips, &features);
            let next = bounds.get(b + 1).map(|&(s, e)| &order[s..e]);
            let step = |model: &mut TaggerModel, adam: &mut Adam, rng: &mut _| {
                train_step(model, adam, &features, &label_batch(&train.labels, clips)?, lr, rng)
            };
            let loss = match next {
                Some(next) if !config.strict_deterministic => {
                    let src = &source;
                    std::thread::scope(|s| {
                        let prefetch = s.spawn(move || src.batch(epoch, next));
                        let loss = step(&mut model, &mut adam, &mut dropout_rng);
                        pending = Some(prefetch.join().expect("prefetch thread panicked")?);
                        loss
                    })
                }
                Some(next) => {
                    let loss = step(&mut model, &mut adam, &mut dropout_rng);
                    pending = Some(source.batch(epoch, next)?);
                    loss
                }
                None => step(&mut model, &mut adam, &mut dropout_rng),
            };
            let loss = loss.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (epoch {epoch}, batch {b})"),
                },
                e => e,
            })?;
            loss_sum += loss * clips.len() as f64;
            seen += clips.len();
        }
        loss_trace.push(loss_sum / seen as f64);
    }

    model.set_mode(Mode::Eval);
    let report = test.map(|(set, vocab)| set.evaluate(&model, vocab)).transpose()?;
    Ok(RunResult {
        seed,
        model,
        loss_trace,
        steps: adam.steps(),
        report,
    })
}

fn train_step<R: rand::Rng>(
    model: &mut TaggerModel,
    adam: &mut Adam,
    features: &[MelSpectrogram],
    targets: &Tensor,
    lr: f64,
    dropout_rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(features_to_batch(features)?);
    let pass = model.forward_graph(&mut g, x, dropout_rng)?;
    let loss = g.bce_loss(pass.output, targets)?;
    let value = g.value(loss).item().ok_or_else(|| Error::shape("loss is not a scalar"))?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss".into(),
        });
    }
    g.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = pass
        .param_vars
        .iter()
        .map(|v| v.and_then(|v| g.take_grad(v)))
        .collect();
    adam.step(model.params_mut(), &grads, lr)?;
    model.commit_bn_stats(&pass);
    Ok(value)
}

/// Outcome of a multi-seed suite; failed runs are kept with their error.
#[derive(Debug)]
pub struct SuiteResult {
    pub runs: Vec<RunResult>,
    pub failures: Vec<(u64, Error)>,
}

impl SuiteResult {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn reports(&self) -> Vec<EvalReport> {
        self.runs.iter().filter_map(|r| r.report.clone()).collect()
    }
}

/// One independent run per seed; each run's weights are initialised from
/// its own seed.
pub fn run_suite(
    train: &LoadedSplit,
    tagger: &TaggerConfig,
    config: &TrainConfig,
    test: Option<(&EvalSet, &TagVocabulary)>,
) -> Result<SuiteResult> {
    config.validate()?;
    let mut suite = SuiteResult {
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for &seed in &config.seeds {
        let outcome = TaggerModel::build(tagger.clone(), seed).and_then(|m| train_run(train, m, config, seed, test));
        match outcome {
            Ok(run) => suite.runs.push(run),
            Err(e) => suite.failures.push((seed, e)),
        }
    }
    Ok(suite)
}

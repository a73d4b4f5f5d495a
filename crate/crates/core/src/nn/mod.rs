//! Minimal dense-tensor library with reverse-mode autodiff and the layer set
//! the tagger is built from. Double precision throughout.

mod graph;
pub mod kernels;
mod params;
mod tensor;

use rand::Rng;

use crate::error::{Error, Result};

pub use graph::{bce, sigmoid, BatchStats, ConvAlgo, Graph, NormStats, Var, BCE_EPS};
pub use kernels::{avgpool2d, conv2d_direct, conv2d_im2col, global_avg_pool};
pub use params::{ParamEntry, Parameters};
pub use tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
    Sigmoid,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be positive in {self:?}")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::BatchNorm { channels } => positive("channels", channels),
            LayerSpec::AvgPool { size } => positive("size", size),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                positive("in_features", in_features)?;
                positive("out_features", out_features)
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Sigmoid => Ok(()),
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        update_running(&mut self.running_mean, &stats.mean, self.momentum);
        update_running(&mut self.running_var, &stats.var, self.momentum);
    }
}

fn update_running(running: &mut [f64], batch: &[f64], momentum: f64) {
    running
        .iter_mut()
        .zip(batch)
        .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
}

/// Stand-alone batch-norm forward. Train mode normalises with batch
/// statistics and folds them into `state`; eval mode uses `state`.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gv = g.input(Tensor::from_slice(&[gamma.len()], gamma)?);
    let bv = g.input(Tensor::from_slice(&[beta.len()], beta)?);
    let stats = match mode {
        Mode::Train => NormStats::Batch,
        Mode::Eval => NormStats::Running {
            mean: &state.running_mean,
            var: &state.running_var,
        },
    };
    let (y, batch) = g.batchnorm(xv, gv, bv, stats, state.eps)?;
    if let Some(b) = batch {
        state.update(&b);
    }
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
enum Slots {
    None,
    Conv { weight: usize, bias: usize },
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Dense { weight: usize, bias: usize },
}

/// Sequential stack of [`LayerSpec`]s with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    slots: Vec<Slots>,
    params: Parameters,
}

/// Result of recording one forward pass on a [`Graph`].
#[derive(Debug)]
pub struct ForwardPass {
    pub output: Var,
    /// Graph leaf for every trainable parameter, indexed like
    /// [`Parameters::entries`]; `None` for non-trainable state.
    pub param_vars: Vec<Option<Var>>,
    /// Train-mode batch statistics per batch-norm layer index.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Network {
    /// He-uniform weights, zero biases, γ = 1, β = 0, running stats (0, 1).
    pub fn new<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut params = Parameters::new();
        let mut slots = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            let slot = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let w = he_uniform(
                        &[out_channels, in_channels, kernel, kernel],
                        in_channels * kernel * kernel,
                        rng,
                    );
                    Slots::Conv {
                        weight: params.push(format!("{i:02}.conv.weight"), w, true),
                        bias: params.push(format!("{i:02}.conv.bias"), Tensor::zeros(&[out_channels]), true),
                    }
                }
                LayerSpec::BatchNorm { channels } => Slots::BatchNorm {
                    gamma: params.push(format!("{i:02}.bn.gamma"), Tensor::full(&[channels], 1.0), true),
                    beta: params.push(format!("{i:02}.bn.beta"), Tensor::zeros(&[channels]), true),
                    mean: params.push(format!("{i:02}.bn.running_mean"), Tensor::zeros(&[channels]), false),
                    var: params.push(format!("{i:02}.bn.running_var"), Tensor::full(&[channels], 1.0), false),
                },
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    let w = he_uniform(&[out_features, in_features], in_features, rng);
                    Slots::Dense {
                        weight: params.push(format!("{i:02}.dense.weight"), w, true),
                        bias: params.push(format!("{i:02}.dense.bias"), Tensor::zeros(&[out_features]), true),
                    }
                }
                _ => Slots::None,
            };
            slots.push(slot);
        }
        Ok(Self { layers, slots, params })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Records a forward pass of `x` on `g`. Parameters enter the graph as
    /// gradient-carrying leaves; the network itself is not modified.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let mut param_vars = vec![None; self.params.len()];
        let mut leaf = |g: &mut Graph, idx: usize| {
            let v = g.param(self.params.entry(idx).tensor.clone());
            param_vars[idx] = Some(v);
            v
        };
        let mut bn_stats = Vec::new();
        let mut h = x;
        for (i, (layer, slot)) in self.layers.iter().zip(&self.slots).enumerate() {
            h = match (layer, slot) {
                (LayerSpec::Conv { stride, padding, .. }, Slots::Conv { weight, bias }) => {
                    let (w, b) = (leaf(g, *weight), leaf(g, *bias));
                    g.conv2d(h, w, b, *padding, *stride)?
                }
                (LayerSpec::BatchNorm { .. }, Slots::BatchNorm { gamma, beta, mean, var }) => {
                    let (gv, bv) = (leaf(g, *gamma), leaf(g, *beta));
                    let stats = match mode {
                        Mode::Train => NormStats::Batch,
                        Mode::Eval => NormStats::Running {
                            mean: self.params.entry(*mean).tensor.data(),
                            var: self.params.entry(*var).tensor.data(),
                        },
                    };
                    let (y, batch) = g.batchnorm(h, gv, bv, stats, BN_EPS)?;
                    if let Some(b) = batch {
                        bn_stats.push((i, b));
                    }
                    y
                }
                (LayerSpec::Relu, _) => g.relu(h),
                (LayerSpec::AvgPool { size }, _) => g.avgpool2d(h, *size)?,
                (LayerSpec::GlobalAvgPool, _) => g.global_avg_pool(h)?,
                (LayerSpec::Dense { .. }, Slots::Dense { weight, bias }) => {
                    let (w, b) = (leaf(g, *weight), leaf(g, *bias));
                    g.dense(h, w, b)?
                }
                (LayerSpec::Dropout { rate }, _) => g.dropout(h, *rate, mode == Mode::Train, rng)?,
                (LayerSpec::Sigmoid, _) => g.sigmoid(h),
                (layer, slot) => unreachable!("layer {layer:?} paired with {slot:?}"),
            };
        }
        Ok(ForwardPass {
            output: h,
            param_vars,
            bn_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            if let Slots::BatchNorm { mean, var, .. } = self.slots[*layer] {
                update_running(self.params.tensor_mut(mean).data_mut(), &s.mean, BN_MOMENTUM);
                update_running(self.params.tensor_mut(var).data_mut(), &s.var, BN_MOMENTUM);
            }
        }
    }

    /// Eval-mode forward without recording gradients.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let pass = self.forward(&mut g, xv, Mode::Eval, &mut no_rng)?;
        Ok(g.value(pass.output).clone())
    }
}

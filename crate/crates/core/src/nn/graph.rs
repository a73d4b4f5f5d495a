//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward sweep. Nodes are created in topological order, so
//! [`Graph::backward`] walks the tape once in reverse. Gradients are only
//! computed for nodes that (transitively) depend on a leaf created with
//! `requires_grad`.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution implementation used by [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

/// Whether batch norm uses batch statistics or stored running statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, used for the running estimate.
    pub var: Vec<f64>,
}

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    AvgPool {
        x: Var,
        size: usize,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sigmoid(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Dot {
        x: Var,
        coeffs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    conv_algo: ConvAlgo,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_conv_algo(conv_algo: ConvAlgo) -> Self {
        Self {
            conv_algo,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0)?.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes.get_mut(v.0)?.grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize, stride: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let y = match self.conv_algo {
            ConvAlgo::Direct => kernels::conv2d_direct(xv, kv, bv, padding, stride)?,
            ConvAlgo::Im2col => kernels::conv2d_im2col(xv, kv, bv, padding, stride)?,
        };
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
                stride,
            },
            &[x, kernel, bias],
        ))
    }

    /// Batch normalisation over all non-channel axes of an `N×C×…` tensor.
    /// Train mode also returns the batch statistics for the running update.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, c, plane) = kernels::channel_dims(xv)?;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape(format!(
                "batch norm over {c} channels got gamma {:?} and beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let count = n * plane;
        let xd = xv.data();
        let chan = |ci: usize| {
            (0..n).flat_map(move |ni| {
                let start = (ni * c + ci) * plane;
                start..start + plane
            })
        };
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(Error::invalid(format!(
                        "train-mode batch norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let m = chan(ci).map(|i| xd[i]).sum::<f64>() / count as f64;
                    let v = chan(ci).map(|i| (xd[i] - m).powi(2)).sum::<f64>() / count as f64;
                    mean[ci] = m;
                    var[ci] = v;
                }
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                let batch = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(batch))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(format!(
                        "running statistics have {} / {} entries for {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for ci in 0..c {
            for i in chan(ci) {
                xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                y[i] = gv[ci] * xhat[i] + bv[ci];
            }
        }
        let shape = xv.shape().to_vec();
        let v = self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: batch.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok((v, batch))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let y = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn avgpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let y = kernels::avgpool2d(self.value(x), size)?;
        Ok(self.push(y, Op::AvgPool { x, size }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x), &[x]))
    }

    /// `y = x·Wᵀ + b` for `x: N×F`, `W: O×F`, `b: O`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (o, wf) = self.value(weight).dims2()?;
        if wf != f || self.value(bias).shape() != [o] {
            return Err(Error::shape(format!(
                "dense input {:?} vs weight {:?} and bias {:?}",
                self.value(x).shape(),
                self.value(weight).shape(),
                self.value(bias).shape()
            )));
        }
        let mut y: Vec<f64> = (0..n).flat_map(|_| self.value(bias).data().iter().copied()).collect();
        kernels::gemm(
            n,
            f,
            o,
            self.value(x).data(),
            (f, 1),
            self.value(weight).data(),
            (1, f),
            1.0,
            &mut y,
            (o, 1),
        );
        Ok(self.push(Tensor::new(vec![n, o], y)?, Op::Dense { x, weight, bias }, &[x, weight, bias]))
    }

    /// Inverted dropout: zeroes each unit with probability `rate` and scales
    /// survivors by `1/(1−rate)`. With `train == false` this is the identity
    /// and `x` is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let y = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(y, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let y = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `target`,
    /// with `p` clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "predictions {:?} vs targets {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let loss = bce(pv.data(), target.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            &[p],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.data().iter().map(|v| v * v).collect();
        let y = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        self.push(y, Op::Square(x), &[x])
    }

    /// `Σ xᵢ·cᵢ` against fixed coefficients.
    pub fn dot(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != coeffs.len() {
            return Err(Error::shape(format!(
                "dot of {} values with {} coefficients",
                xv.len(),
                coeffs.len()
            )));
        }
        let s = xv.data().iter().zip(coeffs).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                coeffs: coeffs.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from scalar `loss`, filling gradient slots. The graph is
    /// consumed; call [`Graph::reset`] before recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("graph already consumed by backward; reset it first".into()));
        }
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Usage("backward on a variable that was never recorded".into()));
        };
        if matches!(node.op, Op::Leaf) {
            return Err(Error::Usage("backward called before any forward op was recorded".into()));
        }
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &dy)?;
            self.nodes[i].grad = Some(dy);
        }
        self.consumed = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut self.nodes[v.0].grad;
        match slot {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) -> Result<()> {
        // Ops with parents borrow their saved state immutably; gradient
        // contributions are collected first, then accumulated.
        let mut contributions: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
                stride,
            } => {
                let (xv, kv, bv) = (self.value(*x), self.value(*kernel), self.value(*bias));
                let g = ConvGeom::new(xv, kv, bv, *padding, *stride)?;
                let (dx, dk, db) = kernels::conv2d_backward(&g, xv.data(), kv.data(), dy, self.needs(*x));
                if let Some(dx) = dx {
                    contributions.push((*x, dx));
                }
                contributions.push((*kernel, dk));
                contributions.push((*bias, db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, plane) = kernels::channel_dims(self.value(*x))?;
                let gv = self.value(*gamma).data();
                let count = (n * plane) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for ci in 0..c {
                    let idx = (0..n).flat_map(|ni| {
                        let s = (ni * c + ci) * plane;
                        s..s + plane
                    });
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                    for j in idx.clone() {
                        sum_dy += dy[j];
                        sum_dy_xhat += dy[j] * xhat[j];
                    }
                    dgamma[ci] = sum_dy_xhat;
                    dbeta[ci] = sum_dy;
                    let scale = gv[ci] * inv_std[ci];
                    if *batch_stats {
                        for j in idx {
                            dx[j] = scale * (dy[j] - sum_dy / count - xhat[j] * sum_dy_xhat / count);
                        }
                    } else {
                        for j in idx {
                            dx[j] = scale * dy[j];
                        }
                    }
                }
                contributions.push((*x, dx));
                contributions.push((*gamma, dgamma));
                contributions.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = xd.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                contributions.push((*x, dx));
            }
            Op::AvgPool { x, size } => {
                let dx = kernels::avgpool2d_backward(self.value(*x).shape(), *size, dy);
                contributions.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
                    .collect();
                contributions.push((*x, dx));
            }
            Op::Dense { x, weight, bias } => {
                let (n, f) = self.value(*x).dims2()?;
                let (o, _) = self.value(*weight).dims2()?;
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, o, f, dy, (o, 1), self.value(*weight).data(), (f, 1), 0.0, &mut dx, (f, 1));
                    contributions.push((*x, dx));
                }
                let mut dw = vec![0.0; o * f];
                kernels::gemm(o, n, f, dy, (1, o), self.value(*x).data(), (f, 1), 0.0, &mut dw, (f, 1));
                let mut db = vec![0.0; o];
                for row in dy.chunks_exact(o) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                contributions.push((*weight, dw));
                contributions.push((*bias, db));
            }
            Op::Dropout { x, mask } => {
                contributions.push((*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                contributions.push((*x, y.iter().zip(dy).map(|(s, g)| g * s * (1.0 - s)).collect()));
            }
            Op::Bce { p, target } => {
                let pd = self.value(*p).data();
                let scale = dy[0] / pd.len() as f64;
                let dp = pd
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                contributions.push((*p, dp));
            }
            Op::Sum(x) => contributions.push((*x, vec![dy[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let len = self.value(*x).len();
                contributions.push((*x, vec![dy[0] / len as f64; len]));
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                contributions.push((*x, xd.iter().zip(dy).map(|(v, g)| 2.0 * v * g).collect()));
            }
            Op::Dot { x, coeffs } => {
                contributions.push((*x, coeffs.iter().map(|c| c * dy[0]).collect()));
            }
        }
        for (v, g) in contributions {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probability clamping at `1e-7`.
pub fn bce(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_misuse_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
        g.reset();
        assert!(matches!(g.backward(Var(5)), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3.0, 4.0]));
        let w = g.param(t(&[2], &[1.0, 1.0]));
        let sx = g.sum(x);
        let sq = g.square(w);
        let sw = g.sum(sq);
        g.backward(sw).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
        assert!(g.grad(x).is_none());
        assert!(g.grad(sx).is_none());
    }

    #[test]
    fn sigmoid_and_bce_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((bce(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&[1.0], &[1.0]) <= -(1.0 - 1e-7f64).ln() + 1e-18);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[-2.0, 3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, y);
        assert!(g.dropout(x, 1.0, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn bce_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.input(t(&[2], &[0.5, 0.5]));
        assert!(matches!(g.bce_loss(p, &t(&[3], &[0.0; 3])), Err(Error::Shape(_))));
    }
}

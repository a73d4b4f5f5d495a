#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagnoise::dataset::{ClipRecord, CorpusSpec, Manifest, Source, SplitRole, N_CLASSES};
use tagnoise::nn::{ConvAlgo, Graph, Mode, NormStats, Tensor, Var};
use tagnoise::rng::{stream_rng, Stream};
use tagnoise::tagger::{TaggerConfig, TaggerModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A corpus small enough to train on in seconds.
pub fn tiny_spec(curated: usize, noisy: usize, test: usize) -> CorpusSpec {
    CorpusSpec {
        curated_per_class: curated,
        noisy_per_class: noisy,
        test_per_class: test,
        max_duration_s: 4.0,
        ..CorpusSpec::desk()
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `n` training clips with 1 to 3 random tags each.
pub fn random_manifest(n: usize, rng: &mut impl Rng) -> Manifest {
    let records = (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=3);
            let mut tags = BTreeSet::new();
            while tags.len() < k {
                tags.insert(rng.gen_range(0..N_CLASSES));
            }
            ClipRecord {
                id: format!("clip{i:04}"),
                audio_ref: format!("audio/{i}.wav"),
                tags,
                source: Source::Curated,
            }
        })
        .collect();
    Manifest::new(records, SplitRole::Train).unwrap()
}

// ---- metric oracles -------------------------------------------------------

/// Precision at each positive's rank, ranks counted by exhaustive comparison.
pub fn brute_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// Fraction of positive/negative pairs ordered correctly, ties counting ½.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                den += 1.0;
                num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Score/label vector of length 1..=8; scores come from a coarse grid half
/// the time so ties are common.
pub fn fuzz_case(rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(1..=8);
    let coarse = rng.gen_bool(0.5);
    let scores = (0..n)
        .map(|_| if coarse { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen::<f64>() })
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
    (scores, labels)
}

// ---- reference Adam -------------------------------------------------------

/// Textbook Adam, one scalar at a time, written without the library's
/// helper types.
pub struct RefAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - self.b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.b2.powi(self.t));
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---- finite differences ---------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor so gradients near zero are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, FD_FLOOR)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds `f(inputs)` as a graph with every input a gradient leaf and
/// reduces its output to a scalar through fixed random coefficients.
pub struct GradCase<F> {
    pub build: F,
    pub inputs: Vec<Tensor>,
    pub algo: ConvAlgo,
}

impl<F: Fn(&mut Graph, &[Var]) -> Var> GradCase<F> {
    pub fn new(build: F, inputs: Vec<Tensor>) -> Self {
        Self {
            build,
            inputs,
            algo: ConvAlgo::default(),
        }
    }

    pub fn with_algo(mut self, algo: ConvAlgo) -> Self {
        self.algo = algo;
        self
    }

    fn eval(&self, inputs: &[Tensor], coeffs: &[f64]) -> f64 {
        let mut g = Graph::with_conv_algo(self.algo);
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        if g.value(out).len() == 1 {
            return g.value(out).data()[0];
        }
        let s = g.dot(out, coeffs).unwrap();
        g.value(s).data()[0]
    }

    /// Largest relative error over every coordinate of every input.
    pub fn max_rel_err(&self) -> f64 {
        let mut g = Graph::with_conv_algo(self.algo);
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        let n_out = g.value(out).len();
        let coeffs: Vec<f64> = {
            let mut r = rng(99);
            (0..n_out).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        let loss = if n_out == 1 { out } else { g.dot(out, &coeffs).unwrap() };
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let mut worst: f64 = 0.0;
        for (i, t) in self.inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = self.inputs.clone();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = self.inputs.clone();
                minus[i].data_mut()[j] -= FD_STEP;
                let numeric = (self.eval(&plus, &coeffs) - self.eval(&minus, &coeffs)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[i][j], numeric));
            }
        }
        worst
    }
}

/// Largest relative error of every layer type, each checked on all
/// coordinates of all its inputs.
pub fn layer_grad_errors() -> Vec<(String, f64)> {
    let mut r = rng(1);
    let mut out = Vec::new();
    for (pad, stride) in [(0, 1), (1, 1), (1, 2), (2, 3)] {
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let x = random_tensor(&[2, 2, 5, 6], &mut r);
            let k = random_tensor(&[3, 2, 3, 3], &mut r);
            let b = random_tensor(&[3], &mut r);
            let err = GradCase::new(move |g, v| g.conv2d(v[0], v[1], v[2], pad, stride).unwrap(), vec![x, k, b])
                .with_algo(algo)
                .max_rel_err();
            out.push((format!("conv {algo:?} pad {pad} stride {stride}"), err));
        }
    }

    let x = random_tensor(&[3, 2, 2, 3], &mut r);
    let gamma = random_tensor(&[2], &mut r);
    let beta = random_tensor(&[2], &mut r);
    let bn = vec![x, gamma, beta];
    let err = GradCase::new(
        |g, v| g.batchnorm(v[0], v[1], v[2], NormStats::Batch, 1e-5).unwrap().0,
        bn.clone(),
    )
    .max_rel_err();
    out.push(("batchnorm (batch statistics)".into(), err));
    let (mean, var) = ([0.2, -0.1], [1.5, 0.7]);
    let err = GradCase::new(
        move |g, v| {
            let stats = NormStats::Running { mean: &mean, var: &var };
            g.batchnorm(v[0], v[1], v[2], stats, 1e-5).unwrap().0
        },
        bn,
    )
    .max_rel_err();
    out.push(("batchnorm (running statistics)".into(), err));

    // keep inputs away from the ReLU kink
    let mut x = random_tensor(&[2, 2, 4, 5], &mut r);
    x.data_mut().iter_mut().filter(|v| v.abs() < 0.05).for_each(|v| *v += 0.1);
    let one = vec![x];
    out.push(("relu".into(), GradCase::new(|g, v| g.relu(v[0]), one.clone()).max_rel_err()));
    out.push((
        "average pool".into(),
        GradCase::new(|g, v| g.avgpool2d(v[0], 2).unwrap(), one.clone()).max_rel_err(),
    ));
    out.push((
        "global average pool".into(),
        GradCase::new(|g, v| g.global_avg_pool(v[0]).unwrap(), one.clone()).max_rel_err(),
    ));
    out.push(("sigmoid".into(), GradCase::new(|g, v| g.sigmoid(v[0]), one.clone()).max_rel_err()));
    let err = GradCase::new(
        |g, v| {
            let mut mask_rng = stream_rng(4, Stream::Dropout, 0);
            g.dropout(v[0], 0.3, true, &mut mask_rng).unwrap()
        },
        one,
    )
    .max_rel_err();
    out.push(("dropout (fixed mask)".into(), err));

    let x = random_tensor(&[3, 5], &mut r);
    let w = random_tensor(&[4, 5], &mut r);
    let b = random_tensor(&[4], &mut r);
    out.push((
        "dense".into(),
        GradCase::new(|g, v| g.dense(v[0], v[1], v[2]).unwrap(), vec![x, w, b]).max_rel_err(),
    ));
    let logits = random_tensor(&[3, 4], &mut r);
    let target = Tensor::new(vec![3, 4], (0..12).map(|i| f64::from(u8::from(i % 3 == 0))).collect()).unwrap();
    let err = GradCase::new(
        move |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce_loss(p, &target).unwrap()
        },
        vec![logits],
    )
    .max_rel_err();
    out.push(("sigmoid + binary cross-entropy".into(), err));
    out
}

/// The wide network has ReLU kinks within 1e-5 of some inputs, so it is
/// probed with a smaller step.
pub const WIDE_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TaggerGradCheck {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

/// Finite-difference check of a whole tagger in train mode with a fixed
/// dropout mask and BCE loss. Tensors up to `per_tensor.max(64)` values are
/// checked at every coordinate, larger ones at `per_tensor` random
/// coordinates. The comparison floor is scaled with the step so rounding
/// noise on zero gradients stays below tolerance.
pub fn tagger_grad_check(config: TaggerConfig, per_tensor: usize, step: f64) -> TaggerGradCheck {
    let mut model = TaggerModel::build(config, 17).unwrap();
    model.set_mode(Mode::Train);
    let mut r = rng(5);
    let x = random_tensor(&[2, 1, 8, 96], &mut r);
    let target = Tensor::new(vec![2, 12], (0..24).map(|i| f64::from(u8::from(i % 5 == 0))).collect()).unwrap();
    let loss_of = |m: &TaggerModel| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let pass = m.forward_graph(&mut g, xv, &mut stream_rng(8, Stream::Dropout, 0)).unwrap();
        let loss = g.bce_loss(pass.output, &target).unwrap();
        (g, pass, loss)
    };
    let (mut g, pass, loss) = loss_of(&model);
    g.backward(loss).unwrap();
    let floor = FD_FLOOR * FD_STEP / step;
    let mut check = TaggerGradCheck {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    for (idx, var) in pass.param_vars.iter().enumerate() {
        let Some(var) = var else { continue };
        let analytic = g.grad(*var).unwrap().to_vec();
        let len = analytic.len();
        let coords: Vec<usize> = if len <= per_tensor.max(64) {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| r.gen_range(0..len)).collect()
        };
        for j in coords {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().tensor_mut(idx).data_mut()[j] += delta;
                let (g, _, loss) = loss_of(&m);
                g.value(loss).data()[0]
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let e = rel_err_floor(analytic[j], numeric, floor);
            check.checked += 1;
            if e >= check.worst {
                check.worst = e;
                check.at = format!("{}[{j}]", model.params().entry(idx).name);
            }
        }
    }
    check
}

// ---- files ----------------------------------------------------------------

/// Relative path → bytes for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

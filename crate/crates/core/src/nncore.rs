//! Small trainable pieces: embeddings, a linear layer, softmax/sigmoid,
//! inverted dropout, Adam, a BCE training loop and finite-difference
//! gradient checks.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab: BTreeMap<String, usize>,
    pub d: usize,
    /// Row-major `|V| x d`.
    pub matrix: Vec<f64>,
}

impl EmbeddingTable {
    /// Row 0 is the shared unknown-token row. Rows are uniform in
    /// [-0.05, 0.05].
    pub fn new<I, S>(tokens: I, d: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = BTreeMap::new();
        vocab.insert(UNK.to_string(), 0);
        let mut sorted: Vec<String> = tokens.into_iter().map(Into::into).collect();
        sorted.sort();
        sorted.dedup();
        for t in sorted {
            let next = vocab.len();
            vocab.entry(t).or_insert(next);
        }
        let mut r = rng::stream(seed, "embeddings", 0);
        let matrix = (0..vocab.len() * d).map(|_| r.gen_range(-0.05..=0.05)).collect();
        EmbeddingTable { vocab, d, matrix }
    }

    pub fn index(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(0)
    }

    pub fn row(&self, token: &str) -> &[f64] {
        let i = self.index(token);
        &self.matrix[i * self.d..(i + 1) * self.d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.len() != self.vocab.len() * self.d {
            return Err(Error::Dimension { expected: self.vocab.len() * self.d, got: self.matrix.len() });
        }
        let mut rows: Vec<usize> = self.vocab.values().copied().collect();
        rows.sort_unstable();
        if rows.iter().enumerate().any(|(i, &r)| i != r) {
            return Err(Error::validation("embeddings", "vocab rows are not a permutation"));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embeddings", "non-finite entry"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_in x d_out`: `weights[i * d_out + j]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearLayer { d_in, d_out, weights: vec![0.0; d_in * d_out], bias: vec![0.0; d_out] }
    }

    pub fn random(d_in: usize, d_out: usize, scale: f64, r: &mut impl Rng) -> Self {
        let weights = (0..d_in * d_out).map(|_| r.gen_range(-scale..=scale)).collect();
        LinearLayer { d_in, d_out, weights, bias: vec![0.0; d_out] }
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.d_in {
            return Err(Error::Dimension { expected: self.d_in, got: input.len() });
        }
        let mut out = self.bias.clone();
        for (i, &x) in input.iter().enumerate() {
            let row = &self.weights[i * self.d_out..(i + 1) * self.d_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.d_in * self.d_out {
            return Err(Error::Dimension { expected: self.d_in * self.d_out, got: self.weights.len() });
        }
        if self.bias.len() != self.d_out {
            return Err(Error::Dimension { expected: self.d_out, got: self.bias.len() });
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("linear layer", "non-finite parameter"));
        }
        Ok(())
    }

    /// Scalar output of a `d_out == 1` layer, without shape allocation.
    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        if self.d_out != 1 {
            return Err(Error::Dimension { expected: 1, got: self.d_out });
        }
        if input.len() != self.d_in {
            return Err(Error::Dimension { expected: self.d_in, got: input.len() });
        }
        Ok(self.bias[0] + input.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>())
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn get(&self, k: usize) -> f64 {
        if k < self.weights.len() {
            self.weights[k]
        } else {
            self.bias[k - self.weights.len()]
        }
    }

    fn set(&mut self, k: usize, v: f64) {
        if k < self.weights.len() {
            self.weights[k] = v;
        } else {
            let n = self.weights.len();
            self.bias[k - n] = v;
        }
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

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Binary cross-entropy of a logit against a 0/1 label, computed as
/// `softplus(z) - y z` for stability.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

/// Inverted dropout mask: kept entries are scaled by `1 / (1 - rate)`.
pub fn dropout_mask(r: &mut impl Rng, rate: f64, n: usize) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    if rate >= 1.0 {
        return vec![0.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if r.gen_bool(rate) { 0.0 } else { keep }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            weight_decay: 0.01,
            batch_size: 4,
            max_epochs: 10,
            dropout_rate: 0.1,
            seed: 0,
            early_stop_patience: 3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1]", self.dropout_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay on the weights (not the bias).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, layer: &mut LinearLayer, grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let n_w = layer.weights.len();
        for (k, &g) in grads.iter().enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let update = self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            let mut p = layer.get(k);
            if k < n_w {
                p -= self.lr * self.weight_decay * p;
            }
            layer.set(k, p - update);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Example {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Example { features, label }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    /// Mean training loss (inference mode) after each epoch.
    pub loss_history: Vec<f64>,
    pub val_history: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Mean BCE over a dataset with dropout off.
pub fn mean_loss(layer: &LinearLayer, data: &[Example]) -> Result<f64> {
    let mut sum = 0.0;
    for ex in data {
        sum += bce_with_logit(layer.logit(&ex.features)?, ex.label);
    }
    Ok(sum / data.len().max(1) as f64)
}

/// Gradient of the BCE loss of one example, accumulated into `grads`
/// (weights first, then bias).
fn accumulate_grad(layer: &LinearLayer, x: &[f64], y: f64, scale: f64, grads: &mut [f64]) -> Result<f64> {
    let z = layer.logit(x)?;
    let dz = (sigmoid(z) - y) * scale;
    for (g, xi) in grads.iter_mut().zip(x) {
        *g += dz * xi;
    }
    grads[layer.weights.len()] += dz;
    Ok(bce_with_logit(z, y))
}

/// Trains a single-output linear layer under sigmoid + BCE. Returns the
/// parameters of the best epoch (by validation loss when `val` is given,
/// else by training loss; the initial parameters count as epoch 0).
pub fn fit(
    layer: &mut LinearLayer,
    data: &[Example],
    val: Option<&[Example]>,
    loss: Loss,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    let Loss::BinaryCrossEntropy = loss;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if layer.d_out != 1 {
        return Err(Error::Dimension { expected: 1, got: layer.d_out });
    }
    for ex in data.iter().chain(val.unwrap_or(&[])) {
        if ex.label != 0.0 && ex.label != 1.0 {
            return Err(Error::InvalidInput(format!("label {} not in {{0, 1}}", ex.label)));
        }
        if ex.features.len() != layer.d_in {
            return Err(Error::Dimension { expected: layer.d_in, got: ex.features.len() });
        }
    }
    let val = val.filter(|v| !v.is_empty());
    let initial_loss = mean_loss(layer, data)?;
    let mut report = FitReport { initial_loss, ..FitReport::default() };
    if cfg.max_epochs == 0 {
        return Ok(report);
    }
    let monitor = |l: &LinearLayer, train: f64| -> Result<f64> {
        match val {
            Some(v) => mean_loss(l, v),
            None => Ok(train),
        }
    };
    let mut best = (monitor(layer, initial_loss)?, layer.clone(), None);
    let mut since_best = 0;
    let mut r: ChaCha8Rng = rng::stream(cfg.seed, "fit", 0);
    let mut adam = Adam::new(layer.n_params(), cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = vec![0.0; layer.n_params()];
    let mut masked = vec![0.0; layer.d_in];
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut r);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &data[i];
                let mask = dropout_mask(&mut r, cfg.dropout_rate, layer.d_in);
                for ((m, x), k) in masked.iter_mut().zip(&ex.features).zip(&mask) {
                    *m = x * k;
                }
                let l = accumulate_grad(layer, &masked, ex.label, scale, &mut grads)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite { epoch, step });
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch, step });
            }
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(layer, &grads),
                OptimizerKind::Sgd => {
                    let n_w = layer.weights.len();
                    for (k, g) in grads.iter().enumerate() {
                        let mut p = layer.get(k);
                        if k < n_w {
                            p -= cfg.learning_rate * cfg.weight_decay * p;
                        }
                        layer.set(k, p - cfg.learning_rate * g);
                    }
                }
            }
        }
        let train = mean_loss(layer, data)?;
        if !train.is_finite() {
            return Err(Error::NonFinite { epoch, step: 0 });
        }
        report.loss_history.push(train);
        let watched = monitor(layer, train)?;
        if val.is_some() {
            report.val_history.push(watched);
        }
        if watched < best.0 {
            best = (watched, layer.clone(), Some(epoch + 1));
            since_best = 0;
        } else {
            since_best += 1;
            if val.is_some() && cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_epoch = best.2;
    *layer = best.1;
    Ok(report)
}

/// Max relative error between the analytic BCE gradient and a central
/// difference, over every parameter of a single-output layer.
pub fn grad_check(layer: &LinearLayer, x: &[f64], y: f64, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let mut analytic = vec![0.0; layer.n_params()];
    accumulate_grad(layer, x, y, 1.0, &mut analytic)?;
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidInput("non-finite analytic gradient".into()));
    }
    let mut probe = layer.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let p = layer.get(k);
        probe.set(k, p + epsilon);
        let up = bce_with_logit(probe.logit(x)?, y);
        probe.set(k, p - epsilon);
        let down = bce_with_logit(probe.logit(x)?, y);
        probe.set(k, p);
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Analytic gradient (weights then bias) of the BCE loss of one example.
pub fn bce_gradient(layer: &LinearLayer, x: &[f64], y: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; layer.n_params()];
    accumulate_grad(layer, x, y, 1.0, &mut g)?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named row-major tensors with a format version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint { version: 1, tensors: BTreeMap::new() }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.insert(name.to_string(), Tensor { shape, values });
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self.tensors.get(name).ok_or_else(|| Error::validation("checkpoint", format!("missing {name}")))?;
        if t.shape != shape {
            return Err(Error::validation("checkpoint", format!("{name}: shape {:?}, expected {shape:?}", t.shape)));
        }
        if t.values.len() != shape.iter().product::<usize>() {
            return Err(Error::validation("checkpoint", format!("{name}: value count does not match shape")));
        }
        Ok(&t.values)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape.as_slice())
    }

    pub fn insert_linear(&mut self, prefix: &str, layer: &LinearLayer) {
        self.insert(&format!("{prefix}.weights"), vec![layer.d_in, layer.d_out], layer.weights.clone());
        self.insert(&format!("{prefix}.bias"), vec![layer.d_out], layer.bias.clone());
    }

    pub fn linear(&self, prefix: &str) -> Result<LinearLayer> {
        let wname = format!("{prefix}.weights");
        let shape = self.shape(&wname).ok_or_else(|| Error::validation("checkpoint", format!("missing {wname}")))?;
        let [d_in, d_out] = shape else {
            return Err(Error::validation("checkpoint", format!("{wname} is not 2-d")));
        };
        let (d_in, d_out) = (*d_in, *d_out);
        let weights = self.get(&wname, &[d_in, d_out])?.to_vec();
        let bias = self.get(&format!("{prefix}.bias"), &[d_out])?.to_vec();
        let layer = LinearLayer { d_in, d_out, weights, bias };
        layer.validate()?;
        Ok(layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.version != 1 {
            return Err(Error::validation("checkpoint", format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }
}

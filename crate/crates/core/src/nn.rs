//! Fully-connected classifier with optional batch normalization, L1
//! regularization, fake quantization and pruning masks.
//!
//! Each hidden layer computes
//!
//! ```text
//! z = x · Q_w(W ⊙ mask)ᵀ + b
//! u = BN(z)                (optional)
//! y = Q_a(ReLU(u))         (Q_a optional)
//! ```
//!
//! and the output layer emits raw logits `x · Q_w(W ⊙ mask)ᵀ + b`; softmax
//! is fused into the cross-entropy loss. The total loss is
//! `L = L_c + λ Σ|w|` over unmasked dense weights.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quant::{fake_quant_weights, ActQuantCache, ActQuantizer, FakeQuantWeights, Precision, QuantSpec};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub use_bn: bool,
    pub l1_lambda: f64,
}

impl Default for MlpConfig {
    /// 16 → 64 → 32 → 32 → 5 with batch normalization and λ = 1e-4.
    fn default() -> Self {
        MlpConfig {
            input_dim: 16,
            hidden_widths: vec![64, 32, 32],
            output_dim: 5,
            use_bn: true,
            l1_lambda: 1e-4,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if !self.l1_lambda.is_finite() || self.l1_lambda < 0.0 {
            return Err(Error::config("l1_lambda must be a non-negative number"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_out x fan_in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub mask: Array2<bool>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.iter().filter(|&&keep| !keep).count()
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.pruned_count() as f64 / self.mask.len() as f64
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    /// Inference transform `γ (x − μ) / sqrt(σ² + ε) + β`.
    pub fn apply_eval(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        (&z - &self.running_mean) * &(&inv_std * &self.gamma) + &self.beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub dense: Dense,
    pub bn: Option<BatchNorm>,
    pub act_quant: Option<ActQuantizer>,
    /// Hidden layers apply ReLU; the output layer emits logits.
    pub hidden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    weights: FakeQuantWeights,
    bn: Option<BnCache>,
    /// Pre-normalization values, kept for eval-mode batch norm only.
    pre_bn: Option<Array2<f64>>,
    pre_act: Array2<f64>,
    act: Option<ActQuantCache>,
}

/// Result of a forward pass. Holds everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    /// Post-activation (post-quantization) output of every hidden layer.
    pub hidden: Vec<Array2<f64>>,
    mode: Mode,
    caches: Vec<LayerCache>,
}

impl ForwardPass {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// `L = L_c + λ Σ|w|`.
    pub total: f64,
    /// Mean softmax cross-entropy.
    pub classification: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
    pub log_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    /// Flattened in the same order as [`Model::parameters`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weights.iter());
            out.extend(g.bias.iter());
            if let (Some(gamma), Some(beta)) = (&g.gamma, &g.beta) {
                out.extend(gamma.iter());
                out.extend(beta.iter());
            }
            if let Some(s) = g.log_scale {
                out.push(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: MlpConfig,
    pub quant: QuantSpec,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// Build a model with weights drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// zero biases, identity batch normalization and all-true masks.
pub fn init_model(cfg: &MlpConfig, quant: &QuantSpec, seed: u64) -> Result<Model> {
    cfg.validate()?;
    quant.validate()?;
    let mut rng = rng_from_seed(seed);
    let dims = cfg.layer_dims();
    let last = dims.len() - 1;
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            let hidden = i < last;
            Layer {
                dense: Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                    mask: Array2::from_elem((fan_out, fan_in), true),
                },
                bn: (hidden && cfg.use_bn).then(|| BatchNorm::new(fan_out)),
                act_quant: match quant.act_precision(i) {
                    Precision::Int(n) if hidden => Some(ActQuantizer::new(n)),
                    _ => None,
                },
                hidden,
            }
        })
        .collect();
    Ok(Model {
        config: cfg.clone(),
        quant: quant.clone(),
        seed,
        layers,
    })
}

impl Model {
    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dense.weights.len()).collect()
    }

    pub fn total_weights(&self) -> usize {
        self.weight_counts().iter().sum()
    }

    pub fn pruned_weights(&self) -> usize {
        self.layers.iter().map(|l| l.dense.pruned_count()).sum()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned_weights() as f64 / self.total_weights() as f64
    }

    /// Zero the master value of every masked weight.
    pub fn apply_masks(&mut self) {
        for l in &mut self.layers {
            Zip::from(&mut l.dense.weights)
                .and(&l.dense.mask)
                .for_each(|w, &keep| {
                    if !keep {
                        *w = 0.0
                    }
                });
        }
    }

    /// `Σ|w|` over unmasked dense weights.
    pub fn l1_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                Zip::from(&l.dense.weights)
                    .and(&l.dense.mask)
                    .fold(0.0, |acc, &w, &keep| if keep { acc + w.abs() } else { acc })
            })
            .sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<ForwardPass> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, model expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        let rounding = self.quant.rounding;
        let mut current = x.to_owned();
        let mut hidden = Vec::new();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let d = &layer.dense;
            let weights = fake_quant_weights(
                d.weights.view(),
                d.mask.view(),
                self.quant.weight_precision(i),
                rounding,
            );
            let z = current.dot(&weights.values.t()) + &d.bias;
            let (u, bn, pre_bn) = match (&layer.bn, mode) {
                (None, _) => (z, None, None),
                (Some(bn), Mode::Eval) => (bn.apply_eval(z.view()), None, Some(z)),
                (Some(bn), Mode::Train) => {
                    let n = z.nrows() as f64;
                    let mean = z.sum_axis(Axis(0)) / n;
                    let centered = &z - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                    let normalized = centered * &inv_std;
                    let u = &normalized * &bn.gamma + &bn.beta;
                    (
                        u,
                        Some(BnCache {
                            normalized,
                            inv_std,
                            batch_mean: mean,
                            batch_var: var,
                        }),
                        None,
                    )
                }
            };
            let input = std::mem::take(&mut current);
            if layer.hidden {
                let r = u.mapv(|v| v.max(0.0));
                let (y, act) = match &layer.act_quant {
                    Some(q) => {
                        let (y, c) = q.forward(r.view(), rounding);
                        (y, Some(c))
                    }
                    None => (r, None),
                };
                hidden.push(y.clone());
                current = y;
                caches.push(LayerCache {
                    input,
                    weights,
                    bn,
                    pre_bn,
                    pre_act: u,
                    act,
                });
            } else {
                current = u;
                caches.push(LayerCache {
                    input,
                    weights,
                    bn,
                    pre_bn,
                    pre_act: Array2::zeros((0, 0)),
                    act: None,
                });
            }
        }
        Ok(ForwardPass {
            logits: current,
            hidden,
            mode,
            caches,
        })
    }

    /// Logits in eval mode.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    pub fn loss(&self, logits: &Array2<f64>, labels: &[usize]) -> Result<LossValue> {
        let classification = cross_entropy(logits, labels)?;
        Ok(LossValue {
            total: classification + self.config.l1_lambda * self.l1_norm(),
            classification,
        })
    }

    /// Eval-mode loss over a whole dataset.
    pub fn evaluate_loss(&self, d: &Dataset) -> Result<LossValue> {
        let logits = self.predict(d.features().view())?;
        self.loss(&logits, d.labels())
    }

    /// Exact gradients of `L` for the batch that produced `pass`, with the
    /// straight-through rule for rounding and clamp-gated gradients.
    pub fn backward(&self, pass: &ForwardPass, labels: &[usize]) -> Result<Gradients> {
        let logits = &pass.logits;
        if logits.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} labels",
                logits.nrows(),
                labels.len()
            )));
        }
        let batch = logits.nrows() as f64;
        let mut grad = softmax(logits);
        for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        grad /= batch;

        let lambda = self.config.l1_lambda;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&pass.caches).rev() {
            let mut log_scale = None;
            if layer.hidden {
                if let (Some(q), Some(c)) = (&layer.act_quant, &cache.act) {
                    let (dx, ds) = q.backward(&grad, c);
                    grad = dx;
                    log_scale = Some(ds);
                }
                Zip::from(&mut grad)
                    .and(&cache.pre_act)
                    .for_each(|g, &u| {
                        if u <= 0.0 {
                            *g = 0.0
                        }
                    });
            }

            let (mut gamma_g, mut beta_g) = (None, None);
            if let Some(bn) = &layer.bn {
                gamma_g = Some(match &cache.bn {
                    Some(c) => (&grad * &c.normalized).sum_axis(Axis(0)),
                    None => {
                        let z = cache.pre_bn.as_ref().expect("eval-mode batch norm keeps its input");
                        let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                        let normalized = (z - &bn.running_mean) * &inv_std;
                        (&grad * &normalized).sum_axis(Axis(0))
                    }
                });
                beta_g = Some(grad.sum_axis(Axis(0)));
                grad = match &cache.bn {
                    Some(c) => {
                        let dxhat = &grad * &bn.gamma;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * &c.normalized).sum_axis(Axis(0));
                        let n = batch;
                        let inner = dxhat * n - &sum_d - &(&c.normalized * &sum_dx);
                        inner * &(&c.inv_std / n)
                    }
                    None => {
                        let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                        grad * &(&inv_std * &bn.gamma)
                    }
                };
            }

            let d = &layer.dense;
            let mut dw = grad.t().dot(&cache.input);
            dw *= &cache.weights.grad_gate;
            if lambda > 0.0 {
                Zip::from(&mut dw)
                    .and(&d.weights)
                    .and(&d.mask)
                    .for_each(|g, &w, &keep| {
                        if keep && w != 0.0 {
                            *g += lambda * w.signum();
                        }
                    });
            }
            let db = grad.sum_axis(Axis(0));
            grad = grad.dot(&cache.weights.values);
            out.push(LayerGrads {
                weights: dw,
                bias: db,
                gamma: gamma_g,
                beta: beta_g,
                log_scale,
            });
        }
        out.reverse();
        Ok(Gradients { layers: out })
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// estimates (unbiased variance, momentum-weighted).
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if pass.mode != Mode::Train {
            return;
        }
        for (layer, cache) in self.layers.iter_mut().zip(&pass.caches) {
            if let (Some(bn), Some(c)) = (&mut layer.bn, &cache.bn) {
                let n = cache.input.nrows() as f64;
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = bn.momentum;
                bn.running_mean = &bn.running_mean * (1.0 - m) + &c.batch_mean * m;
                bn.running_var = &bn.running_var * (1.0 - m) + &c.batch_var * (m * correction);
            }
        }
    }

    /// All learnable parameters, layer by layer: weights (row-major), bias,
    /// then γ and β when present, then the activation log-scale.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.dense.weights.iter());
            out.extend(l.dense.bias.iter());
            if let Some(bn) = &l.bn {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
            if let Some(q) = &l.act_quant {
                out.push(q.log_scale);
            }
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.parameter_count()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.dense.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.dense.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
            if let Some(bn) = &mut l.bn {
                bn.gamma.iter_mut().for_each(|g| *g = it.next().unwrap());
                bn.beta.iter_mut().for_each(|b| *b = it.next().unwrap());
            }
            if let Some(q) = &mut l.act_quant {
                q.log_scale = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let d = &l.dense;
                d.weights.len()
                    + d.bias.len()
                    + l.bn.as_ref().map_or(0, |bn| 2 * bn.gamma.len())
                    + usize::from(l.act_quant.is_some())
            })
            .sum()
    }

    /// Mask flags aligned with [`Model::parameters`]; only dense weights can
    /// be masked.
    pub fn parameter_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.dense.mask.iter().copied());
            let rest = l.dense.bias.len()
                + l.bn.as_ref().map_or(0, |bn| 2 * bn.gamma.len())
                + usize::from(l.act_quant.is_some());
            out.extend(std::iter::repeat_n(true, rest));
        }
        out
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean of `-log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 250,
            patience: 10,
            batch_size: 1024,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config("max_epochs, patience and batch_size must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment vectors follow [`Model::parameters`].
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, parameter_count: usize) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_betas.0,
            beta2: cfg.adam_betas.1,
            eps: cfg.adam_epsilon,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let g = grads.to_vec();
        if g.len() != self.m.len() {
            return Err(Error::Shape("gradient length does not match optimizer state".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut p = model.parameters();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        model.set_parameters(&p)?;
        model.apply_masks();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_classification_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mini-batch Adam training with early stopping on the validation loss.
///
/// Stops after `max_epochs` or once the validation loss has failed to
/// improve for `patience` consecutive epochs, then restores the model state
/// (parameters and batch-norm statistics) from the best epoch.
pub fn train(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainRecord> {
    cfg.validate()?;
    for d in [train, val] {
        if d.num_features() != model.config.input_dim {
            return Err(Error::Shape(format!(
                "dataset has {} features, model expects {}",
                d.num_features(),
                model.config.input_dim
            )));
        }
        if d.num_classes() > model.config.output_dim {
            return Err(Error::Shape("more classes than model outputs".into()));
        }
    }
    model.apply_masks();
    let mut adam = Adam::new(cfg, model.parameter_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.features().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let pass = model.forward(x.view(), Mode::Train)?;
            train_total += model.loss(&pass.logits, &y)?.total * chunk.len() as f64;
            let grads = model.backward(&pass, &y)?;
            model.update_running_stats(&pass);
            adam.step(model, &grads)?;
        }
        let val_loss = model.evaluate_loss(val)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_total / train.len() as f64,
            val_loss: val_loss.total,
            val_classification_loss: val_loss.classification,
        });

        let improved = match &best {
            None => val_loss.total.is_finite(),
            Some((b, _, _)) => val_loss.total < *b,
        };
        if improved {
            best = Some((val_loss.total, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_loss, best_epoch) = match best {
        Some((loss, epoch, snapshot)) => {
            *model = snapshot;
            (loss, epoch)
        }
        None => return Err(Error::Numerical("validation loss never finite".into())),
    };
    Ok(TrainRecord {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

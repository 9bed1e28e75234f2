//! Classification performance, computational complexity and information
//! content of a trained model.
//!
//! * Accuracy and one-vs-rest ROC curves with AUC and the background
//!   efficiency at 50 % signal efficiency (`eb_at_es`).
//! * Bit operations: `mn [(1 - f_p) b_a b_w + b_a + b_w + log2 n]` per dense
//!   layer, where `f_p` is the pruned fraction of the layer.
//! * Neural efficiency: per hidden layer the Shannon entropy of the binarized
//!   neuron states divided by the neuron count, aggregated by geometric mean.

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{softmax, Model};
use crate::quant::Precision;

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::NoSamples);
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// One-vs-rest ROC curve: `(signal efficiency, background efficiency)`
/// points ordered from the strictest threshold to the loosest, starting at
/// `(0, 0)` and ending at `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

pub fn roc_curve(scores: &[f64], is_signal: &[bool]) -> Result<RocCurve> {
    if scores.len() != is_signal.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let n_sig = is_signal.iter().filter(|&&s| s).count();
    let n_bkg = is_signal.len() - n_sig;
    if n_sig == 0 || n_bkg == 0 {
        return Err(Error::config("ROC curve needs both signal and background samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if is_signal[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_sig as f64, fp as f64 / n_bkg as f64));
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    /// Trapezoidal area under `ε_s` as a function of `ε_b`.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let (s0, b0) = w[0];
                let (s1, b1) = w[1];
                (b1 - b0) * (s0 + s1) / 2.0
            })
            .sum()
    }

    /// Background efficiency at signal efficiency `target`, linearly
    /// interpolated between the bracketing points.
    pub fn eb_at_es(&self, target: f64) -> f64 {
        let pts = &self.points;
        let idx = match pts.iter().position(|&(es, _)| es >= target) {
            Some(i) => i,
            None => return pts.last().map_or(1.0, |p| p.1),
        };
        let (s1, b1) = pts[idx];
        if s1 == target || idx == 0 {
            return b1;
        }
        let (s0, b0) = pts[idx - 1];
        b0 + (b1 - b0) * (target - s0) / (s1 - s0)
    }

    /// Two-column CSV (`signal_efficiency,background_efficiency`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("signal_efficiency,background_efficiency\n");
        for (s, b) in &self.points {
            out.push_str(&format!("{s},{b}\n"));
        }
        out
    }
}

pub fn auc(r: &RocCurve) -> f64 {
    r.auc()
}

pub fn eb_at_es(r: &RocCurve, target: f64) -> f64 {
    r.eb_at_es(target)
}

/// One ROC curve per class, scoring each sample by the softmax probability
/// of that class.
pub fn one_vs_rest_curves(logits: &Array2<f64>, labels: &[usize], num_classes: usize) -> Result<Vec<RocCurve>> {
    let probs = softmax(logits);
    (0..num_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.column(c).to_vec();
            let signal: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            roc_curve(&scores, &signal)
        })
        .collect()
}

/// Bit operations of one dense layer with `m` outputs and `n` inputs.
pub fn bops_layer(m: usize, n: usize, b_a: u32, b_w: u32, f_p: f64) -> f64 {
    let mn = (m * n) as f64;
    let (ba, bw) = (b_a as f64, b_w as f64);
    mn * ((1.0 - f_p) * ba * bw + ba + bw + (n as f64).log2())
}

/// Bit widths `(b_a, b_w)` of every dense layer. The first layer reads the
/// unquantized inputs; later layers read the previous hidden activations.
pub fn layer_bit_widths(model: &Model) -> Vec<(u32, u32)> {
    (0..model.layers.len())
        .map(|i| {
            let b_a = if i == 0 {
                model.quant.input_bits
            } else {
                model.quant.act_precision(i - 1).bits()
            };
            (b_a, model.quant.weight_precision(i).bits())
        })
        .collect()
}

/// Total bit operations with per-layer pruned fractions taken from the
/// masks. Multiplications are counted from the surviving weights directly,
/// so power-of-two fan-ins give integer-exact totals.
pub fn bops_model(model: &Model) -> f64 {
    model
        .layers
        .iter()
        .zip(layer_bit_widths(model))
        .map(|(l, (b_a, b_w))| {
            let d = &l.dense;
            let (m, n) = (d.fan_out(), d.fan_in());
            let kept = (d.weights.len() - d.pruned_count()) as f64;
            let mn = (m * n) as f64;
            kept * (b_a as f64 * b_w as f64) + mn * (b_a as f64 + b_w as f64 + (n as f64).log2())
        })
        .sum()
}

/// Empirical Shannon entropy in bits of the observed states.
pub fn layer_entropy<I, S>(states: I) -> f64
where
    I: IntoIterator<Item = S>,
    S: Hash + Eq,
{
    let mut counts: HashMap<S, u64> = HashMap::new();
    let mut total = 0u64;
    for s in states {
        *counts.entry(s).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    // Sort counts so the floating-point sum does not depend on hash order.
    let mut c: Vec<u64> = counts.into_values().collect();
    c.sort_unstable();
    let t = total as f64;
    c.iter()
        .map(|&k| {
            let p = k as f64 / t;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Pack each row's `> 0` pattern into 64-bit words.
pub fn binarize_states(activations: ArrayView2<f64>) -> Vec<Vec<u64>> {
    let words = activations.ncols().div_ceil(64);
    activations
        .rows()
        .into_iter()
        .map(|row| {
            let mut bits = vec![0u64; words];
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    bits[j / 64] |= 1 << (j % 64);
                }
            }
            bits
        })
        .collect()
}

/// Geometric mean of per-layer efficiencies; 0 if any layer is 0.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralEfficiency {
    pub per_layer: Vec<f64>,
    pub aggregate: f64,
}

/// Neural efficiency of the hidden layers on (at most `max_samples` of) `d`.
pub fn neural_efficiency(model: &Model, d: &Dataset, max_samples: usize) -> Result<NeuralEfficiency> {
    if d.is_empty() {
        return Err(Error::NoSamples);
    }
    let n = d.len().min(max_samples.max(1));
    let x = d.features().slice(ndarray::s![..n, ..]);
    let pass = model.forward(x, crate::nn::Mode::Eval)?;
    let per_layer: Vec<f64> = pass
        .hidden
        .iter()
        .map(|h| layer_entropy(binarize_states(h.view())) / h.ncols() as f64)
        .collect();
    let aggregate = geometric_mean(&per_layer);
    Ok(NeuralEfficiency { per_layer, aggregate })
}

/// Default sample cap for neural-efficiency measurements.
pub const NEFF_MAX_SAMPLES: usize = 50_000;

/// Everything reported for one trained model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc_per_class: Vec<f64>,
    pub auc_mean: f64,
    pub eb_per_class: Vec<f64>,
    pub eb_mean: f64,
    pub bops: f64,
    pub neff_per_layer: Vec<f64>,
    pub neff: f64,
    pub sparsity: f64,
    pub weight_bits: Precision,
    pub act_bits: Precision,
}

pub fn evaluate(model: &Model, test: &Dataset) -> Result<MetricsReport> {
    let logits = model.predict(test.features().view())?;
    let acc = accuracy(&logits, test.labels())?;
    let curves = one_vs_rest_curves(&logits, test.labels(), test.num_classes())?;
    let auc_per_class: Vec<f64> = curves.iter().map(RocCurve::auc).collect();
    let eb_per_class: Vec<f64> = curves.iter().map(|c| c.eb_at_es(0.5)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let neff = neural_efficiency(model, test, NEFF_MAX_SAMPLES)?;
    Ok(MetricsReport {
        accuracy: acc,
        auc_mean: mean(&auc_per_class),
        auc_per_class,
        eb_mean: mean(&eb_per_class),
        eb_per_class,
        bops: bops_model(model),
        neff_per_layer: neff.per_layer,
        neff: neff.aggregate,
        sparsity: model.sparsity(),
        weight_bits: model.quant.weight_bits,
        act_bits: model.quant.act_bits,
    })
}

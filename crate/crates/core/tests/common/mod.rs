//! Oracles shared by the integration tests. Nothing here calls into the
//! code path it checks.

#![allow(dead_code)]

use ndarray::Array2;
use qap_core::nn::{init_model, MlpConfig, Mode, Model};
use qap_core::quant::QuantSpec;
use qap_core::rng::rng_from_seed;
use rand::Rng;

/// Total training-mode loss at the given flat parameter vector.
pub fn loss_at(model: &Model, params: &[f64], x: &Array2<f64>, y: &[usize]) -> f64 {
    let mut m = model.clone();
    m.set_parameters(params).unwrap();
    let pass = m.forward(x.view(), Mode::Train).unwrap();
    m.loss(&pass.logits, y).unwrap().total
}

/// Central finite differences of the training-mode loss for every parameter.
pub fn finite_difference_gradient(model: &Model, x: &Array2<f64>, y: &[usize], h: f64) -> Vec<f64> {
    let p = model.parameters();
    (0..p.len())
        .map(|i| {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[i] += h;
            minus[i] -= h;
            (loss_at(model, &plus, x, y) - loss_at(model, &minus, x, y)) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct RandomProblem {
    pub model: Model,
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

/// A random model with at most ~200 parameters, a random batch and some
/// masked weights.
pub fn random_problem(seed: u64, quant: &QuantSpec) -> RandomProblem {
    let mut rng = rng_from_seed(seed);
    let input_dim = rng.random_range(2..=5);
    let depth = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let output_dim = rng.random_range(2..=4);
    let cfg = MlpConfig {
        input_dim,
        hidden_widths: hidden,
        output_dim,
        use_bn: rng.random_bool(0.5),
        l1_lambda: if rng.random_bool(0.5) { 1e-2 } else { 0.0 },
    };
    let mut model = init_model(&cfg, quant, seed).unwrap();
    for l in &mut model.layers {
        for b in l.dense.bias.iter_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
        if let Some(bn) = &mut l.bn {
            for g in bn.gamma.iter_mut() {
                *g = rng.random_range(0.5..1.5);
            }
            for b in bn.beta.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        for keep in l.dense.mask.iter_mut() {
            if rng.random_bool(0.15) {
                *keep = false;
            }
        }
    }
    model.apply_masks();
    let batch = rng.random_range(4..=8);
    let x = Array2::from_shape_fn((batch, input_dim), |_| rng.random_range(-2.0..2.0));
    let y = (0..batch).map(|_| rng.random_range(0..output_dim)).collect();
    RandomProblem { model, x, y }
}

/// A model and batch whose pre-activations all sit on the quantization grid,
/// so rounding is a no-op and the quantized network equals its clamp-only
/// surrogate in the forward pass. 6-bit weights and activations, no BN;
/// first-layer s_w = 1/8, second s_w = 1, s_A = 1/32 (log scale 0), inputs
/// on a 1/4 grid, biases on a 1/32 grid.
pub fn grid_aligned_problem(seed: u64) -> RandomProblem {
    let mut rng = rng_from_seed(seed);
    let input_dim = rng.random_range(2..=5);
    let h1 = rng.random_range(2..=6);
    let h2 = rng.random_range(2..=6);
    let output_dim = rng.random_range(2..=4);
    let cfg = MlpConfig {
        input_dim,
        hidden_widths: vec![h1, h2],
        output_dim,
        use_bn: false,
        l1_lambda: if rng.random_bool(0.5) { 1e-3 } else { 0.0 },
    };
    let mut model = init_model(&cfg, &QuantSpec::bits(6), seed).unwrap();
    let denominators = [8.0, 1.0, 8.0];
    for (l, &den) in model.layers.iter_mut().zip(&denominators) {
        let (r, c) = l.dense.weights.dim();
        let mut k = Array2::from_shape_fn((r, c), |_| rng.random_range(-12i32..=12) as f64);
        // Pin the scale: one entry at ±31.
        k[[rng.random_range(0..r), rng.random_range(0..c)]] = if rng.random_bool(0.5) { 31.0 } else { -31.0 };
        l.dense.weights = k / den;
        for b in l.dense.bias.iter_mut() {
            *b = rng.random_range(-8i32..=8) as f64 / 32.0;
        }
        if let Some(q) = &mut l.act_quant {
            q.log_scale = 0.0;
        }
    }
    let batch = rng.random_range(3..=8);
    let x = Array2::from_shape_fn((batch, input_dim), |_| rng.random_range(-8i32..=8) as f64 / 4.0);
    let y = (0..batch).map(|_| rng.random_range(0..output_dim)).collect();
    RandomProblem { model, x, y }
}

/// Predictive mean and variance from an explicit inverse of K + σ_n² I.
pub fn dense_gp_oracle(
    xs: &[Vec<f64>],
    ys: &[f64],
    k: &qap_core::bayesopt::KernelParams,
    x: &[f64],
) -> (f64, f64) {
    use nalgebra::{DMatrix, DVector};
    let n = xs.len();
    let m = ys.iter().sum::<f64>() / n as f64;
    let kmat = DMatrix::from_fn(n, n, |i, j| {
        k.covariance(&xs[i], &xs[j]) + if i == j { k.noise_variance } else { 0.0 }
    });
    let inv = kmat.try_inverse().expect("invertible");
    let ks = DVector::from_iterator(n, xs.iter().map(|xi| k.covariance(xi, x)));
    let r = DVector::from_iterator(n, ys.iter().map(|y| y - m));
    let mean = m + (ks.transpose() * &inv * r)[(0, 0)];
    let var = k.signal_variance - (ks.transpose() * &inv * &ks)[(0, 0)];
    (mean, var)
}

/// Monte Carlo estimate of E[max(f_best - f, 0)] for f ~ N(mu, sigma²).
pub fn monte_carlo_ei(mu: f64, sigma: f64, f_best: f64, draws: usize, seed: u64) -> f64 {
    use rand_distr::StandardNormal;
    let mut rng = rng_from_seed(seed);
    let total: f64 = (0..draws)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (f_best - (mu + sigma * z)).max(0.0)
        })
        .sum();
    total / draws as f64
}

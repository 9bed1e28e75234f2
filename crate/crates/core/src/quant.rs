//! Scaled-integer fake quantization.
//!
//! A real value `x` is represented as `s * clamp(round(x / s), y_min, y_max)`
//! for a per-tensor scale `s`. Rounding is round-to-nearest with ties away
//! from zero (`f64::round`).
//!
//! Weights are symmetric signed integers in `[-(2^(n-1) - 1), 2^(n-1) - 1]`
//! with `s_w = max|W| / (2^(n-1) - 1)` recomputed from the live (unmasked)
//! weights at every forward pass, so the largest weight is always
//! representable. Activations are unsigned integers in `[0, 2^n - 1]` with
//! `s_A = s_learned / 2^(n-1)`; `s_learned` is trained in log space and
//! starts at 6.0.
//!
//! Backward passes use the straight-through estimator: rounding is the
//! identity, clamping passes gradient only inside the integer range.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Initial value of the learned activation range.
pub const ACT_SCALE_INIT: f64 = 6.0;

/// Word length of a tensor: full floating point or an `n`-bit integer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Float32,
    Int(u32),
}

impl Precision {
    /// Bit count used for complexity accounting (32 for floating point).
    pub fn bits(self) -> u32 {
        match self {
            Precision::Float32 => 32,
            Precision::Int(n) => n,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Precision::Float32)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Precision::Int(n) if !(2..=32).contains(&n) => {
                Err(Error::config(format!("bit width {n} outside [2, 32]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Float32 => f.write_str("float32"),
            Precision::Int(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if matches!(t.as_str(), "float32" | "fp32" | "f32" | "float") {
            return Ok(Precision::Float32);
        }
        let digits = t.trim_end_matches("bit").trim_end_matches('-');
        let n: u32 = digits
            .parse()
            .map_err(|_| Error::config(format!("unrecognized precision {s:?}")))?;
        let p = Precision::Int(n);
        p.validate()?;
        Ok(p)
    }
}

impl Serialize for Precision {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Precision::Float32 => serializer.serialize_str("float32"),
            Precision::Int(n) => serializer.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bits(u32),
            Name(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Bits(n) => {
                let p = Precision::Int(n);
                p.validate().map_err(serde::de::Error::custom)?;
                Ok(p)
            }
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Rounding used in the forward pass. `Identity` removes rounding but keeps
/// clamping, which yields the clamp-only surrogate network whose gradients
/// the straight-through estimator reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Nearest,
    Identity,
}

impl Rounding {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Rounding::Nearest => v.round(),
            Rounding::Identity => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerPrecision {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Precision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<Precision>,
}

/// Word lengths for weights and activations across the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: Precision,
    pub act_bits: Precision,
    /// Width of the unquantized network inputs, used for complexity only.
    #[serde(default = "default_input_bits")]
    pub input_bits: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layer_overrides: BTreeMap<usize, LayerPrecision>,
    #[serde(default)]
    pub rounding: Rounding,
}

fn default_input_bits() -> u32 {
    32
}

impl QuantSpec {
    pub fn float32() -> Self {
        QuantSpec::uniform(Precision::Float32)
    }

    /// Same word length for every weight and activation tensor.
    pub fn uniform(p: Precision) -> Self {
        QuantSpec {
            weight_bits: p,
            act_bits: p,
            input_bits: 32,
            layer_overrides: BTreeMap::new(),
            rounding: Rounding::Nearest,
        }
    }

    pub fn bits(n: u32) -> Self {
        QuantSpec::uniform(Precision::Int(n))
    }

    pub fn weight_precision(&self, layer: usize) -> Precision {
        self.layer_overrides
            .get(&layer)
            .and_then(|o| o.weight)
            .unwrap_or(self.weight_bits)
    }

    /// Precision of the activations produced by hidden layer `layer`.
    pub fn act_precision(&self, layer: usize) -> Precision {
        self.layer_overrides
            .get(&layer)
            .and_then(|o| o.act)
            .unwrap_or(self.act_bits)
    }

    pub fn validate(&self) -> Result<()> {
        self.weight_bits.validate()?;
        self.act_bits.validate()?;
        for o in self.layer_overrides.values() {
            o.weight.map(Precision::validate).transpose()?;
            o.act.map(Precision::validate).transpose()?;
        }
        if self.input_bits == 0 {
            return Err(Error::config("input_bits must be positive"));
        }
        Ok(())
    }
}

/// Integer range for an `n`-bit word.
pub fn int_bounds(n: u32, signed: bool) -> Result<(i64, i64)> {
    if !(2..=62).contains(&n) {
        return Err(Error::config(format!("bit width {n} outside [2, 62]")));
    }
    Ok(if signed {
        let m = (1i64 << (n - 1)) - 1;
        (-m, m)
    } else {
        (0, (1i64 << n) - 1)
    })
}

#[inline]
pub fn quantize_value(x: f64, s: f64, lo: i64, hi: i64) -> f64 {
    s * (x / s).round().clamp(lo as f64, hi as f64)
}

/// Elementwise uniform affine quantization `s * clamp(round(x / s), lo, hi)`.
pub fn quantize(x: ArrayView2<f64>, s: f64, lo: i64, hi: i64) -> Result<Array2<f64>> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Numerical(format!("quantizer scale must be positive, got {s}")));
    }
    Ok(x.mapv(|v| quantize_value(v, s, lo, hi)))
}

/// `max|W| / (2^(n-1) - 1)` over entries where `mask` is set. An all-zero
/// tensor gets `f64::EPSILON` so every entry quantizes to 0.
pub fn weight_scale(w: ArrayView2<f64>, mask: ArrayView2<bool>, n: u32) -> f64 {
    let max = Zip::from(w)
        .and(mask)
        .fold(0.0f64, |acc, &v, &keep| if keep { acc.max(v.abs()) } else { acc });
    let levels = ((1i64 << (n - 1)) - 1) as f64;
    if max > 0.0 {
        max / levels
    } else {
        f64::EPSILON
    }
}

/// `s_A = exp(log_s_learned) / 2^(n-1)`.
pub fn act_scale(log_s_learned: f64, n: u32) -> f64 {
    log_s_learned.exp() / (1u64 << (n - 1)) as f64
}

/// Fake-quantized weights plus the straight-through gradient gate.
#[derive(Debug, Clone)]
pub struct FakeQuantWeights {
    pub values: Array2<f64>,
    /// 1 where upstream gradient reaches the master weight, 0 otherwise.
    pub grad_gate: Array2<f64>,
    pub scale: Option<f64>,
}

/// Effective weights for one dense layer. Masked entries are exactly 0 and
/// gated off. With a floating-point precision the result is `W * mask`.
pub fn fake_quant_weights(
    w: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    precision: Precision,
    rounding: Rounding,
) -> FakeQuantWeights {
    let gate_of = |keep: bool| if keep { 1.0 } else { 0.0 };
    match precision {
        Precision::Float32 => {
            let mut values = Array2::zeros(w.raw_dim());
            let mut grad_gate = Array2::zeros(w.raw_dim());
            Zip::from(&mut values)
                .and(&mut grad_gate)
                .and(w)
                .and(mask)
                .for_each(|v, g, &x, &keep| {
                    *v = if keep { x } else { 0.0 };
                    *g = gate_of(keep);
                });
            FakeQuantWeights {
                values,
                grad_gate,
                scale: None,
            }
        }
        Precision::Int(n) => {
            let s = weight_scale(w, mask, n);
            let hi = ((1i64 << (n - 1)) - 1) as f64;
            let mut values = Array2::zeros(w.raw_dim());
            let mut grad_gate = Array2::zeros(w.raw_dim());
            Zip::from(&mut values)
                .and(&mut grad_gate)
                .and(w)
                .and(mask)
                .for_each(|v, g, &x, &keep| {
                    if keep {
                        let r = x / s;
                        *v = s * rounding.apply(r).clamp(-hi, hi);
                        // Slack absorbs the last-ulp error of max|W| / s.
                        *g = gate_of(r.abs() <= hi * (1.0 + 1e-12));
                    } else {
                        *v = 0.0;
                        *g = 0.0;
                    }
                });
            FakeQuantWeights {
                values,
                grad_gate,
                scale: Some(s),
            }
        }
    }
}

/// Unsigned activation quantizer with a learned, log-parameterized range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    pub bits: u32,
    pub log_scale: f64,
}

/// Output of [`ActQuantizer::forward`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ActQuantCache {
    /// 1 where `x / s_A <= A_max`.
    pub pass: Array2<f64>,
    /// 1 where the input saturated at the top of the range.
    pub saturated: Array2<f64>,
}

impl ActQuantizer {
    pub fn new(bits: u32) -> Self {
        ActQuantizer {
            bits,
            log_scale: ACT_SCALE_INIT.ln(),
        }
    }

    pub fn scale(&self) -> f64 {
        act_scale(self.log_scale, self.bits)
    }

    pub fn max_level(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Quantize non-negative activations onto `s_A * [0, 2^n - 1]`.
    pub fn forward(&self, x: ArrayView2<f64>, rounding: Rounding) -> (Array2<f64>, ActQuantCache) {
        let s = self.scale();
        let top = self.max_level();
        let mut y = Array2::zeros(x.raw_dim());
        let mut pass = Array2::zeros(x.raw_dim());
        let mut saturated = Array2::zeros(x.raw_dim());
        Zip::from(&mut y)
            .and(&mut pass)
            .and(&mut saturated)
            .and(x)
            .for_each(|y, p, sat, &v| {
                let r = v / s;
                *y = s * rounding.apply(r).clamp(0.0, top);
                if r > top {
                    *sat = 1.0;
                } else if r >= 0.0 {
                    *p = 1.0;
                }
            });
        (y, ActQuantCache { pass, saturated })
    }

    /// Returns the input gradient and the gradient of the loss with respect
    /// to `log_scale`. Only saturated elements depend on the scale:
    /// `d(s_A * A_max) / d log_scale = s_A * A_max`.
    pub fn backward(&self, upstream: &Array2<f64>, cache: &ActQuantCache) -> (Array2<f64>, f64) {
        let dx = upstream * &cache.pass;
        let boundary: f64 = Zip::from(upstream)
            .and(&cache.saturated)
            .fold(0.0, |acc, &g, &sat| acc + g * sat);
        (dx, boundary * self.scale() * self.max_level())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn bounds() {
        assert_eq!(int_bounds(6, true).unwrap(), (-31, 31));
        assert_eq!(int_bounds(6, false).unwrap(), (0, 63));
        assert_eq!(int_bounds(2, true).unwrap(), (-1, 1));
        assert!(int_bounds(1, true).is_err());
    }

    #[test]
    fn quantize_examples() {
        let (lo, hi) = int_bounds(4, true).unwrap();
        assert_eq!(quantize_value(0.0, 0.37, lo, hi), 0.0);
        assert_eq!(quantize_value(0.26, 0.5, lo, hi), 0.5);
        assert_eq!(quantize_value(100.0, 0.5, lo, hi), 3.5);
        assert_eq!(quantize_value(-100.0, 0.5, lo, hi), -3.5);
        // ties go away from zero
        assert_eq!(quantize_value(0.25, 0.5, lo, hi), 0.5);
        assert_eq!(quantize_value(-0.25, 0.5, lo, hi), -0.5);
        assert!(quantize(array![[1.0]].view(), 0.0, lo, hi).is_err());
        assert!(quantize(array![[1.0]].view(), -1.0, lo, hi).is_err());
    }

    #[test]
    fn weight_scale_examples() {
        let all = Array2::from_elem((1, 2), true);
        assert_eq!(weight_scale(array![[7.0, -1.0]].view(), all.view(), 4), 1.0);
        assert_eq!(weight_scale(array![[1.0, -3.5]].view(), all.view(), 8), 3.5 / 127.0);
        let fq = fake_quant_weights(array![[0.0, 0.0]].view(), all.view(), Precision::Int(6), Rounding::Nearest);
        assert_eq!(fq.values, array![[0.0, 0.0]]);
    }

    #[test]
    fn weight_scale_ignores_masked_entries() {
        let w = array![[10.0, 0.5, -1.0]];
        let mask = array![[false, true, true]];
        assert_eq!(weight_scale(w.view(), mask.view(), 2), 1.0);
    }

    #[test]
    fn act_scale_examples() {
        let s = act_scale(6.0f64.ln(), 6);
        assert_relative_eq!(s, 0.1875, max_relative = 1e-15);
        assert_relative_eq!(s * 63.0, 11.8125, max_relative = 1e-15);
        assert_eq!(act_scale(0.0, 2), 0.5);
        assert_relative_eq!(ActQuantizer::new(6).scale(), 0.1875, max_relative = 1e-15);
    }

    #[test]
    fn float_weights_are_masked_master_weights() {
        let w = array![[0.3, -1.7], [2.0, 0.1]];
        let mask = array![[true, false], [true, true]];
        let fq = fake_quant_weights(w.view(), mask.view(), Precision::Float32, Rounding::Nearest);
        assert_eq!(fq.values, array![[0.3, 0.0], [2.0, 0.1]]);
        assert_eq!(fq.grad_gate, array![[1.0, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn max_weight_keeps_its_gradient() {
        let w = array![[0.3, -1.7], [0.9, 0.1]];
        let mask = Array2::from_elem((2, 2), true);
        for n in 2..16 {
            let fq = fake_quant_weights(w.view(), mask.view(), Precision::Int(n), Rounding::Nearest);
            assert_eq!(fq.grad_gate[[0, 1]], 1.0);
            assert_eq!(fq.grad_gate.sum(), 4.0);
        }
    }

    #[test]
    fn act_quant_zero_and_saturation() {
        let q = ActQuantizer::new(4);
        let (y, cache) = q.forward(Array2::zeros((2, 3)).view(), Rounding::Nearest);
        assert_eq!(y, Array2::<f64>::zeros((2, 3)));
        let (_, ds) = q.backward(&Array2::ones((2, 3)), &cache);
        assert_eq!(ds, 0.0);

        let big = Array2::from_elem((2, 2), 1e6);
        let (y, cache) = q.forward(big.view(), Rounding::Nearest);
        let top = q.scale() * 15.0;
        assert!(y.iter().all(|&v| v == top));
        let (dx, ds) = q.backward(&Array2::ones((2, 2)), &cache);
        assert_eq!(dx.sum(), 0.0);
        assert_relative_eq!(ds, 4.0 * top, max_relative = 1e-15);
    }

    #[test]
    fn precision_parsing() {
        assert_eq!("float32".parse::<Precision>().unwrap(), Precision::Float32);
        assert_eq!("6".parse::<Precision>().unwrap(), Precision::Int(6));
        assert_eq!("12bit".parse::<Precision>().unwrap(), Precision::Int(12));
        assert!("1".parse::<Precision>().is_err());
        let json = serde_json::to_string(&[Precision::Float32, Precision::Int(4)]).unwrap();
        assert_eq!(json, r#"["float32",4]"#);
        let back: Vec<Precision> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Precision::Float32, Precision::Int(4)]);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(x in -1e4f64..1e4, s in 1e-3f64..10.0, n in 2u32..16, signed: bool) {
            let (lo, hi) = int_bounds(n, signed).unwrap();
            let q = quantize_value(x, s, lo, hi);
            prop_assert_eq!(quantize_value(q, s, lo, hi), q);
        }

        #[test]
        fn quantize_is_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, s in 1e-3f64..10.0, n in 2u32..12) {
            let (lo, hi) = int_bounds(n, true).unwrap();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(x, s, lo, hi) <= quantize_value(y, s, lo, hi));
        }
    }
}

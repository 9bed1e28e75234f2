//! Self-describing JSON model checkpoints.
//!
//! Parameters are stored row-major as decimal `f64` (shortest round-trip
//! representation), masks as strings of `0`/`1`, one character per weight.
//! Loading a saved checkpoint reproduces the model bit for bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Dense, Layer, MlpConfig, Model};
use crate::quant::{ActQuantizer, QuantSpec};

pub const CHECKPOINT_FORMAT: &str = "qap-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub fan_in: usize,
    pub fan_out: usize,
    pub hidden: bool,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNormState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_quant: Option<ActQuantizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: MlpConfig,
    pub quant: QuantSpec,
    pub seed: u64,
    pub layers: Vec<LayerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
}

fn encode_mask(mask: &Array2<bool>) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn decode_mask(s: &str, shape: (usize, usize)) -> Result<Array2<bool>> {
    let bits = s
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::config(format!("invalid mask character {other:?}"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    Array2::from_shape_vec(shape, bits).map_err(|e| Error::Shape(e.to_string()))
}

impl Checkpoint {
    pub fn from_model(model: &Model, standardizer: Option<&Standardizer>) -> Checkpoint {
        let layers = model
            .layers
            .iter()
            .map(|l| LayerState {
                fan_in: l.dense.fan_in(),
                fan_out: l.dense.fan_out(),
                hidden: l.hidden,
                weights: l.dense.weights.iter().copied().collect(),
                bias: l.dense.bias.to_vec(),
                mask: encode_mask(&l.dense.mask),
                batch_norm: l.bn.as_ref().map(|bn| BatchNormState {
                    gamma: bn.gamma.to_vec(),
                    beta: bn.beta.to_vec(),
                    running_mean: bn.running_mean.to_vec(),
                    running_var: bn.running_var.to_vec(),
                    epsilon: bn.epsilon,
                    momentum: bn.momentum,
                }),
                act_quant: l.act_quant,
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            quant: model.quant.clone(),
            seed: model.seed,
            layers,
            standardizer: standardizer.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Shape("checkpoint layer count does not match config".into()));
        }
        let shape_err = |what: &str| Error::Shape(format!("checkpoint {what} has the wrong length"));
        let layers = self
            .layers
            .iter()
            .zip(dims)
            .map(|(s, (fan_in, fan_out))| {
                if (s.fan_in, s.fan_out) != (fan_in, fan_out) {
                    return Err(Error::Shape("checkpoint layer shape does not match config".into()));
                }
                let weights = Array2::from_shape_vec((fan_out, fan_in), s.weights.clone())
                    .map_err(|_| shape_err("weights"))?;
                if s.bias.len() != fan_out {
                    return Err(shape_err("bias"));
                }
                let bn = s
                    .batch_norm
                    .as_ref()
                    .map(|b| {
                        let v = |x: &Vec<f64>| {
                            (x.len() == fan_out)
                                .then(|| Array1::from(x.clone()))
                                .ok_or_else(|| shape_err("batch norm"))
                        };
                        Ok::<_, Error>(BatchNorm {
                            gamma: v(&b.gamma)?,
                            beta: v(&b.beta)?,
                            running_mean: v(&b.running_mean)?,
                            running_var: v(&b.running_var)?,
                            epsilon: b.epsilon,
                            momentum: b.momentum,
                        })
                    })
                    .transpose()?;
                Ok(Layer {
                    dense: Dense {
                        weights,
                        bias: Array1::from(s.bias.clone()),
                        mask: decode_mask(&s.mask, (fan_out, fan_in))?,
                    },
                    bn,
                    act_quant: s.act_quant,
                    hidden: s.hidden,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config: self.config.clone(),
            quant: self.quant.clone(),
            seed: self.seed,
            layers,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Checkpoint> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json_str(&text)
    }
}

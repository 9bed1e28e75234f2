//! Quantization-aware pruning (QAP) for small fully-connected classifiers.
//!
//! The crate trains multilayer perceptrons with scaled-integer fake
//! quantization of weights and activations, prunes them iteratively by
//! global weight magnitude (fine-tuning or lottery-ticket rewinding), and
//! scores the results with accuracy, ROC-derived background efficiency,
//! pruning-aware bit operations (BOPs) and Shannon-entropy neural efficiency.
//! A Gaussian-process Bayesian optimizer over hidden-layer widths is
//! included as a comparison baseline.
//!
//! Module map:
//!
//! * [`data`]: datasets, CSV ingest, splits, folds, standardization, label
//!   randomization and a synthetic Gaussian-mixture generator.
//! * [`quant`]: integer bounds, uniform quantizer, weight and activation
//!   scale rules and the fake-quantizers used in training.
//! * [`nn`]: the MLP itself, forward/backward passes, Adam and the training
//!   loop with early stopping.
//! * [`prune`]: global magnitude ranking, the pruning schedule and the
//!   iterative QAP driver.
//! * [`metrics`]: accuracy, ROC/AUC, BOPs and neural efficiency.
//! * [`bayesopt`]: GP regression, expected improvement and the BO loop.
//! * [`experiment`]: the experiment grid and report emission.

pub mod bayesopt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod prune;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};

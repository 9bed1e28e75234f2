//! Iterative magnitude pruning interleaved with quantization-aware training.
//!
//! Each iteration removes the globally smallest-magnitude surviving weights:
//! `round(step_fraction * total)` of them while sparsity is below
//! `reduce_at_sparsity`, `round(reduced_step_fraction * total)` afterwards.
//! After pruning, the fine-tuning variant keeps training from the surviving
//! trained weights; the lottery-ticket variant first rewinds every surviving
//! parameter to its value at initialization.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{init_model, train, MlpConfig, Model, TrainConfig, TrainRecord};
use crate::quant::{fake_quant_weights, QuantSpec};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PruneVariant {
    #[serde(rename = "ft", alias = "fine_tune")]
    FineTune,
    #[serde(rename = "lt", alias = "lottery_ticket")]
    LotteryTicket,
}

impl std::fmt::Display for PruneVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneVariant::FineTune => "ft",
            PruneVariant::LotteryTicket => "lt",
        })
    }
}

/// Which magnitudes drive the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSource {
    #[default]
    Master,
    /// Fake-quantized magnitudes, ties broken by master magnitude.
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSchedule {
    pub step_fraction: f64,
    pub reduced_step_fraction: f64,
    pub reduce_at_sparsity: f64,
    /// Pruning iterations after the dense iteration 0.
    pub max_iterations: usize,
    pub variant: PruneVariant,
    pub rank_source: RankSource,
    /// Stop once sparsity reaches this level.
    pub max_sparsity: f64,
    /// Stop once test accuracy drops below this level.
    pub accuracy_floor: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            step_fraction: 0.10,
            reduced_step_fraction: 0.01,
            reduce_at_sparsity: 0.90,
            max_iterations: 30,
            variant: PruneVariant::FineTune,
            rank_source: RankSource::Master,
            max_sparsity: 0.99,
            accuracy_floor: 0.60,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.reduced_step_fraction
            && self.reduced_step_fraction <= self.step_fraction
            && self.step_fraction < 1.0;
        if !ok {
            return Err(Error::config(
                "need 0 < reduced_step_fraction <= step_fraction < 1",
            ));
        }
        Ok(())
    }

    /// Weights to remove next, given the current pruned count.
    pub fn step_size(&self, total: usize, pruned: usize) -> usize {
        let sparsity = pruned as f64 / total as f64;
        let fraction = if sparsity < self.reduce_at_sparsity {
            self.step_fraction
        } else {
            self.reduced_step_fraction
        };
        let k = (fraction * total as f64).round() as usize;
        k.max(1).min(total - pruned)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightCoord {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

/// Surviving weights ordered by ascending magnitude, ties by
/// `(layer, row, col)`.
pub fn global_rank(model: &Model, source: RankSource) -> Vec<WeightCoord> {
    let mut entries: Vec<(f64, f64, WeightCoord)> = Vec::new();
    for (li, l) in model.layers.iter().enumerate() {
        let d = &l.dense;
        let quantized = match source {
            RankSource::Master => None,
            RankSource::Quantized => Some(
                fake_quant_weights(
                    d.weights.view(),
                    d.mask.view(),
                    model.quant.weight_precision(li),
                    model.quant.rounding,
                )
                .values,
            ),
        };
        for ((row, col), &w) in d.weights.indexed_iter() {
            if !d.mask[[row, col]] {
                continue;
            }
            let primary = quantized.as_ref().map_or(w.abs(), |q| q[[row, col]].abs());
            entries.push((primary, w.abs(), WeightCoord { layer: li, row, col }));
        }
    }
    entries.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    entries.into_iter().map(|e| e.2).collect()
}

/// Position in the pruning schedule plus the lottery-ticket snapshot.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub iteration: usize,
    pub total_weights: usize,
    pub pruned: usize,
    pub initial: Option<Model>,
}

impl PruneState {
    /// Start tracking `model`. For the lottery-ticket variant the model is
    /// snapshotted here, so call this before any training.
    pub fn new(model: &Model, variant: PruneVariant) -> PruneState {
        PruneState {
            iteration: 0,
            total_weights: model.total_weights(),
            pruned: model.pruned_weights(),
            initial: (variant == PruneVariant::LotteryTicket).then(|| model.clone()),
        }
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned as f64 / self.total_weights as f64
    }
}

/// Mask the next batch of smallest weights. Returns how many were masked.
pub fn prune_step(model: &mut Model, state: &mut PruneState, sched: &PruneSchedule) -> Result<usize> {
    let ranking = global_rank(model, sched.rank_source);
    if ranking.is_empty() {
        return Err(Error::FullyPruned);
    }
    let k = sched.step_size(state.total_weights, state.pruned);
    for c in &ranking[..k] {
        model.layers[c.layer].dense.mask[[c.row, c.col]] = false;
    }
    model.apply_masks();
    state.pruned += k;
    state.iteration += 1;
    debug_assert_eq!(state.pruned, model.pruned_weights());
    Ok(k)
}

/// Reset every parameter to the snapshot while keeping the current masks.
pub fn rewind(model: &mut Model, initial: &Model) {
    let masks: Vec<_> = model.layers.iter().map(|l| l.dense.mask.clone()).collect();
    *model = initial.clone();
    for (l, m) in model.layers.iter_mut().zip(masks) {
        l.dense.mask = m;
    }
    model.apply_masks();
}

/// Standardized train/validation/test splits for one QAP run.
#[derive(Debug, Clone, Copy)]
pub struct QapData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub standardizer: Option<&'a Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sparsity: f64,
    pub pruned_weights: usize,
    pub newly_pruned: usize,
    /// Epochs trained in all earlier iterations.
    pub epoch_offset: usize,
    pub train: TrainRecord,
    pub metrics: MetricsReport,
    pub checkpoint: Checkpoint,
}

/// Train the dense quantized model, then alternately prune and retrain to
/// early stopping until the schedule, the sparsity cap or the accuracy floor
/// ends the run. `on_iteration` sees each record as soon as it exists.
pub fn run_qap(
    cfg: &MlpConfig,
    quant: &QuantSpec,
    sched: &PruneSchedule,
    train_cfg: &TrainConfig,
    data: QapData<'_>,
    model_seed: u64,
    mut on_iteration: impl FnMut(&IterationRecord) -> Result<()>,
) -> Result<Vec<IterationRecord>> {
    sched.validate()?;
    let mut model = init_model(cfg, quant, model_seed)?;
    let mut state = PruneState::new(&model, sched.variant);
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut epoch_offset = 0;

    loop {
        let newly_pruned = if state.iteration == 0 && records.is_empty() {
            0
        } else {
            let k = prune_step(&mut model, &mut state, sched)?;
            if let Some(initial) = &state.initial {
                rewind(&mut model, initial);
            }
            k
        };
        let tc = TrainConfig {
            seed: derive_seed(train_cfg.seed, state.iteration as u64),
            ..train_cfg.clone()
        };
        let record = train(&mut model, data.train, data.val, &tc)?;
        let metrics = evaluate(&model, data.test)?;
        let rec = IterationRecord {
            iteration: state.iteration,
            sparsity: state.sparsity(),
            pruned_weights: state.pruned,
            newly_pruned,
            epoch_offset,
            checkpoint: Checkpoint::from_model(&model, data.standardizer),
            train: record,
            metrics,
        };
        epoch_offset += rec.train.epochs.len();
        on_iteration(&rec)?;
        let stop = rec.sparsity >= sched.max_sparsity
            || rec.metrics.accuracy < sched.accuracy_floor
            || state.iteration >= sched.max_iterations
            || state.pruned >= state.total_weights;
        records.push(rec);
        if stop {
            break;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantSpec;
    use ndarray::array;
    use proptest::prelude::*;

    fn small_model() -> Model {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_widths: vec![2],
            output_dim: 1,
            use_bn: false,
            l1_lambda: 0.0,
        };
        init_model(&cfg, &QuantSpec::float32(), 0).unwrap()
    }

    #[test]
    fn ranks_by_magnitude() {
        let mut m = small_model();
        m.layers[0].dense.weights = array![[0.5, -0.1], [2.0, 0.3]];
        m.layers[1].dense.weights = array![[0.1, -4.0]];
        let r = global_rank(&m, RankSource::Master);
        let c = |layer, row, col| WeightCoord { layer, row, col };
        assert_eq!(r, vec![c(0, 0, 1), c(1, 0, 0), c(0, 1, 1), c(0, 0, 0), c(0, 1, 0), c(1, 0, 1)]);

        m.layers[0].dense.mask[[0, 1]] = false;
        let r = global_rank(&m, RankSource::Master);
        assert_eq!(r.len(), 5);
        assert!(!r.contains(&c(0, 0, 1)));
        assert_eq!(r[0], c(1, 0, 0));
    }

    #[test]
    fn baseline_schedule_sizes() {
        let cfg = MlpConfig::default();
        let mut m = init_model(&cfg, &QuantSpec::bits(6), 4).unwrap();
        let sched = PruneSchedule::default();
        let mut st = PruneState::new(&m, PruneVariant::FineTune);
        assert_eq!(prune_step(&mut m, &mut st, &sched).unwrap(), 426);
        assert_eq!(sched.step_size(4256, 3834), 43);
        let mut sizes = vec![426];
        while st.pruned < st.total_weights {
            sizes.push(prune_step(&mut m, &mut st, &sched).unwrap());
            assert!(st.sparsity() <= 1.0);
        }
        assert_eq!(st.sparsity(), 1.0);
        assert!(matches!(prune_step(&mut m, &mut st, &sched), Err(Error::FullyPruned)));
        assert!(sizes[..9].iter().all(|&k| k == 426));
        assert_eq!(sizes[9], 43);
    }

    #[test]
    fn rewind_restores_survivors() {
        let mut m = small_model();
        let init = m.clone();
        m.layers[0].dense.weights.mapv_inplace(|w| w * 3.0 + 1.0);
        m.layers[0].dense.mask[[1, 0]] = false;
        rewind(&mut m, &init);
        assert_eq!(m.layers[0].dense.weights[[0, 0]], init.layers[0].dense.weights[[0, 0]]);
        assert_eq!(m.layers[0].dense.weights[[1, 0]], 0.0);
        assert!(!m.layers[0].dense.mask[[1, 0]]);
    }

    proptest! {
        #[test]
        fn ranking_is_scale_invariant(ws in proptest::collection::vec(-5.0f64..5.0, 6), scale in 0.01f64..100.0) {
            let mut m = small_model();
            m.layers[0].dense.weights = ndarray::Array2::from_shape_vec((2, 2), ws[..4].to_vec()).unwrap();
            m.layers[1].dense.weights = ndarray::Array2::from_shape_vec((1, 2), ws[4..].to_vec()).unwrap();
            let a = global_rank(&m, RankSource::Master);
            for l in &mut m.layers {
                l.dense.weights.mapv_inplace(|w| w * scale);
            }
            let b = global_rank(&m, RankSource::Master);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cumulative_sparsity_is_exact(total in 50usize..20_000) {
            let sched = PruneSchedule::default();
            let step = (0.1 * total as f64).round() as usize;
            let mut pruned = 0;
            for i in 1..=9 {
                pruned += sched.step_size(total, pruned);
                prop_assert_eq!(pruned, i * step);
            }
        }
    }
}

//! Experiment grids: precision × pruning variant × regularization × label
//! randomization × fold, and the reports they produce.
//!
//! Every run derives its seeds from the master seed and its fold index only,
//! so a run's outputs do not depend on which other runs share the grid.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{append_trial_log, bo_run, finalize_trials, BoConfig, BoTrial, SearchSpace, WidthObjective};
use crate::checkpoint::Checkpoint;
use crate::data::{kfold, load_csv, randomize_labels, split, synth_generate, Dataset, Fold, SplitSpec, Standardizer, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::{MlpConfig, TrainConfig};
use crate::prune::{run_qap, PruneSchedule, PruneVariant, QapData};
use crate::quant::{Precision, QuantSpec};
use crate::rng::derive_seed;

const RANDOMIZE_STREAM: u64 = 1;
const FOLD_STREAM: u64 = 2;
const MODEL_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;

pub const REPORT_FORMAT: &str = "qap-report/1";

/// Class separation at which the default synthetic task gives a float32
/// baseline of roughly 90% accuracy.
pub const DESK_SEPARATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, num_classes: usize },
    Synthetic(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec {
            num_samples: 20_000,
            num_features: 16,
            num_classes: 5,
            class_separation: DESK_SEPARATION,
            seed: 0,
        })
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { path, num_classes } => load_csv(path, *num_classes),
            DataSource::Synthetic(spec) => synth_generate(spec),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pruning {
    Ft,
    Lt,
    None,
}

impl Pruning {
    pub fn variant(self) -> Option<PruneVariant> {
        match self {
            Pruning::Ft => Some(PruneVariant::FineTune),
            Pruning::Lt => Some(PruneVariant::LotteryTicket),
            Pruning::None => None,
        }
    }
}

impl fmt::Display for Pruning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pruning::Ft => "ft",
            Pruning::Lt => "lt",
            Pruning::None => "none",
        })
    }
}

impl FromStr for Pruning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ft" => Ok(Pruning::Ft),
            "lt" => Ok(Pruning::Lt),
            "none" => Ok(Pruning::None),
            other => Err(Error::config(format!("unknown pruning variant {other:?} (expected ft, lt or none)"))),
        }
    }
}

/// Batch normalization and L1 switches. Written `bn+l1`, `bn`, `l1` or `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regularization {
    pub bn: bool,
    pub l1: bool,
}

impl fmt::Display for Regularization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.bn, self.l1) {
            (true, true) => "bn+l1",
            (true, false) => "bn",
            (false, true) => "l1",
            (false, false) => "none",
        })
    }
}

impl FromStr for Regularization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "none" {
            return Ok(Regularization { bn: false, l1: false });
        }
        let mut r = Regularization { bn: false, l1: false };
        for part in t.split('+') {
            match part {
                "bn" => r.bn = true,
                "l1" => r.l1 = true,
                _ => return Err(Error::config(format!("unknown regularization {s:?} (expected bn+l1, bn, l1 or none)"))),
            }
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoSettings {
    #[serde(flatten)]
    pub run: BoConfig,
    pub space: SearchSpace,
    /// Epoch cap while searching; the final retrain uses the full training
    /// configuration.
    pub search_max_epochs: usize,
}

impl Default for BoSettings {
    fn default() -> Self {
        BoSettings {
            run: BoConfig::default(),
            space: SearchSpace::default(),
            search_max_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub split: SplitSpec,
    pub precisions: Vec<Precision>,
    pub input_bits: u32,
    pub pruning: Vec<Pruning>,
    pub regularization: Vec<Regularization>,
    pub l1_lambda: f64,
    pub randomization: Vec<f64>,
    /// Number of folds; 1 means the plain train/validation split.
    pub folds: usize,
    pub seed: u64,
    pub hidden_widths: Vec<usize>,
    pub train: TrainConfig,
    pub schedule: PruneSchedule,
    /// Curves stop at the first point whose mean accuracy drops below this.
    pub curve_accuracy_floor: f64,
    /// Concurrent runs; 0 uses every core.
    pub workers: usize,
    pub save_checkpoints: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub bo: BoSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            data: DataSource::default(),
            split: SplitSpec::default(),
            precisions: vec![Precision::Float32, Precision::Int(12), Precision::Int(6), Precision::Int(4)],
            input_bits: 32,
            pruning: vec![Pruning::Ft],
            regularization: vec![Regularization { bn: true, l1: true }],
            l1_lambda: 1e-4,
            randomization: vec![0.0],
            folds: 4,
            seed: 0,
            hidden_widths: vec![64, 32, 32],
            train: TrainConfig::default(),
            schedule: PruneSchedule::default(),
            curve_accuracy_floor: 0.60,
            workers: 1,
            save_checkpoints: true,
            output_dir: None,
            bo: BoSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML or JSON file, chosen by extension (TOML otherwise).
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precisions.is_empty() {
            return Err(Error::config("at least one precision is required"));
        }
        for p in &self.precisions {
            p.validate()?;
        }
        if self.pruning.is_empty() || self.regularization.is_empty() || self.randomization.is_empty() {
            return Err(Error::config("pruning, regularization and randomization lists must be non-empty"));
        }
        if let Some(f) = self.randomization.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::config(format!("randomization fraction {f} outside [0, 1]")));
        }
        if self.folds == 0 {
            return Err(Error::config("folds must be at least 1"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden widths must be non-empty and positive"));
        }
        if !(2..=32).contains(&self.input_bits) {
            return Err(Error::config("input_bits must be in 2..=32"));
        }
        self.split.validate()?;
        self.train.validate()?;
        self.schedule.validate()
    }

    /// Grid cells in emission order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &precision in &self.precisions {
            for &pruning in &self.pruning {
                for &regularization in &self.regularization {
                    for &randomization in &self.randomization {
                        out.push(Cell {
                            precision,
                            pruning,
                            regularization,
                            randomization,
                        });
                    }
                }
            }
        }
        out
    }

    fn quant(&self, precision: Precision) -> QuantSpec {
        QuantSpec {
            input_bits: self.input_bits,
            ..QuantSpec::uniform(precision)
        }
    }

    fn model_config(&self, d: &Dataset, reg: Regularization) -> MlpConfig {
        MlpConfig {
            input_dim: d.num_features(),
            hidden_widths: self.hidden_widths.clone(),
            output_dim: d.num_classes(),
            use_bn: reg.bn,
            l1_lambda: if reg.l1 { self.l1_lambda } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub precision: Precision,
    pub pruning: Pruning,
    pub regularization: Regularization,
    pub randomization: f64,
}

impl Cell {
    /// Filesystem-safe identifier, unique within a grid.
    pub fn id(&self) -> String {
        let p = match self.precision {
            Precision::Float32 => "float32".to_string(),
            Precision::Int(n) => format!("int{n}"),
        };
        let r = self.regularization.to_string().replace('+', "-");
        format!("{p}_{}_{r}_rand{}", self.pruning, self.randomization)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: Cell,
    pub fold: usize,
    pub iteration: usize,
    pub sparsity: f64,
    pub pruned_weights: usize,
    pub epochs: usize,
    pub best_val_loss: f64,
    pub metrics: MetricsReport,
    /// Relative to the report directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    /// Mean and standard error (`k - 1` denominator); zero spread for one value.
    pub fn of(values: &[f64]) -> Stat {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        if values.len() < 2 {
            return Stat { mean, stderr: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
        Stat {
            mean,
            stderr: (var / k).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: Cell,
    pub iteration: usize,
    pub folds: usize,
    pub sparsity: Stat,
    pub bops: Stat,
    pub accuracy: Stat,
    pub eb: Stat,
    pub auc: Stat,
    pub neff: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub cell: Cell,
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub format: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<RunFailure>,
}

/// Mean and standard error over folds for every (cell, iteration) that has
/// exactly `folds` distinct fold values.
pub fn aggregate(rows: &[ReportRow], folds: usize) -> Vec<AggregateRow> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: HashMap<(String, usize), Vec<&ReportRow>> = HashMap::new();
    for r in rows {
        let key = (r.cell.id(), r.iteration);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .filter_map(|key| {
            let g = &groups[&key];
            let mut fold_ids: Vec<usize> = g.iter().map(|r| r.fold).collect();
            fold_ids.sort_unstable();
            fold_ids.dedup();
            if fold_ids.len() != folds || g.len() != folds {
                return None;
            }
            let stat = |f: fn(&ReportRow) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            Some(AggregateRow {
                cell: g[0].cell,
                iteration: key.1,
                folds,
                sparsity: stat(|r| r.sparsity),
                bops: stat(|r| r.metrics.bops),
                accuracy: stat(|r| r.metrics.accuracy),
                eb: stat(|r| r.metrics.eb_mean),
                auc: stat(|r| r.metrics.auc_mean),
                neff: stat(|r| r.metrics.neff),
            })
        })
        .collect()
}

/// Train/validation pairs from the train+val pool. With one fold the pool
/// is cut back at the original split point.
fn make_folds(pool: &Dataset, n_train: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k == 1 {
        let idx: Vec<usize> = (0..pool.len()).collect();
        return Ok(vec![Fold {
            train: pool.subset(&idx[..n_train])?,
            val: pool.subset(&idx[n_train..])?,
        }]);
    }
    kfold(pool, k, seed)
}

fn checkpoint_rel_path(cell: &Cell, fold: usize, iteration: usize) -> String {
    format!("checkpoints/{}/fold{fold}/iter{iteration:02}.json", cell.id())
}

fn run_one(cfg: &ExperimentConfig, cell: &Cell, fold_idx: usize, fold: &Fold, test: &Dataset) -> Result<Vec<ReportRow>> {
    let standardizer = Standardizer::fit(&fold.train);
    let train = standardizer.apply(&fold.train)?;
    let val = standardizer.apply(&fold.val)?;
    let test = standardizer.apply(test)?;
    let mcfg = cfg.model_config(&train, cell.regularization);
    let sched = match cell.pruning.variant() {
        Some(variant) => PruneSchedule {
            variant,
            ..cfg.schedule.clone()
        },
        None => PruneSchedule {
            max_iterations: 0,
            ..cfg.schedule.clone()
        },
    };
    let tc = TrainConfig {
        seed: derive_seed(derive_seed(cfg.seed, TRAIN_STREAM), fold_idx as u64),
        ..cfg.train.clone()
    };
    let model_seed = derive_seed(derive_seed(cfg.seed, MODEL_STREAM), fold_idx as u64);
    let data = QapData {
        train: &train,
        val: &val,
        test: &test,
        standardizer: Some(&standardizer),
    };
    let records = run_qap(&mcfg, &cfg.quant(cell.precision), &sched, &tc, data, model_seed, |_| Ok(()))?;
    Ok(records
        .into_iter()
        .map(|rec| ReportRow {
            cell: *cell,
            fold: fold_idx,
            iteration: rec.iteration,
            sparsity: rec.sparsity,
            pruned_weights: rec.pruned_weights,
            epochs: rec.train.epochs.len(),
            best_val_loss: rec.train.best_val_loss,
            metrics: rec.metrics,
            checkpoint_path: cfg.save_checkpoints.then(|| checkpoint_rel_path(cell, fold_idx, rec.iteration)),
            checkpoint: cfg.save_checkpoints.then_some(rec.checkpoint),
        })
        .collect())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Run every (cell, fold) of the grid. Failing runs are recorded in
/// `failures` and the rest of the grid continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let splits = split(&data, &cfg.split)?;
    let pool = splits.train.concat(&splits.val)?;
    let fold_sets: Vec<Vec<Fold>> = cfg
        .randomization
        .iter()
        .map(|&f| {
            let p = randomize_labels(&pool, f, derive_seed(cfg.seed, RANDOMIZE_STREAM))?;
            make_folds(&p, splits.train.len(), cfg.folds, derive_seed(cfg.seed, FOLD_STREAM))
        })
        .collect::<Result<_>>()?;

    let cells = cfg.cells();
    let jobs: Vec<(&Cell, usize)> = cells
        .iter()
        .flat_map(|c| (0..cfg.folds).map(move |f| (c, f)))
        .collect();
    let outcomes: Vec<Result<Vec<ReportRow>>> = thread_pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(cell, f)| {
                let ri = cfg
                    .randomization
                    .iter()
                    .position(|&r| r == cell.randomization)
                    .expect("cell randomization comes from the config");
                run_one(cfg, cell, f, &fold_sets[ri][f], &splits.test)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&(cell, fold), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(RunFailure {
                cell: *cell,
                fold,
                error: e.to_string(),
            }),
        }
    }
    Ok(ReportBundle {
        format: REPORT_FORMAT.into(),
        aggregates: aggregate(&rows, cfg.folds),
        config: cfg.clone(),
        rows,
        failures,
    })
}

impl ReportBundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<ReportBundle> {
        let dir = dir.as_ref();
        let path = dir.join("bundle.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut b: ReportBundle = serde_json::from_str(&text)?;
        for r in &mut b.rows {
            if let Some(rel) = &r.checkpoint_path {
                r.checkpoint = Some(Checkpoint::load(dir.join(rel))?);
            }
        }
        Ok(b)
    }

    /// Combine bundles from separate invocations of the same grid.
    pub fn merge(bundles: Vec<ReportBundle>) -> Result<ReportBundle> {
        let mut it = bundles.into_iter();
        let mut out = it.next().ok_or_else(|| Error::config("nothing to merge"))?;
        for b in it {
            out.rows.extend(b.rows);
            out.failures.extend(b.failures);
        }
        out.aggregates = aggregate(&out.rows, out.config.folds);
        Ok(out)
    }

    /// Aggregates of one cell, truncated where mean accuracy first falls
    /// below the curve floor.
    pub fn curve(&self, cell_id: &str) -> Vec<&AggregateRow> {
        let mut pts: Vec<&AggregateRow> = self.aggregates.iter().filter(|a| a.cell.id() == cell_id).collect();
        pts.sort_by_key(|a| a.iteration);
        pts.into_iter()
            .take_while(|a| a.accuracy.mean >= self.config.curve_accuracy_floor)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub name: String,
    pub cells: Vec<String>,
    pub rows: usize,
    pub failures: usize,
    pub files: Vec<ManifestEntry>,
}

fn write_file(dir: &Path, rel: &str, contents: &str) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

pub fn summary_csv(b: &ReportBundle) -> String {
    let mut s = String::from(
        "precision,pruning,regularization,randomization,fold,iteration,pruned_percent,bops,accuracy,eb_mean,auc_mean,neff,checkpoint\n",
    );
    for r in &b.rows {
        let c = &r.cell;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.precision,
            c.pruning,
            c.regularization,
            c.randomization,
            r.fold,
            r.iteration,
            r.sparsity * 100.0,
            r.metrics.bops,
            r.metrics.accuracy,
            r.metrics.eb_mean,
            r.metrics.auc_mean,
            r.metrics.neff,
            r.checkpoint_path.as_deref().unwrap_or("")
        );
    }
    s
}

pub fn aggregates_csv(b: &ReportBundle) -> String {
    let mut s = String::from(
        "precision,pruning,regularization,randomization,iteration,folds,sparsity,bops_mean,bops_stderr,accuracy_mean,accuracy_stderr,eb_mean,eb_stderr,auc_mean,auc_stderr,neff_mean,neff_stderr\n",
    );
    for a in &b.aggregates {
        let c = &a.cell;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.precision,
            c.pruning,
            c.regularization,
            c.randomization,
            a.iteration,
            a.folds,
            a.sparsity.mean,
            a.bops.mean,
            a.bops.stderr,
            a.accuracy.mean,
            a.accuracy.stderr,
            a.eb.mean,
            a.eb.stderr,
            a.auc.mean,
            a.auc.stderr,
            a.neff.mean,
            a.neff.stderr
        );
    }
    s
}

pub const CURVE_HEADER: &str = "sparsity,bops,accuracy_mean,accuracy_stderr,eb_mean,eb_stderr,neff_mean,neff_stderr";

pub fn curve_csv(points: &[&AggregateRow]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for a in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            a.sparsity.mean, a.bops.mean, a.accuracy.mean, a.accuracy.stderr, a.eb.mean, a.eb.stderr, a.neff.mean, a.neff.stderr
        );
    }
    s
}

/// Write summary and aggregate tables, one curve per cell, checkpoints, the
/// bundle itself and a manifest listing every other file.
pub fn emit_report(b: &ReportBundle, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    if b.rows.is_empty() {
        return Err(Error::config("report bundle has no rows"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut emit = |rel: String, kind: &str, contents: &str| -> Result<()> {
        write_file(dir, &rel, contents)?;
        files.push(ManifestEntry {
            path: rel,
            kind: kind.into(),
        });
        Ok(())
    };

    emit("summary.csv".into(), "summary", &summary_csv(b))?;
    emit("aggregates.csv".into(), "aggregates", &aggregates_csv(b))?;
    let mut cells: Vec<String> = Vec::new();
    for r in &b.rows {
        let id = r.cell.id();
        if !cells.contains(&id) {
            cells.push(id);
        }
    }
    for id in &cells {
        emit(format!("curves/{id}.csv"), "curve", &curve_csv(&b.curve(id)))?;
    }
    for r in &b.rows {
        if let (Some(rel), Some(ck)) = (&r.checkpoint_path, &r.checkpoint) {
            emit(rel.clone(), "checkpoint", &ck.to_json_string()?)?;
        }
    }
    emit("bundle.json".into(), "bundle", &serde_json::to_string_pretty(b)?)?;

    let manifest = Manifest {
        format: REPORT_FORMAT.into(),
        name: b.config.name.clone(),
        cells,
        rows: b.rows.len(),
        failures: b.failures.len(),
        files,
    };
    write_file(dir, "manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Width search on the first grid cell's precision and regularization,
/// using the plain train/validation/test split.
pub fn run_bo(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<BoTrial>> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let splits = split(&data, &cfg.split)?;
    let standardizer = Standardizer::fit(&splits.train);
    let train = standardizer.apply(&splits.train)?;
    let val = standardizer.apply(&splits.val)?;
    let test = standardizer.apply(&splits.test)?;
    let objective = WidthObjective {
        base: cfg.model_config(&train, cfg.regularization[0]),
        quant: cfg.quant(cfg.precisions[0]),
        search: TrainConfig {
            max_epochs: cfg.bo.search_max_epochs,
            ..cfg.train.clone()
        },
        train: &train,
        val: &val,
    };
    let bo_cfg = BoConfig {
        seed: derive_seed(cfg.seed, cfg.bo.run.seed),
        ..cfg.bo.run.clone()
    };
    let log = out_dir.map(|d| d.join("trials.jsonl"));
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    if let Some(p) = &log {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let pool = thread_pool(cfg.bo.run.parallel)?;
    let mut trials = pool.install(|| {
        bo_run(&cfg.bo.space, &bo_cfg, &objective, |t| match &log {
            Some(p) => append_trial_log(p, t),
            None => Ok(()),
        })
    })?;
    let models = pool.install(|| finalize_trials(&mut trials, &objective, &cfg.train, &test));
    if let Some(d) = out_dir {
        emit_bo_report(&trials, &models, Some(&standardizer), d)?;
    }
    Ok(trials)
}

fn widths_label(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

fn emit_bo_report(
    trials: &[BoTrial],
    models: &[Option<crate::nn::Model>],
    standardizer: Option<&Standardizer>,
    dir: &Path,
) -> Result<()> {
    let mut s = String::from("trial,widths,status,objective,accuracy,bops,eb_mean,auc_mean,neff,checkpoint\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (t, m) in trials.iter().zip(models) {
        let ck = m.as_ref().map(|_| format!("checkpoints/trial{:02}.json", t.index));
        if let (Some(rel), Some(model)) = (&ck, m) {
            write_file(dir, rel, &Checkpoint::from_model(model, standardizer).to_json_string()?)?;
        }
        let r = t.metrics.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            t.index,
            widths_label(&t.widths),
            serde_json::to_value(t.status)?.as_str().unwrap_or(""),
            opt(t.objective),
            opt(r.map(|r| r.accuracy)),
            opt(r.map(|r| r.bops)),
            opt(r.map(|r| r.eb_mean)),
            opt(r.map(|r| r.auc_mean)),
            opt(r.map(|r| r.neff)),
            ck.unwrap_or_default()
        );
    }
    write_file(dir, "bo_summary.csv", &s)?;
    write_file(dir, "bo_trials.json", &serde_json::to_string_pretty(trials)?)
}

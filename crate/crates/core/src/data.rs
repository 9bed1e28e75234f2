//! Tabular classification data: ingest, splits, folds, standardization,
//! label randomization and a synthetic Gaussian-mixture generator.
//!
//! All stochastic operations are pure functions of their inputs and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Feature matrix (`num_samples x num_features`) with one integer class
/// label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::NoSamples);
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if labels.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Parse {
                row: row + 1,
                message: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            feature_names: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_features() {
            return Err(Error::Shape(format!(
                "{} feature names for {} features",
                names.len(),
                self.num_features()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::NoSamples);
        }
        Ok(Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
        })
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_features() != other.num_features() || self.num_classes != other.num_classes {
            return Err(Error::Shape("cannot concatenate datasets of different shape".into()));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        let mut d = Dataset::new(self.features.clone(), labels, self.num_classes)?;
        d.feature_names = self.feature_names.clone();
        Ok(d)
    }

    fn with_features(&self, features: Array2<f64>) -> Dataset {
        Dataset {
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Serialize as CSV (features then label). A header row is written when
    /// feature names are present.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        if let Some(names) = &self.feature_names {
            out.push_str(&names.join(","));
            out.push_str(",label\n");
        }
        for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
            for x in row {
                write!(out, "{x},").unwrap();
            }
            writeln!(out, "{label}").unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Read a CSV file whose last column is the integer class label.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, num_classes)
}

/// Parse CSV text. Row numbers in errors are 1-based line numbers.
///
/// The first line is treated as a header only when none of its fields
/// parses as a number.
pub fn parse_csv(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut header: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut labels = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if row == 1 && fields.iter().all(|f| f.parse::<f64>().is_err()) {
            header = Some(fields.iter().map(|s| s.to_string()).collect());
            width = Some(fields.len());
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::Parse {
                row,
                message: "expected at least one feature and a label".into(),
            });
        }
        match width {
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {w} columns, found {}", fields.len()),
                })
            }
            _ => width = Some(fields.len()),
        }
        let (label_field, feature_fields) = fields.split_last().unwrap();
        for (col, f) in feature_fields.iter().enumerate() {
            let x: f64 = f.parse().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric feature {f:?} in column {}", col + 1),
            })?;
            values.push(x);
        }
        let label = parse_label(label_field).ok_or_else(|| Error::Parse {
            row,
            message: format!("invalid label {label_field:?}"),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                row,
                message: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        labels.push(label);
    }

    if labels.is_empty() {
        return Err(Error::NoSamples);
    }
    let ncols = width.unwrap() - 1;
    let features = Array2::from_shape_vec((labels.len(), ncols), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let d = Dataset::new(features, labels, num_classes)?;
    match header {
        Some(mut names) => {
            names.pop();
            d.with_feature_names(names)
        }
        None => Ok(d),
    }
}

fn parse_label(field: &str) -> Option<usize> {
    if let Ok(l) = field.parse::<usize>() {
        return Some(l);
    }
    let x: f64 = field.parse().ok()?;
    (x >= 0.0 && x.fract() == 0.0 && x < usize::MAX as f64).then_some(x as usize)
}

/// Train/validation/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    /// 472,500 / 157,500 / 240,000 out of 870,000 samples.
    fn default() -> Self {
        SplitSpec {
            train_fraction: 472_500.0 / 870_000.0,
            val_fraction: 157_500.0 / 870_000.0,
            test_fraction: 240_000.0 / 870_000.0,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|&x| !x.is_finite() || x <= 0.0) {
            return Err(Error::config("split fractions must be positive"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` samples. Validation and test get
    /// `floor(fraction * n)`, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let part = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let val = part(self.val_fraction);
        let test = part(self.test_fraction);
        (n.saturating_sub(val + test), val, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}

/// Shuffle and partition into train, validation and test sets.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.sizes(d.len());
    if n_train == 0 {
        return Err(Error::EmptySplit("train"));
    }
    if n_val == 0 {
        return Err(Error::EmptySplit("val"));
    }
    if n_test == 0 {
        return Err(Error::EmptySplit("test"));
    }
    let idx = shuffled_indices(d.len(), spec.seed);
    Ok(Splits {
        train: d.subset(&idx[..n_train])?,
        val: d.subset(&idx[n_train..n_train + n_val])?,
        test: d.subset(&idx[n_train + n_val..])?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Dataset,
    pub val: Dataset,
}

/// Partition the pool into `k` near-equal parts (the first `n % k` parts
/// get one extra sample); fold `i` validates on part `i`.
pub fn kfold(pool: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    let n = pool.len();
    if n < k {
        return Err(Error::config(format!("{n} samples cannot form {k} folds")));
    }
    let idx = shuffled_indices(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for i in 0..k {
        bounds.push(bounds[i] + base + usize::from(i < extra));
    }
    (0..k)
        .map(|i| {
            let val = &idx[bounds[i]..bounds[i + 1]];
            let train: Vec<usize> = idx[..bounds[i]]
                .iter()
                .chain(&idx[bounds[i + 1]..])
                .copied()
                .collect();
            Ok(Fold {
                train: pool.subset(&train)?,
                val: pool.subset(val)?,
            })
        })
        .collect()
}

/// Per-feature z-score transform. Features with zero spread map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation of each training column.
    pub fn fit(train: &Dataset) -> Standardizer {
        let x = train.features();
        let n = x.nrows() as f64;
        let mean: Array1<f64> = x.sum_axis(Axis(0)) / n;
        let var: Array1<f64> = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, &m)| col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            .collect();
        Standardizer {
            mean: mean.to_vec(),
            std: var.iter().map(|v| v.sqrt()).collect(),
        }
    }

    pub fn identity(num_features: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; num_features],
            std: vec![1.0; num_features],
        }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| if s > 0.0 { (v - m) / s } else { 0.0 });
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        Ok(d.with_features(self.transform(d.features())?))
    }

    fn check(&self, ncols: usize) -> Result<()> {
        if ncols != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features, got {ncols}",
                self.mean.len()
            )));
        }
        Ok(())
    }
}

/// Replace the labels of exactly `round(fraction * n)` seed-chosen samples
/// with uniform draws over all classes. The redraw may reproduce the
/// original class.
pub fn randomize_labels(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("randomization fraction {fraction} not in [0, 1]")));
    }
    let n = d.len();
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Ok(d.clone());
    }
    let mut rng = rng_from_seed(seed);
    let chosen = index::sample(&mut rng, n, count.min(n));
    let mut labels = d.labels().to_vec();
    for i in chosen {
        labels[i] = rng.random_range(0..d.num_classes());
    }
    d.with_labels(labels)
}

/// Parameters of the synthetic Gaussian-mixture generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_separation: f64,
    pub seed: u64,
}

/// Balanced Gaussian mixture with unit covariance.
///
/// When `num_classes <= num_features` the class means are `sep / sqrt(2)`
/// times seed-drawn orthonormal vectors, so every pair of means is exactly
/// `class_separation` apart. Otherwise they are random directions of the
/// same norm.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        num_samples,
        num_features,
        num_classes,
        class_separation,
        seed,
    } = *spec;
    if num_samples == 0 || num_features == 0 || num_classes == 0 {
        return Err(Error::config("synthetic dataset counts must be positive"));
    }
    let means = class_means(num_classes, num_features, class_separation, derive_seed(seed, 1));

    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    labels.shuffle(&mut rng);

    let mut features = Array2::<f64>::zeros((num_samples, num_features));
    for (mut row, &c) in features.rows_mut().into_iter().zip(&labels) {
        for (x, &m) in row.iter_mut().zip(means.row(c)) {
            let noise: f64 = rng.sample(StandardNormal);
            *x = m + noise;
        }
    }
    Dataset::new(features, labels, num_classes)
}

fn class_means(classes: usize, dim: usize, sep: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut dirs = Array2::<f64>::zeros((classes, dim));
    for mut row in dirs.rows_mut() {
        row.mapv_inplace(|_| rng.sample(StandardNormal));
    }
    // Gram-Schmidt when an orthonormal set exists.
    for c in 0..classes {
        if c < dim {
            for p in 0..c {
                let proj = dirs.row(c).dot(&dirs.row(p));
                let prev = dirs.row(p).to_owned();
                dirs.row_mut(c).scaled_add(-proj, &prev);
            }
        }
        let norm = dirs.row(c).dot(&dirs.row(c)).sqrt();
        dirs.row_mut(c).mapv_inplace(|v| v / norm);
    }
    dirs * (sep / std::f64::consts::SQRT_2)
}

/// Per-class feature means, used by simple baselines.
pub fn class_centroids(d: &Dataset) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((d.num_classes(), d.num_features()));
    let counts = d.class_counts();
    for (row, &c) in d.features().rows().into_iter().zip(d.labels()) {
        let mut s = sums.slice_mut(s![c, ..]);
        s += &row;
    }
    for (mut s, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            s.mapv_inplace(|v| v / n as f64);
        }
    }
    sums
}

//! Gaussian-process Bayesian optimization over hidden-layer widths.
//!
//! The surrogate is an exact GP with an isotropic squared-exponential kernel
//! whose hyperparameters are picked from a fixed log-grid by marginal
//! likelihood. Proposals maximize expected improvement (minimization) over the
//! log-scaled unit cube; pending evaluations are imputed with the posterior
//! mean so up to `parallel` trials can be in flight at once.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{init_model, train, MlpConfig, Model, TrainConfig};
use crate::quant::QuantSpec;
use crate::rng::{derive_seed, rng_from_seed, QapRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lower: vec![4; 3],
            upper: vec![64; 3],
        }
    }
}

impl SearchSpace {
    pub fn new(lower: Vec<usize>, upper: Vec<usize>) -> Result<Self> {
        let s = SearchSpace { lower, upper };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::config("search space bounds must be non-empty and of equal length"));
        }
        for (&lo, &hi) in self.lower.iter().zip(&self.upper) {
            if lo < 1 || lo > hi {
                return Err(Error::config(format!("invalid width range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Number of distinct width tuples, saturating at `usize::MAX`.
    pub fn size(&self) -> usize {
        self.lower
            .iter()
            .zip(&self.upper)
            .fold(1usize, |acc, (&lo, &hi)| acc.saturating_mul(hi - lo + 1))
    }

    pub fn contains(&self, widths: &[usize]) -> bool {
        widths.len() == self.dim()
            && widths
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&w, (&lo, &hi))| lo <= w && w <= hi)
    }

    pub fn encode(&self, widths: &[usize]) -> Vec<f64> {
        widths
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&w, (&lo, &hi))| {
                if lo == hi {
                    0.0
                } else {
                    ((w as f64).ln() - (lo as f64).ln()) / ((hi as f64).ln() - (lo as f64).ln())
                }
            })
            .collect()
    }

    pub fn decode(&self, u: &[f64]) -> Vec<usize> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&u, (&lo, &hi))| {
                let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
                let w = (a + u.clamp(0.0, 1.0) * (b - a)).exp().round() as usize;
                w.clamp(lo, hi)
            })
            .collect()
    }

    /// The unobserved tuple closest (in encoded space) to `u`, searching
    /// outward in integer shells around the rounded point.
    pub fn nearest_unobserved(&self, u: &[f64], taken: &BTreeSet<Vec<usize>>) -> Result<Vec<usize>> {
        let centre = self.decode(u);
        if !taken.contains(&centre) {
            return Ok(centre);
        }
        if taken.iter().filter(|w| self.contains(w)).count() >= self.size() {
            return Err(Error::SpaceExhausted);
        }
        let max_radius = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| hi - lo)
            .max()
            .unwrap_or(0);
        for r in 1..=max_radius {
            let mut best: Option<(f64, Vec<usize>)> = None;
            self.for_each_in_shell(&centre, r, &mut |w| {
                if taken.contains(w) {
                    return;
                }
                let e = self.encode(w);
                let d: f64 = e.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.as_ref().is_none_or(|(bd, bw)| d < *bd || (d == *bd && w < bw)) {
                    best = Some((d, w.to_vec()));
                }
            });
            if let Some((_, w)) = best {
                return Ok(w);
            }
        }
        Err(Error::SpaceExhausted)
    }

    fn for_each_in_shell(&self, centre: &[usize], r: usize, f: &mut impl FnMut(&[usize])) {
        let ranges: Vec<(usize, usize)> = centre
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&c, (&lo, &hi))| (c.saturating_sub(r).max(lo), (c + r).min(hi)))
            .collect();
        let mut w: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            let on_shell = w.iter().zip(centre).any(|(&a, &c)| a.abs_diff(c) == r);
            if on_shell {
                f(&w);
            }
            let mut i = 0;
            loop {
                if i == w.len() {
                    return;
                }
                if w[i] < ranges[i].1 {
                    w[i] += 1;
                    break;
                }
                w[i] = ranges[i].0;
                i += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.length_scale) && ok(self.signal_variance) && self.noise_variance.is_finite() && self.noise_variance >= 0.0)
        {
            return Err(Error::config("kernel parameters must be positive and finite"));
        }
        Ok(())
    }
}

/// Exact GP regression posterior with a constant prior mean of `mean(y)`.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    kernel: KernelParams,
    prior_mean: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

pub fn gp_fit(x: &[Vec<f64>], y: &[f64], kernel: KernelParams) -> Result<GpPosterior> {
    kernel.validate()?;
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::config("a GP needs at least two observations with matching outcomes"));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("GP inputs have inconsistent dimensions".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("GP outcomes must be finite".into()));
    }
    let prior_mean = y.iter().sum::<f64>() / n as f64;
    let k = DMatrix::from_fn(n, n, |i, j| kernel.covariance(&x[i], &x[j]));
    // Duplicate or near-duplicate inputs make K singular; escalate diagonal
    // jitter until the factorization succeeds.
    for step in JITTER_LADDER {
        let jitter = step * kernel.signal_variance;
        let mut kn = k.clone();
        for i in 0..n {
            kn[(i, i)] += kernel.noise_variance + jitter;
        }
        if let Some(chol) = kn.cholesky() {
            let resid = DVector::from_iterator(n, y.iter().map(|v| v - prior_mean));
            let alpha = chol.solve(&resid);
            return Ok(GpPosterior {
                x: x.to_vec(),
                y: y.to_vec(),
                kernel,
                prior_mean,
                jitter,
                chol,
                alpha,
            });
        }
    }
    Err(Error::Numerical("kernel matrix is not positive definite".into()))
}

impl GpPosterior {
    pub fn kernel(&self) -> KernelParams {
        self.kernel
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    /// Extra diagonal added beyond the noise variance to make K factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn best_outcome(&self) -> f64 {
        self.y.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Predictive mean and standard deviation of the latent function.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let ks = DVector::from_iterator(n, self.x.iter().map(|xi| self.kernel.covariance(xi, x)));
        let mean = self.prior_mean + ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let var = self.kernel.signal_variance - v.dot(&v);
        (mean, var.max(0.0).sqrt())
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len();
        let resid = DVector::from_iterator(n, self.y.iter().map(|v| v - self.prior_mean));
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * resid.dot(&self.alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Refit with `(x, μ(x))` appended, keeping the kernel.
    pub fn with_fantasy(&self, x: &[f64]) -> Result<GpPosterior> {
        let (mu, _) = self.predict(x);
        let mut xs = self.x.clone();
        let mut ys = self.y.clone();
        xs.push(x.to_vec());
        ys.push(mu);
        gp_fit(&xs, &ys, self.kernel)
    }
}

pub fn gp_predict(gp: &GpPosterior, x: &[f64]) -> (f64, f64) {
    gp.predict(x)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Fit a GP choosing (ℓ, σ_f², σ_n²) from a 10×10×5 log-grid by marginal
/// likelihood. Variances are scaled by the sample variance of `y`.
pub fn gp_fit_auto(x: &[Vec<f64>], y: &[f64]) -> Result<GpPosterior> {
    if y.is_empty() {
        return Err(Error::config("a GP needs at least two observations with matching outcomes"));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
    let scale = if var > 1e-12 { var } else { 1.0 };
    let mut best: Option<(f64, GpPosterior)> = None;
    for &ell in &log_grid(0.05, 5.0, 10) {
        for &sf in &log_grid(0.1, 10.0, 10) {
            for &sn in &log_grid(1e-8, 1e-2, 5) {
                let params = KernelParams {
                    length_scale: ell,
                    signal_variance: sf * scale,
                    noise_variance: sn * scale,
                };
                let Ok(gp) = gp_fit(x, y, params) else { continue };
                let lml = gp.log_marginal_likelihood();
                if lml.is_finite() && best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, gp));
                }
            }
        }
    }
    best.map(|(_, gp)| gp)
        .ok_or_else(|| Error::Numerical("no kernel hyperparameters gave a valid fit".into()))
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Expected improvement below `f_best` for a minimization problem.
pub fn expected_improvement(mu: f64, sigma: f64, f_best: f64) -> f64 {
    let diff = f_best - mu;
    if sigma <= 0.0 {
        return diff.max(0.0);
    }
    let z = diff / sigma;
    (diff * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionOptions {
    pub random_starts: usize,
    pub refined_starts: usize,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        AcquisitionOptions {
            random_starts: 256,
            refined_starts: 8,
        }
    }
}

/// Below this EI the acquisition is treated as flat and the search falls back
/// to the point of largest posterior variance.
const EI_FLOOR: f64 = 1e-12;

fn maximize_on_cube(dim: usize, opts: &AcquisitionOptions, rng: &mut QapRng, f: &impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut starts: Vec<(f64, Vec<f64>)> = (0..opts.random_starts.max(1))
        .map(|_| {
            let u: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            (f(&u), u)
        })
        .collect();
    starts.sort_by(|a, b| b.0.total_cmp(&a.0));
    starts.truncate(opts.refined_starts.max(1));
    let mut best = starts[0].clone();
    for (mut val, mut u) in starts {
        let mut step = 0.05;
        while step >= 1e-4 {
            let mut improved = false;
            for i in 0..dim {
                for dir in [1.0, -1.0] {
                    let mut cand = u.clone();
                    cand[i] = (cand[i] + dir * step).clamp(0.0, 1.0);
                    let v = f(&cand);
                    if v > val {
                        val = v;
                        u = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if val > best.0 {
            best = (val, u);
        }
    }
    (best.1, best.0)
}

/// Maximizer of EI over `[0,1]^dim`, or of predictive std when EI is flat.
pub fn suggest_point(gp: &GpPosterior, opts: &AcquisitionOptions, rng: &mut QapRng) -> Vec<f64> {
    let dim = gp.x[0].len();
    let f_best = gp.best_outcome();
    let (u, ei) = maximize_on_cube(dim, opts, rng, &|u| {
        let (m, s) = gp.predict(u);
        expected_improvement(m, s, f_best)
    });
    if ei > EI_FLOOR {
        return u;
    }
    maximize_on_cube(dim, opts, rng, &|u| gp.predict(u).1).0
}

/// Integer widths maximizing EI, never one already in `taken`.
pub fn suggest(
    gp: &GpPosterior,
    space: &SearchSpace,
    taken: &BTreeSet<Vec<usize>>,
    opts: &AcquisitionOptions,
    rng: &mut QapRng,
) -> Result<Vec<usize>> {
    if gp.x[0].len() != space.dim() {
        return Err(Error::Shape("GP dimension does not match the search space".into()));
    }
    let u = suggest_point(gp, opts, rng);
    space.nearest_unobserved(&u, taken)
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().all(|p| !c.is_multiple_of(*p)) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Halton points in `[0,1)^dim` with seeded per-base digit permutations
/// (zero fixed so the expansion stays finite). Index 0 is skipped.
pub fn scrambled_halton(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let bases = first_primes(dim);
    let perms: Vec<Vec<u64>> = bases
        .iter()
        .map(|&b| {
            let mut p: Vec<u64> = (1..b).collect();
            for i in (1..p.len()).rev() {
                let j = rng.random_range(0..=i);
                p.swap(i, j);
            }
            std::iter::once(0).chain(p).collect()
        })
        .collect();
    (1..=n as u64)
        .map(|i| {
            bases
                .iter()
                .zip(&perms)
                .map(|(&b, perm)| {
                    let (mut k, mut f, mut r) = (i, 1.0, 0.0);
                    while k > 0 {
                        f /= b as f64;
                        r += f * perm[(k % b) as usize] as f64;
                        k /= b;
                    }
                    r
                })
                .collect()
        })
        .collect()
}

/// Sequential BO on the continuous cube `[0,1]^dim`: `initial` Halton points,
/// then EI proposals, `evaluations` objective calls in total.
pub fn bo_minimize(
    dim: usize,
    initial: usize,
    evaluations: usize,
    seed: u64,
    f: impl Fn(&[f64]) -> f64,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let opts = AcquisitionOptions::default();
    let mut obs: Vec<(Vec<f64>, f64)> = scrambled_halton(initial.min(evaluations), dim, seed)
        .into_iter()
        .map(|u| {
            let y = f(&u);
            (u, y)
        })
        .collect();
    while obs.len() < evaluations {
        let u = if obs.len() < 2 {
            (0..dim).map(|_| rng.random::<f64>()).collect()
        } else {
            let xs: Vec<Vec<f64>> = obs.iter().map(|o| o.0.clone()).collect();
            let ys: Vec<f64> = obs.iter().map(|o| o.1).collect();
            suggest_point(&gp_fit_auto(&xs, &ys)?, &opts, &mut rng)
        };
        let y = f(&u);
        obs.push((u, y));
    }
    Ok(obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Proposed,
    Observed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrial {
    pub index: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub status: TrialStatus,
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub budget: usize,
    pub initial: usize,
    pub parallel: usize,
    pub seed: u64,
    pub acquisition: AcquisitionOptions,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            budget: 20,
            initial: 5,
            parallel: 3,
            seed: 0,
            acquisition: AcquisitionOptions::default(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.parallel == 0 {
            return Err(Error::config("budget and parallel must be at least 1"));
        }
        Ok(())
    }
}

/// Something to minimize over width tuples. Must be deterministic in
/// `(widths, seed)` for runs to be reproducible.
pub trait Objective: Sync {
    fn evaluate(&self, widths: &[usize], seed: u64) -> Result<f64>;
}

impl<F> Objective for F
where
    F: Fn(&[usize], u64) -> Result<f64> + Sync,
{
    fn evaluate(&self, widths: &[usize], seed: u64) -> Result<f64> {
        self(widths, seed)
    }
}

/// Run `cfg.budget` trials: a scrambled Halton design of `cfg.initial`
/// points, then EI proposals in batches of at most `cfg.parallel`.
/// Evaluations within a batch run concurrently; failures are recorded and
/// the loop continues.
pub fn bo_run(
    space: &SearchSpace,
    cfg: &BoConfig,
    objective: &impl Objective,
    mut on_trial: impl FnMut(&BoTrial) -> Result<()>,
) -> Result<Vec<BoTrial>> {
    space.validate()?;
    cfg.validate()?;
    if cfg.budget > space.size() {
        return Err(Error::SpaceExhausted);
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, u64::MAX));
    let mut taken: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut design: Vec<Vec<usize>> = Vec::new();
    for u in scrambled_halton(cfg.initial.min(cfg.budget), space.dim(), cfg.seed) {
        let w = space.nearest_unobserved(&u, &taken)?;
        taken.insert(w.clone());
        design.push(w);
    }
    let mut design = design.into_iter();
    let mut trials: Vec<BoTrial> = Vec::with_capacity(cfg.budget);

    while trials.len() < cfg.budget {
        let q = cfg.parallel.min(cfg.budget - trials.len());
        let mut batch: Vec<Vec<usize>> = design.by_ref().take(q).collect();
        if batch.is_empty() {
            let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = trials
                .iter()
                .filter(|t| t.status == TrialStatus::Observed)
                .map(|t| (space.encode(&t.widths), t.objective.unwrap_or(f64::NAN)))
                .unzip();
            let mut gp = if xs.len() >= 2 { Some(gp_fit_auto(&xs, &ys)?) } else { None };
            for j in 0..q {
                let w = match &gp {
                    Some(g) => suggest(g, space, &taken, &cfg.acquisition, &mut rng)?,
                    None => {
                        let u: Vec<f64> = (0..space.dim()).map(|_| rng.random::<f64>()).collect();
                        space.nearest_unobserved(&u, &taken)?
                    }
                };
                taken.insert(w.clone());
                if j + 1 < q {
                    if let Some(g) = &gp {
                        gp = Some(g.with_fantasy(&space.encode(&w))?);
                    }
                }
                batch.push(w);
            }
        }
        let base = trials.len();
        let outcomes: Vec<Result<f64>> = batch
            .par_iter()
            .enumerate()
            .map(|(j, w)| objective.evaluate(w, derive_seed(cfg.seed, (base + j) as u64)))
            .collect();
        for (j, (w, out)) in batch.into_iter().zip(outcomes).enumerate() {
            let index = base + j;
            let mut t = BoTrial {
                index,
                widths: w,
                seed: derive_seed(cfg.seed, index as u64),
                status: TrialStatus::Observed,
                objective: None,
                error: None,
                metrics: None,
            };
            match out {
                Ok(v) if v.is_finite() => t.objective = Some(v),
                Ok(v) => {
                    t.status = TrialStatus::Failed;
                    t.error = Some(format!("non-finite objective {v}"));
                }
                Err(e) => {
                    t.status = TrialStatus::Failed;
                    t.error = Some(e.to_string());
                }
            }
            on_trial(&t)?;
            trials.push(t);
        }
    }
    Ok(trials)
}

/// Validation cross-entropy of a quantization-aware model with the given
/// hidden widths, trained under `search`.
#[derive(Debug, Clone)]
pub struct WidthObjective<'a> {
    pub base: MlpConfig,
    pub quant: QuantSpec,
    pub search: TrainConfig,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

impl WidthObjective<'_> {
    pub fn fit(&self, widths: &[usize], seed: u64, tc: &TrainConfig) -> Result<Model> {
        let cfg = MlpConfig {
            hidden_widths: widths.to_vec(),
            ..self.base.clone()
        };
        let mut model = init_model(&cfg, &self.quant, seed)?;
        let tc = TrainConfig { seed, ..tc.clone() };
        train(&mut model, self.train, self.val, &tc)?;
        Ok(model)
    }
}

impl Objective for WidthObjective<'_> {
    fn evaluate(&self, widths: &[usize], seed: u64) -> Result<f64> {
        let model = self.fit(widths, seed, &self.search)?;
        Ok(model.evaluate_loss(self.val)?.classification)
    }
}

/// Retrain every observed trial under `full` and attach its test metrics.
/// Returns the retrained models in trial order (`None` for failed trials).
pub fn finalize_trials(
    trials: &mut [BoTrial],
    objective: &WidthObjective<'_>,
    full: &TrainConfig,
    test: &Dataset,
) -> Vec<Option<Model>> {
    let results: Vec<Option<Result<(Model, MetricsReport)>>> = trials
        .par_iter()
        .map(|t| {
            (t.status == TrialStatus::Observed).then(|| {
                let m = objective.fit(&t.widths, t.seed, full)?;
                let r = evaluate(&m, test)?;
                Ok((m, r))
            })
        })
        .collect();
    trials
        .iter_mut()
        .zip(results)
        .map(|(t, r)| match r {
            Some(Ok((m, report))) => {
                t.metrics = Some(report);
                Some(m)
            }
            Some(Err(e)) => {
                t.error = Some(format!("final retrain failed: {e}"));
                None
            }
            None => None,
        })
        .collect()
}

pub fn append_trial_log(path: impl AsRef<Path>, trial: &BoTrial) -> Result<()> {
    let path = path.as_ref();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(trial)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_trial_log(path: impl AsRef<Path>) -> Result<Vec<BoTrial>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?))
        .collect()
}

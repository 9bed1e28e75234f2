//! `qap`: run quantization-aware pruning experiments from a config file or flags.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qap_core::checkpoint::Checkpoint;
use qap_core::data::{load_csv, synth_generate, SynthSpec};
use qap_core::experiment::{emit_report, run_bo, run_experiment, DataSource, ExperimentConfig, Pruning, Regularization, ReportBundle};
use qap_core::metrics::evaluate;
use qap_core::quant::Precision;

#[derive(Parser, Debug)]
#[command(name = "qap", version, about = "Quantization-aware pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a labelled CSV (or generate a synthetic one) and write it back normalized.
    Ingest(IngestArgs),
    /// Quantization-aware training without pruning.
    Train(GridArgs),
    /// Iterative pruning of quantization-aware models.
    Qap(GridArgs),
    /// Bayesian optimization over hidden-layer widths.
    Bo(BoArgs),
    /// Metrics of a saved checkpoint on a labelled CSV.
    Eval(EvalArgs),
    /// Re-aggregate one or more report directories into a single report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Input CSV; omit to generate synthetic data.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    num_classes: usize,
    /// Where to write the normalized CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    features: usize,
    #[arg(long, default_value_t = qap_core::experiment::DESK_SEPARATION)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Default)]
struct GridArgs {
    /// TOML or JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Labelled CSV input (replaces the configured data source).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Comma-separated list, e.g. `float32,12,6,4`.
    #[arg(long, value_delimiter = ',')]
    precisions: Vec<Precision>,
    /// Comma-separated list of `ft`, `lt`, `none`.
    #[arg(long, value_delimiter = ',')]
    pruning: Vec<Pruning>,
    /// Comma-separated list of `bn+l1`, `bn`, `l1`, `none`.
    #[arg(long, value_delimiter = ',')]
    regularization: Vec<Regularization>,
    #[arg(long)]
    l1_lambda: Option<f64>,
    /// Comma-separated label-randomization fractions.
    #[arg(long, value_delimiter = ',')]
    randomization: Vec<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_checkpoints: bool,
    /// Report directory; defaults to `$QAP_OUTPUT_ROOT/<name>`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, env = "QAP_OUTPUT_ROOT", default_value = "qap-output")]
    output_root: PathBuf,
}

#[derive(Args, Debug)]
struct BoArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    search_max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled CSV in raw (unstandardized) units.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report directories written by `train`, `qap` or earlier `report` runs.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

impl GridArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.name {
            cfg.name = v.clone();
        }
        match (&self.csv, self.num_classes) {
            (Some(path), n) => {
                cfg.data = DataSource::Csv {
                    path: path.clone(),
                    num_classes: n.unwrap_or(5),
                }
            }
            (None, Some(n)) => match &mut cfg.data {
                DataSource::Csv { num_classes, .. } => *num_classes = n,
                DataSource::Synthetic(s) => s.num_classes = n,
            },
            (None, None) => {}
        }
        if !self.precisions.is_empty() {
            cfg.precisions = self.precisions.clone();
        }
        if !self.pruning.is_empty() {
            cfg.pruning = self.pruning.clone();
        }
        if !self.regularization.is_empty() {
            cfg.regularization = self.regularization.clone();
        }
        if !self.randomization.is_empty() {
            cfg.randomization = self.randomization.clone();
        }
        if !self.hidden.is_empty() {
            cfg.hidden_widths = self.hidden.clone();
        }
        if let Some(v) = self.l1_lambda {
            cfg.l1_lambda = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.train.patience = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.schedule.max_iterations = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if self.no_checkpoints {
            cfg.save_checkpoints = false;
        }
        if let Some(v) = &self.output {
            cfg.output_dir = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn output_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir.clone().unwrap_or_else(|| self.output_root.join(&cfg.name))
    }
}

fn run_grid(args: &GridArgs, force_no_pruning: bool) -> Result<bool> {
    let mut cfg = args.resolve()?;
    if force_no_pruning {
        cfg.pruning = vec![Pruning::None];
    }
    let out = args.output_dir(&cfg);
    eprintln!("running {} cells x {} folds", cfg.cells().len(), cfg.folds);
    let bundle = run_experiment(&cfg)?;
    for f in &bundle.failures {
        eprintln!("run {} fold {} failed: {}", f.cell.id(), f.fold, f.error);
    }
    if !bundle.rows.is_empty() {
        let manifest = emit_report(&bundle, &out).with_context(|| format!("writing report to {}", out.display()))?;
        eprintln!("wrote {} files to {}", manifest.files.len() + 1, out.display());
    }
    Ok(bundle.failures.is_empty())
}

fn run_bo_cmd(args: &BoArgs) -> Result<bool> {
    let mut cfg = args.grid.resolve()?;
    if let Some(v) = args.budget {
        cfg.bo.run.budget = v;
    }
    if let Some(v) = args.parallel {
        cfg.bo.run.parallel = v;
    }
    if let Some(v) = args.search_max_epochs {
        cfg.bo.search_max_epochs = v;
    }
    let out = args.grid.output_dir(&cfg);
    let trials = run_bo(&cfg, Some(&out))?;
    let failed = trials.iter().filter(|t| t.error.is_some()).count();
    eprintln!("{} trials ({failed} failed), results in {}", trials.len(), out.display());
    Ok(failed == 0)
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let d = match &args.input {
        Some(p) => load_csv(p, args.num_classes).with_context(|| format!("reading {}", p.display()))?,
        None => synth_generate(&SynthSpec {
            num_samples: args.samples,
            num_features: args.features,
            num_classes: args.num_classes,
            class_separation: args.separation,
            seed: args.seed,
        })?,
    };
    eprintln!(
        "{} samples, {} features, class counts {:?}",
        d.len(),
        d.num_features(),
        d.class_counts()
    );
    if let Some(out) = &args.output {
        d.write_csv(out)?;
    } else if args.input.is_none() {
        bail!("--output is required when generating synthetic data");
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let model = ck.to_model()?;
    let num_classes = args.num_classes.unwrap_or(model.config.output_dim);
    let mut d = load_csv(&args.data, num_classes)?;
    if let Some(s) = &ck.standardizer {
        d = s.apply(&d)?;
    }
    let report = evaluate(&model, &d)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report(args: &ReportArgs) -> Result<bool> {
    let bundles = args
        .inputs
        .iter()
        .map(|p| ReportBundle::load(p).with_context(|| format!("reading report in {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = ReportBundle::merge(bundles)?;
    emit_report(&merged, &args.output)?;
    Ok(merged.failures.is_empty())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Ingest(a) => ingest(a).map(|_| true),
        Command::Train(a) => run_grid(a, true),
        Command::Qap(a) => run_grid(a, false),
        Command::Bo(a) => run_bo_cmd(a),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}


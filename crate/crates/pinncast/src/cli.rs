//! Operator entry point: dataset generation, training, evaluation, the
//! component study, and verification commands.
//!
//! Every command is reproducible from its flags and seed; rerunning
//! produces byte-identical CSVs and checkpoints. Exit codes: 0 success,
//! 1 usage error, 2 invariant failure, 3 numerical failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::checks;
use crate::data::{Dataset, GeneratorConfig, Split};
use crate::model::{ModelConfig, Variant};
use crate::odesolve::OdeMethod;
use crate::physics::AccWeighting;
use crate::train::{evaluate, train, LeadSampling, RunConfig, TrainSummary};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pinncast", version, about = "Continuous-depth transformer forecaster for gridded fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic advection dataset (manifest + binary blob).
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-variable, per-lead RMSE and ACC.
    Eval(EvalArgs),
    /// Train and compare the four architecture/objective variants.
    Ablate(AblateArgs),
    /// Run a verification suite and print a pass/fail table.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output basename; writes <out>.manifest and <out>.bin.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Grid as HxW, e.g. 16x32.
    #[arg(long, default_value = "16x32")]
    pub grid: String,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    /// Wind bound in grid cells per hour.
    #[arg(long, default_value_t = 0.04)]
    pub wind_scale: f64,
    /// Lead times in hours, comma separated.
    #[arg(long, default_value = "6,12,18,24,36", value_delimiter = ',')]
    pub leads: Vec<f64>,
    /// Split sizes as train,val,test counts; default 80/10/10.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 1024)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Residual integrator.
    #[arg(long, value_enum, default_value_t = MethodArg::Dopri5)]
    pub ode_method: MethodArg,
    #[arg(long, default_value_t = 8)]
    pub rk4_steps: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Dopri5,
    Rk4,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeadSamplingArg {
    Fixed,
    Uniform,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantArg {
    Vanilla,
    TwoBranch,
    Node,
    Full,
}

impl VariantArg {
    fn variant(self) -> Variant {
        match self {
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::TwoBranch => Variant::TwoBranch,
            VariantArg::Node => Variant::Node,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset basename (expects <dataset>.manifest and <dataset>.bin).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory for config.json, train_log.csv, checkpoint.ckpt.
    #[arg(long)]
    pub out: PathBuf,
    /// Full RunConfig as JSON; flags below override nothing when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    /// Kinetic penalty weight.
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    /// Thermodynamic penalty weight.
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    /// Architecture/objective combination to train.
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = LeadSamplingArg::Fixed)]
    pub lead_sampling: LeadSamplingArg,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Lead times (hours) to score; each must exist in the dataset.
    #[arg(long, default_value = "6,12,18,24,36", value_delimiter = ',')]
    pub lead_times: Vec<f64>,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    /// Score the truth against itself (pipeline debug).
    #[arg(long, default_value_t = false)]
    pub truth: bool,
    /// Leave the ACC numerator unweighted (the literal printed form).
    #[arg(long, default_value_t = false)]
    pub acc_as_printed: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory; one subdirectory per variant plus comparison.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    /// Kinetic penalty weight for the full variant.
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    /// Thermodynamic penalty weight for the full variant.
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    /// Worker threads for the four runs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub device_threads: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// One of: grad, ode, attention, physics, all.
    pub mode: String,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ModelConfig) {
        cfg.patch_size = self.patch_size;
        cfg.embed_dim = self.embed_dim;
        cfg.depth = self.depth;
        cfg.heads = self.heads;
        cfg.dropout = self.dropout;
        cfg.ode.method = match self.ode_method {
            MethodArg::Dopri5 => OdeMethod::Dopri5,
            MethodArg::Rk4 => OdeMethod::Rk4Fixed,
        };
        cfg.ode.rk4_steps = self.rk4_steps;
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let (h, w) = parse_grid(&args.grid)?;
    let mut cfg = GeneratorConfig::new(args.seed, h, w, args.samples);
    cfg.n_blobs = args.blobs;
    cfg.wind_scale = args.wind_scale;
    cfg.lead_hours = args.leads.clone();
    if let Some(split) = &args.split {
        if split.len() != 3 {
            return Err(Error::Config(format!(
                "--split wants train,val,test counts, got {split:?}"
            )));
        }
        cfg.split_counts = (split[0], split[1], split[2]);
    }
    let ds = Dataset::generate(&cfg)?;
    ds.save(&args.out)?;
    println!(
        "wrote {}.manifest and {}.bin: {} samples on {}x{}, leads {:?} h, sha256 {}",
        args.out.display(),
        args.out.display(),
        ds.manifest.n_samples,
        ds.manifest.grid_h,
        ds.manifest.grid_w,
        ds.manifest.lead_hours,
        ds.manifest.sha256
    );
    Ok(())
}

fn parse_grid(grid: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = grid.split('x').collect();
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad grid spec {grid:?}, want HxW")))
    };
    match parts.as_slice() {
        [h, w] => Ok((parse(h)?, parse(w)?)),
        _ => Err(Error::Config(format!("bad grid spec {grid:?}, want HxW"))),
    }
}

/// Builds the run configuration from a config file or flags and trains.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let ds = Dataset::load(&args.dataset)?;
    let run = match &args.config {
        Some(path) => {
            let raw = crate::read_file(path)?;
            serde_json::from_slice::<RunConfig>(&raw)
                .map_err(|e| Error::Format(format!("run config: {e}")))?
        }
        None => {
            let mut cfg = ModelConfig::new(
                ds.manifest.variables.clone(),
                ds.manifest.grid_h,
                ds.manifest.grid_w,
            );
            args.model.apply(&mut cfg);
            args.variant.variant().apply(&mut cfg);
            let mut run = RunConfig::new(cfg);
            run.loss = args.variant.variant().loss_weights();
            if let VariantArg::Full = args.variant {
                run.loss.alpha = args.alpha;
                run.loss.beta = args.beta;
            }
            run.lr = args.lr;
            run.batch_size = args.batch_size;
            run.epochs = args.epochs;
            run.seed = args.seed;
            run.patience = args.patience;
            run.lead_sampling = match args.lead_sampling {
                LeadSamplingArg::Fixed => LeadSampling::Fixed,
                LeadSamplingArg::Uniform => LeadSampling::Uniform,
            };
            run
        }
    };
    let summary = train(&run, &ds, &args.out)?;
    println!(
        "trained {} epochs, best val {:.6e} at epoch {}, checkpoint {}",
        summary.epochs_run,
        summary.best_val,
        summary.best_epoch,
        summary.checkpoint.display()
    );
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ds = Dataset::load(&args.dataset)?;
    let model = checkpoint::load(&args.checkpoint)?;
    if model.cfg.grid_h != ds.manifest.grid_h
        || model.cfg.grid_w != ds.manifest.grid_w
        || model.cfg.var_names != ds.manifest.variables
    {
        return Err(Error::Config(
            "checkpoint grid/variables do not match the dataset".into(),
        ));
    }
    let weighting = if args.acc_as_printed {
        AccWeighting::DenominatorOnly
    } else {
        AccWeighting::Weighted
    };
    let mut csv = String::from("variable,lead_hours,rmse,acc\n");
    for &lead in &args.lead_times {
        let lead_idx = ds.lead_index(lead).ok_or_else(|| {
            Error::Config(format!(
                "lead {lead} h not in dataset (available: {:?})",
                ds.manifest.lead_hours
            ))
        })?;
        let metrics = evaluate(
            &model,
            &ds,
            Split::Test,
            lead_idx,
            args.batch_size,
            weighting,
            args.truth,
        )?;
        for (i, var) in metrics.variables.iter().enumerate() {
            csv.push_str(&format!("{var},{lead},{},{}\n", metrics.rmse[i], metrics.acc[i]));
        }
    }
    crate::write_file(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

/// Per-variant results of the component study.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_val: f64,
    /// sqrt of the latitude-weighted MSE on the validation split, physical
    /// units; comparable across variants (unlike best_val, whose objective
    /// differs when physics weights are on).
    pub val_rmse: f64,
    pub test_rmse_mean: f64,
    pub test_lat_mse: f64,
    pub test_kinetic: f64,
}

/// Trains all four variants under one seed and budget and scores each on
/// the held-out splits at the first lead. Runs are farmed out to worker
/// threads; results are collected in variant order.
///
/// Evaluation batches match the training batch size: the derivative
/// branch's merged batch-head statistics are then the same at train and
/// score time.
pub fn run_ablation(
    ds: &Dataset,
    out_dir: &std::path::Path,
    base: &RunConfig,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let variants = Variant::all();
    let threads = if threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        threads
    };

    let mut results: Vec<Option<Result<(Variant, TrainSummary)>>> =
        (0..variants.len()).map(|_| None).collect();
    for chunk in variants.chunks(threads.max(1)) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &variant in chunk {
                let mut run = base.clone();
                variant.apply(&mut run.model);
                run.loss = match variant {
                    Variant::Full => base.loss,
                    _ => variant.loss_weights(),
                };
                let run_dir = out_dir.join(variant.name());
                handles.push((
                    variant,
                    scope.spawn(move || train(&run, ds, &run_dir).map(|s| (variant, s))),
                ));
            }
            for (variant, handle) in handles {
                let idx = variants.iter().position(|v| *v == variant).expect("known variant");
                results[idx] = Some(handle.join().expect("training thread panicked"));
            }
        });
    }

    let mut rows = Vec::new();
    for slot in results {
        let (variant, summary) = slot.expect("all variants scheduled")?;
        let model = checkpoint::load(&summary.checkpoint)?;
        let val = evaluate(&model, ds, Split::Val, 0, base.batch_size, AccWeighting::Weighted, false)?;
        let metrics =
            evaluate(&model, ds, Split::Test, 0, base.batch_size, AccWeighting::Weighted, false)?;
        let rmse_mean = metrics.rmse.iter().sum::<f64>() / metrics.rmse.len() as f64;
        rows.push(AblationRow {
            variant,
            best_val: summary.best_val,
            val_rmse: val.lat_mse.sqrt(),
            test_rmse_mean: rmse_mean,
            test_lat_mse: metrics.lat_mse,
            test_kinetic: metrics.kinetic,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut csv =
        String::from("variant,best_val,val_lat_rmse,test_rmse_mean,test_lat_mse,test_kinetic_err\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.name(),
            r.best_val,
            r.val_rmse,
            r.test_rmse_mean,
            r.test_lat_mse,
            r.test_kinetic
        ));
    }
    csv
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let ds = Dataset::load(&args.dataset)?;
    let mut cfg = ModelConfig::new(
        ds.manifest.variables.clone(),
        ds.manifest.grid_h,
        ds.manifest.grid_w,
    );
    args.model.apply(&mut cfg);
    let mut base = RunConfig::new(cfg);
    base.lr = args.lr;
    base.batch_size = args.batch_size;
    base.epochs = args.epochs;
    base.seed = args.seed;
    base.loss.alpha = args.alpha;
    base.loss.beta = args.beta;
    let rows = run_ablation(&ds, &args.out, &base, args.device_threads)?;
    let csv = ablation_csv(&rows);
    crate::write_file(&args.out.join("comparison.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Runs a check suite; Ok(true) when every row passed.
pub fn cmd_check(mode: &str) -> Result<bool> {
    let results = checks::run_suite(mode)?;
    for r in &results {
        println!("{}", r.row());
    }
    let passed = checks::all_pass(&results);
    println!(
        "{}: {} of {} checks passed",
        mode,
        results.iter().filter(|r| r.pass).count(),
        results.len()
    );
    Ok(passed)
}

/// CLI entry point returning the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome: Result<i32> = match &cli.command {
        Command::Generate(args) => cmd_generate(args).map(|_| 0),
        Command::Train(args) => cmd_train(args).map(|_| 0),
        Command::Eval(args) => cmd_eval(args).map(|_| 0),
        Command::Ablate(args) => cmd_ablate(args).map(|_| 0),
        Command::Check(args) => cmd_check(&args.mode).map(|ok| if ok { 0 } else { 2 }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::Integration { .. } => 3,
                _ => 1,
            }
        }
    }
}

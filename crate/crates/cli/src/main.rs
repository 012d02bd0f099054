use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cina::data::{DataFormat, Dataset, DatasetCollection, Split};
use cina::harness::{
    fit_amortized, run_experiment, run_experiment_on, select_single_lambda, thread_pool, ExperimentConfig, Method,
};
use cina::inference::{estimate_ate, estimate_ite, zero_shot_infer, BalancingSolver, ModelSolver, QpOracleSolver};
use cina::model::Checkpoint;
use cina::data::standardize_columns;
use cina::kernel::build_gram;
use cina::oracle::{dual_equivalence_sweep, solve_balancing_qp_with, BalancingWeights, QpOptions};
use cina::training::{lambda_sweep, train_single, write_run_log, Trainer};

#[derive(Parser)]
#[command(name = "cina", version, about = "Covariate balancing and ATE estimation through self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic collection and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Train a model and write a checkpoint plus run log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Collection manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "multi")]
        mode: Mode,
        /// Dataset id to fit in single mode; defaults to the first dataset.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// ATE (or ITE) estimates as JSON on stdout.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Dataset file (csv/json) or collection manifest.
        #[arg(long)]
        data: PathBuf,
        /// Use the exact QP solver instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        ite: bool,
        #[arg(long, default_value_t = 0)]
        unit: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Exact balancing weights and ATE for every dataset.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Also solve the dual SVM on these lambdas (comma separated) and
        /// report the projected objective of each.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Run the experiment grid and write report.json and summary.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate on a stored collection instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Extra methods, comma separated.
        #[arg(long, value_delimiter = ',')]
        baselines: Vec<Method>,
    },
    /// Validation-MAE sweep over the lambda grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "multi")]
        mode: Mode,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let pool = thread_pool()?;
    pool.install(|| run(cli.command))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.train_config.seed = cfg.seed;
    cfg.single_config.seed = cfg.seed;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn optional_config_hash(common: &Common) -> Result<Option<String>> {
    match &common.config {
        Some(_) => Ok(Some(load_config(common)?.hash())),
        None => Ok(None),
    }
}

/// A directory or `*manifest*.json` loads a collection; any other file is a
/// single dataset placed in the test split.
fn load_data(path: &Path) -> Result<DatasetCollection> {
    let manifest = if path.is_dir() {
        Some(path.join("manifest.json"))
    } else if path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.contains("manifest") && n.ends_with(".json"))
    {
        Some(path.to_path_buf())
    } else {
        None
    };
    if let Some(m) = manifest {
        return DatasetCollection::load(&m).with_context(|| format!("loading manifest {}", m.display()));
    }
    let format = DataFormat::from_path(path).context("data file must end in .csv or .json")?;
    let d = Dataset::load(path, format).with_context(|| format!("loading {}", path.display()))?;
    Ok(DatasetCollection::new(vec![d], vec![Split::Test], false)?)
}

fn emit(value: &Value, out: Option<&Path>, file: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(file), &text)?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, format } => {
            let cfg = load_config(&common)?;
            let c = cfg.generator.with_seed(cfg.seed).generate()?;
            let format = match format {
                Format::Csv => DataFormat::Csv,
                Format::Json => DataFormat::Json,
            };
            let manifest = c.save(&cfg.output_dir, format)?;
            eprintln!(
                "wrote {} datasets to {}",
                manifest.datasets.len(),
                cfg.output_dir.join("manifest.json").display()
            );
        }
        Command::Train {
            common,
            data,
            mode,
            dataset,
        } => {
            let cfg = load_config(&common)?;
            let c = load_data(&data)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (dx, params, lambda, run_log, sweep_log) = match mode {
                Mode::Multi => {
                    let fit = fit_amortized(&c, &cfg.train_config)?;
                    (c.datasets[0].n_covariates(), fit.params, fit.lambda, fit.run_log, fit.sweep_log)
                }
                Mode::Single => {
                    let d = match &dataset {
                        Some(id) => c
                            .datasets
                            .iter()
                            .find(|d| &d.id == id)
                            .with_context(|| format!("no dataset `{id}` in collection"))?,
                        None => &c.datasets[0],
                    };
                    let (lambda, sweep_log) = select_single_lambda(&c, &cfg.single_config)?;
                    let out = train_single(d, &cfg.single_config, lambda)?;
                    (d.n_covariates(), out.params, lambda, out.log, sweep_log)
                }
            };
            Checkpoint::new(dx, params, Some(cfg.hash())).save(&cfg.output_dir.join("checkpoint.json"))?;
            write_run_log(&cfg.output_dir.join("run_log.jsonl"), &run_log)?;
            let summary = json!({ "lambda": lambda, "sweep": sweep_log });
            std::fs::write(cfg.output_dir.join("train.json"), serde_json::to_string_pretty(&summary)?)?;
            eprintln!("trained at lambda {lambda:e}; checkpoint in {}", cfg.output_dir.display());
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            oracle,
            ite,
            unit,
            k,
        } => {
            let config_hash = optional_config_hash(&common)?;
            let c = load_data(&data)?;
            let ckpt = match &checkpoint {
                Some(p) if !oracle => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
                _ => None,
            };
            let qp = QpOracleSolver::new();
            let solver: Box<dyn BalancingSolver + '_> = match &ckpt {
                Some(ck) => Box::new(ModelSolver { params: &ck.params }),
                None => Box::new(qp),
            };
            let mut results = Vec::new();
            for d in &c.datasets {
                if let Some(ck) = &ckpt {
                    if ck.dx != d.n_covariates() {
                        bail!("checkpoint expects {} covariates, `{}` has {}", ck.dx, d.id, d.n_covariates());
                    }
                }
                if ite {
                    let est = estimate_ite(d, solver.as_ref(), unit, k)?;
                    results.push(json!({ "dataset_id": d.id, "ite": est }));
                } else {
                    let (value, wall) = match &ckpt {
                        Some(ck) => {
                            let e = zero_shot_infer(d, &ck.params)?;
                            (e.value, e.wall_time_s)
                        }
                        None => {
                            let start = std::time::Instant::now();
                            let alpha = solver.weights(d)?;
                            let e = estimate_ate(&BalancingWeights::new(alpha, d.signs().view()), d)?;
                            (e.value, start.elapsed().as_secs_f64())
                        }
                    };
                    results.push(json!({
                        "dataset_id": d.id,
                        "ate": value,
                        "true_ate": d.true_ate,
                        "wall_time_s": wall,
                    }));
                }
            }
            emit(
                &json!({ "config_hash": config_hash, "results": results }),
                common.out.as_deref(),
                "infer.json",
            )?;
        }
        Command::Oracle { common, data, lambdas } => {
            let config_hash = optional_config_hash(&common)?;
            let c = load_data(&data)?;
            let opts = QpOptions::smo();
            let mut results = Vec::new();
            for d in &c.datasets {
                let g = build_gram(standardize_columns(&d.covariates).view())?;
                let w = d.signs();
                let (b, stats) = solve_balancing_qp_with(&g, w.view(), &opts)?;
                let e = estimate_ate(&b, d)?;
                let dual = if lambdas.is_empty() {
                    Value::Null
                } else {
                    let (best, _, log) = dual_equivalence_sweep(&g, w.view(), &lambdas, &opts)?;
                    json!({ "best_lambda": best, "log": log })
                };
                results.push(json!({
                    "dataset_id": d.id,
                    "ate": e.value,
                    "true_ate": d.true_ate,
                    "objective": b.objective,
                    "solver": stats,
                    "alpha": b.alpha,
                    "dual_sweep": dual,
                }));
            }
            emit(
                &json!({ "config_hash": config_hash, "results": results }),
                common.out.as_deref(),
                "oracle.json",
            )?;
        }
        Command::Evaluate {
            common,
            data,
            baselines,
        } => {
            let mut cfg = load_config(&common)?;
            for m in baselines {
                if !cfg.methods.contains(&m) {
                    cfg.methods.push(m);
                }
            }
            let report = match &data {
                Some(p) => run_experiment_on(&cfg, &load_data(p)?)?,
                None => run_experiment(&cfg)?,
            };
            report.write(&cfg.output_dir)?;
            print!("{}", report.summary_csv()?);
            if !report.is_complete() {
                bail!("report is partial: {:?}", report.status);
            }
        }
        Command::Sweep { common, data, mode } => {
            let cfg = load_config(&common)?;
            let c = load_data(&data)?;
            let (train_cfg, trainer) = match mode {
                Mode::Single => (&cfg.single_config, Trainer::Single),
                Mode::Multi => (&cfg.train_config, Trainer::Multi),
            };
            let sweep = lambda_sweep(&c, train_cfg, trainer)?;
            if let Some(params) = sweep.params {
                std::fs::create_dir_all(&cfg.output_dir)?;
                Checkpoint::new(c.datasets[0].n_covariates(), params, Some(cfg.hash()))
                    .save(&cfg.output_dir.join("checkpoint.json"))?;
            }
            emit(
                &json!({ "best_lambda": sweep.best_lambda, "log": sweep.log }),
                Some(&cfg.output_dir),
                "sweep.json",
            )?;
        }
    }
    Ok(())
}

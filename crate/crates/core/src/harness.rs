//! Experiment orchestration: generate or load a collection, fit the
//! amortized model on the train split, evaluate every requested method on
//! the test split and emit `report.json` plus `summary.csv`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ipw_estimator, mean_prediction, naive_estimator, self_normalized_ipw};
use crate::data::{Dataset, DatasetCollection, Split};
use crate::datagen::{gen_er_scm, gen_sim_a, ErConfig, SimAConfig};
use crate::error::{CinaError, Result};
use crate::inference::{estimate_ate, zero_shot_infer, BalancingSolver, QpOracleSolver};
use crate::model::ModelParams;
use crate::oracle::BalancingWeights;
use crate::training::{
    lambda_sweep, train_multi, train_single, LogRecord, SweepRecord, TrainConfig, Trainer,
};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "CINA_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    SimA(SimAConfig),
    Er(ErConfig),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorConfig::SimA(c) => c.validate(),
            GeneratorConfig::Er(c) => c.validate(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> GeneratorConfig {
        let mut g = self.clone();
        match &mut g {
            GeneratorConfig::SimA(c) => c.seed = seed,
            GeneratorConfig::Er(c) => c.seed = seed,
        }
        g
    }

    pub fn generate(&self) -> Result<DatasetCollection> {
        match self {
            GeneratorConfig::SimA(c) => gen_sim_a(c),
            GeneratorConfig::Er(c) => gen_er_scm(c).map(|(c, _)| c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Ipw,
    Snipw,
    Mean,
    SvmOracle,
    CinaSingle,
    /// Amortized model, one forward pass per test dataset. Supervised when
    /// `train_config.mu > 0`.
    CinaZs,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Naive,
        Method::Ipw,
        Method::Snipw,
        Method::Mean,
        Method::SvmOracle,
        Method::CinaSingle,
        Method::CinaZs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ipw => "ipw",
            Method::Snipw => "snipw",
            Method::Mean => "mean",
            Method::SvmOracle => "svm_oracle",
            Method::CinaSingle => "cina_single",
            Method::CinaZs => "cina_zs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = CinaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| CinaError::Config(format!("unknown method `{s}`")))
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub methods: Vec<Method>,
    /// Amortized (multi-dataset) training.
    #[serde(default = "TrainConfig::multi")]
    pub train_config: TrainConfig,
    /// Per-dataset training for `cina_single`.
    #[serde(default)]
    pub single_config: TrainConfig,
    /// Overrides the generator and training seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// When false every wall time is written as zero so reports are
    /// byte-identical across runs.
    #[serde(default = "default_true")]
    pub record_timings: bool,
}

impl ExperimentConfig {
    pub fn new(generator: GeneratorConfig, methods: Vec<Method>, seed: u64) -> Self {
        ExperimentConfig {
            generator,
            methods,
            train_config: TrainConfig::multi(),
            single_config: TrainConfig::default(),
            seed,
            output_dir: default_output_dir(),
            record_timings: true,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CinaError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CinaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(CinaError::Config("methods must be nonempty".into()));
        }
        self.generator.validate()?;
        self.train_config.validate()?;
        self.single_config.validate()
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// `(mean |e - t|, sample sd / sqrt(n))`; the SE is 0 for a single row.
pub fn compute_mae(estimates: &[f64], truths: &[f64]) -> Result<(f64, f64)> {
    if estimates.len() != truths.len() {
        return Err(CinaError::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return Err(CinaError::Validation("compute_mae needs at least one row".into()));
    }
    let errors: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| (e - t).abs()).collect();
    Ok(mean_and_se(&errors))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub dataset_id: String,
    pub estimate: f64,
    pub truth: f64,
    pub abs_error: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_datasets: usize,
    pub mae: f64,
    /// Standard error of the MAE over datasets.
    pub se: f64,
    pub mean_wall_time_s: f64,
    /// Amortized training time; zero for per-dataset methods.
    pub training_wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ReportStatus {
    Complete,
    Partial { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
    pub n_test_datasets: usize,
    pub record_timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub status: ReportStatus,
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<MethodSummary>,
    /// λ chosen for each trained method and the sweep log behind it.
    pub selected_lambda: Vec<(Method, f64)>,
    pub sweep_log: Vec<(Method, Vec<SweepRecord>)>,
}

impl EvalReport {
    pub fn is_complete(&self) -> bool {
        self.status == ReportStatus::Complete
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Aggregates recomputed from the stored rows.
    pub fn recompute_summaries(&self) -> Vec<MethodSummary> {
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        methods
            .into_iter()
            .map(|m| {
                let rows: Vec<&EvalRow> = self.rows_for(m).collect();
                let errors: Vec<f64> = rows.iter().map(|r| r.abs_error).collect();
                let (mae, se) = mean_and_se(&errors);
                let training = self
                    .summary(m)
                    .map(|s| s.training_wall_time_s)
                    .unwrap_or_default();
                MethodSummary {
                    method: m,
                    n_datasets: rows.len(),
                    mae,
                    se,
                    mean_wall_time_s: rows.iter().map(|r| r.wall_time_s).sum::<f64>() / rows.len() as f64,
                    training_wall_time_s: training,
                }
            })
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "mae", "se", "mean_wall_time_s"])
            .map_err(csv_err)?;
        for s in &self.summaries {
            w.write_record([
                s.method.name().to_string(),
                s.mae.to_string(),
                s.se.to_string(),
                s.mean_wall_time_s.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CinaError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json_string())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CinaError {
    CinaError::Io(std::io::Error::other(e))
}

/// Pool honoring `CINA_THREADS`; rayon's default sizing otherwise.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CinaError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CinaError::Config(format!("thread pool: {e}")))
}

/// Generates the collection from `cfg.generator` and runs the pipeline.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let pool = thread_pool()?;
    pool.install(|| {
        let generator = cfg.generator.with_seed(cfg.seed);
        match generator.generate() {
            Ok(c) => Ok(run_pipeline(cfg, &c)),
            Err(e) => Ok(partial_report(cfg, 0, "generate", e)),
        }
    })
}

/// Same pipeline on an already loaded collection.
pub fn run_experiment_on(cfg: &ExperimentConfig, c: &DatasetCollection) -> Result<EvalReport> {
    cfg.validate()?;
    let pool = thread_pool()?;
    Ok(pool.install(|| run_pipeline(cfg, c)))
}

fn partial_report(cfg: &ExperimentConfig, n_test: usize, stage: &str, e: CinaError) -> EvalReport {
    EvalReport {
        metadata: metadata(cfg, n_test),
        status: ReportStatus::Partial {
            stage: stage.into(),
            error: e.to_string(),
        },
        rows: Vec::new(),
        summaries: Vec::new(),
        selected_lambda: Vec::new(),
        sweep_log: Vec::new(),
    }
}

fn metadata(cfg: &ExperimentConfig, n_test: usize) -> ReportMetadata {
    ReportMetadata {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        n_test_datasets: n_test,
        record_timings: cfg.record_timings,
    }
}

/// Amortized parameters with the λ they were trained at.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub params: ModelParams,
    pub lambda: f64,
    pub sweep_log: Vec<SweepRecord>,
    pub run_log: Vec<LogRecord>,
}

/// λ from the validation sweep, or the single grid point without one.
pub fn fit_amortized(c: &DatasetCollection, cfg: &TrainConfig) -> Result<Fitted> {
    if cfg.grid_size == 1 {
        let lambda = cfg.lambda_grid()[0];
        let out = train_multi(c, cfg, lambda)?;
        return Ok(Fitted {
            params: out.params,
            lambda,
            sweep_log: Vec::new(),
            run_log: out.log,
        });
    }
    let sweep = lambda_sweep(c, cfg, Trainer::Multi)?;
    Ok(Fitted {
        params: sweep.params.expect("multi sweep returns params"),
        lambda: sweep.best_lambda,
        sweep_log: sweep.log,
        run_log: sweep.run_log,
    })
}

/// λ for per-dataset training, chosen on the validation split when the grid
/// has more than one point.
pub fn select_single_lambda(c: &DatasetCollection, cfg: &TrainConfig) -> Result<(f64, Vec<SweepRecord>)> {
    if cfg.grid_size == 1 {
        return Ok((cfg.lambda_grid()[0], Vec::new()));
    }
    let sweep = lambda_sweep(c, cfg, Trainer::Single)?;
    Ok((sweep.best_lambda, sweep.log))
}

fn run_pipeline(cfg: &ExperimentConfig, c: &DatasetCollection) -> EvalReport {
    let test: Vec<&Dataset> = c.split(Split::Test);
    let mut report = EvalReport {
        metadata: metadata(cfg, test.len()),
        status: ReportStatus::Complete,
        rows: Vec::new(),
        summaries: Vec::new(),
        selected_lambda: Vec::new(),
        sweep_log: Vec::new(),
    };
    let mut methods: Vec<Method> = Vec::new();
    for &m in &cfg.methods {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let mut train_cfg = cfg.train_config.clone();
    train_cfg.seed = cfg.seed;
    let mut single_cfg = cfg.single_config.clone();
    single_cfg.seed = cfg.seed;
    let training_split = c.subset(Split::Train);
    if test.is_empty() {
        report.status = ReportStatus::Partial {
            stage: "split".into(),
            error: "no test datasets".into(),
        };
        return report;
    }
    for method in methods {
        let stage_start = Instant::now();
        let result: Result<(Vec<EvalRow>, f64)> = match method {
            Method::CinaZs => fit_amortized(c, &train_cfg).and_then(|fit| {
                let training_time = stage_start.elapsed().as_secs_f64();
                report.selected_lambda.push((method, fit.lambda));
                report.sweep_log.push((method, fit.sweep_log));
                let rows = per_dataset(&test, method, |d| zero_shot_infer(d, &fit.params).map(|e| e.value))?;
                Ok((rows, training_time))
            }),
            Method::CinaSingle => select_single_lambda(c, &single_cfg).and_then(|(lambda, log)| {
                report.selected_lambda.push((method, lambda));
                report.sweep_log.push((method, log));
                let rows = per_dataset(&test, method, |d| {
                    let out = train_single(d, &single_cfg, lambda)?;
                    estimate_ate(&crate::model::forward_extract(d, &out.params)?.alpha, d).map(|e| e.value)
                })?;
                Ok((rows, 0.0))
            }),
            Method::Mean => per_dataset(&test, method, |d| mean_prediction(&training_split, d).map(|e| e.value))
                .map(|r| (r, 0.0)),
            Method::Naive => per_dataset(&test, method, |d| naive_estimator(d).map(|e| e.value)).map(|r| (r, 0.0)),
            Method::Ipw => per_dataset(&test, method, |d| ipw_estimator(d).map(|e| e.value)).map(|r| (r, 0.0)),
            Method::Snipw => per_dataset(&test, method, |d| self_normalized_ipw(d).map(|e| e.value)).map(|r| (r, 0.0)),
            Method::SvmOracle => {
                let solver = QpOracleSolver::new();
                per_dataset(&test, method, |d| {
                    let alpha = solver.weights(d)?;
                    estimate_ate(&BalancingWeights::new(alpha, d.signs().view()), d).map(|e| e.value)
                })
                .map(|r| (r, 0.0))
            }
        };
        match result {
            Ok((mut rows, training_time)) => {
                if !cfg.record_timings {
                    rows.iter_mut().for_each(|r| r.wall_time_s = 0.0);
                }
                report.rows.extend(rows);
                report.summaries = report.recompute_summaries();
                if let Some(s) = report.summaries.iter_mut().find(|s| s.method == method) {
                    s.training_wall_time_s = if cfg.record_timings { training_time } else { 0.0 };
                }
            }
            Err(e) => {
                report.status = ReportStatus::Partial {
                    stage: method.name().into(),
                    error: e.to_string(),
                };
                break;
            }
        }
    }
    report
}

/// Runs `f` on every test dataset in parallel, timing each call.
fn per_dataset<F>(test: &[&Dataset], method: Method, f: F) -> Result<Vec<EvalRow>>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    test.par_iter()
        .map(|d| {
            let truth = d.true_ate.ok_or_else(|| CinaError::MissingTruth(d.id.clone()))?;
            let start = Instant::now();
            let estimate = f(d)?;
            let wall_time_s = start.elapsed().as_secs_f64();
            Ok(EvalRow {
                method,
                dataset_id: d.id.clone(),
                estimate,
                truth,
                abs_error: (estimate - truth).abs(),
                wall_time_s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{EtaPrior, UnitCount};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_trivial_cases() {
        assert_eq!(compute_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(compute_mae(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), (2.0, 1.0));
        assert!(matches!(compute_mae(&[1.0], &[1.0, 2.0]), Err(CinaError::LengthMismatch(1, 2))));
        assert!(compute_mae(&[], &[]).is_err());
    }

    #[test]
    fn mae_matches_two_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let e: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        // Column of absolute errors, then AVERAGE and STDEV.S / SQRT(COUNT).
        let mut col = Vec::new();
        for i in 0..20 {
            col.push(if e[i] > t[i] { e[i] - t[i] } else { t[i] - e[i] });
        }
        let mut total = 0.0;
        for v in &col {
            total += v;
        }
        let avg = total / 20.0;
        let mut ss = 0.0;
        for v in &col {
            ss += (v - avg) * (v - avg);
        }
        let se = (ss / 19.0).sqrt() / 20f64.sqrt();
        let (mae, got_se) = compute_mae(&e, &t).unwrap();
        assert_abs_diff_eq!(mae, avg, epsilon = 1e-12);
        assert_abs_diff_eq!(got_se, se, epsilon = 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dml".parse::<Method>().is_err());
    }

    fn sim_cfg(methods: Vec<Method>) -> ExperimentConfig {
        let gen = SimAConfig::new(5, UnitCount::Fixed(40), EtaPrior::Fixed, 0);
        ExperimentConfig::new(GeneratorConfig::SimA(gen), methods, 3)
    }

    #[test]
    fn config_toml_round_trip_and_hash() {
        let cfg = sim_cfg(vec![Method::Naive, Method::SvmOracle]);
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.train_config.epochs += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn minimal_toml() {
        let text = r#"
methods = ["naive", "ipw"]
seed = 4
[generator]
kind = "er"
nodes = 6
n_datasets = 5
units_per_dataset = 30
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.train_config, TrainConfig::multi());
        assert!(matches!(cfg.generator, GeneratorConfig::Er(ErConfig { nodes: 6, .. })));
        assert!(ExperimentConfig::from_toml_str("methods = []\n[generator]\nkind = \"er\"\nnodes = 6\nn_datasets = 1\nunits_per_dataset = 9").is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("{text}\nbogus = 1")).is_err());
    }

    #[test]
    fn naive_rows_are_group_mean_differences() {
        let mk = |id: &str, y: [f64; 4], truth: f64| {
            Dataset::new(id, array![[0.0], [1.0], [2.0], [3.0]], vec![1, 0, 1, 0], array![y[0], y[1], y[2], y[3]], Some(truth))
                .unwrap()
        };
        let ds = vec![mk("a", [1.0, 0.0, 3.0, 2.0], 0.5), mk("b", [2.0, 2.0, 2.0, 2.0], 1.0), mk("c", [0.0, 4.0, 0.0, 0.0], -1.0)];
        let c = DatasetCollection::new(ds, vec![Split::Test; 3], true).unwrap();
        let cfg = sim_cfg(vec![Method::Naive]);
        let r = run_experiment_on(&cfg, &c).unwrap();
        assert!(r.is_complete());
        let est: Vec<f64> = r.rows.iter().map(|row| row.estimate).collect();
        assert_eq!(est, vec![1.0, 0.0, -2.0]);
        let errs: Vec<f64> = r.rows.iter().map(|row| row.abs_error).collect();
        assert_eq!(errs, vec![0.5, 1.0, 1.0]);
        assert_abs_diff_eq!(r.summaries[0].mae, 2.5 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_reports() {
        let mut cfg = sim_cfg(vec![Method::Naive, Method::Snipw, Method::SvmOracle]);
        cfg.generator = GeneratorConfig::SimA(SimAConfig {
            split_fractions: [0.0, 0.0, 1.0],
            ..SimAConfig::new(4, UnitCount::Fixed(40), EtaPrior::Fixed, 0)
        });
        cfg.record_timings = false;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert!(a.is_complete());
        assert_eq!(a.to_json_string(), b.to_json_string());
        assert_eq!(a.summaries, a.recompute_summaries());
        assert_eq!(a.summaries.len(), 3);
    }

    #[test]
    fn failing_stage_marks_partial() {
        // Mean prediction needs truths on the train split; none exist here.
        let mut d = Dataset::new("x", array![[0.0], [1.0]], vec![1, 0], array![1.0, 0.0], Some(1.0)).unwrap();
        let test = d.clone();
        d.id = "y".into();
        d.true_ate = None;
        let c = DatasetCollection::new(vec![d, test], vec![Split::Train, Split::Test], true).unwrap();
        let r = run_experiment_on(&sim_cfg(vec![Method::Naive, Method::Mean]), &c).unwrap();
        assert_eq!(r.rows.len(), 1);
        match &r.status {
            ReportStatus::Partial { stage, .. } => assert_eq!(stage, "mean"),
            s => panic!("{s:?}"),
        }
    }

    #[test]
    fn summary_csv_header() {
        let c = DatasetCollection::new(
            vec![Dataset::new("a", array![[0.0], [1.0]], vec![1, 0], array![1.0, 0.0], Some(1.0)).unwrap()],
            vec![Split::Test],
            true,
        )
        .unwrap();
        let r = run_experiment_on(&sim_cfg(vec![Method::Naive]), &c).unwrap();
        let csv = r.summary_csv().unwrap();
        assert!(csv.starts_with("method,mae,se,mean_wall_time_s\nnaive,0,0,"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}

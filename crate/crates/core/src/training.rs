//! Penalized hinge losses, their analytic gradients and the training loops.
//!
//! The loss for one dataset is
//! `L = (lambda/2) u^T G u + sum_i [1 - W_i (r_i + beta0)]_+ + mu (tau_hat - tau)^2`
//! with `u = V / h` and `r` the readout. Gradients are derived by hand and
//! checked against central finite differences in the tests.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standardize_columns, Dataset, DatasetCollection, MultiTreatmentDataset, Split};
use crate::datagen::{substream, substream_seed};
use crate::error::{CinaError, Result};
use crate::inference::zero_shot_infer;
use crate::kernel::{build_gram, GramCache};
use crate::model::{backward, forward_full, KeyMap, ModelParams, ValueParams};
use crate::oracle::{log_grid, project_onto_a, BalancingWeights};

/// Attempts at drawing a non-degenerate shuffled chunk before keeping the
/// original partition for that epoch.
const SHUFFLE_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `r_i = sum_j G_ij V_j / h_j` (support-vector expansion).
    #[default]
    Expansion,
    /// `r_i = sum_j G_ij V_j / h_i` (row-normalized attention).
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central finite differences; slow, meant for verification.
    NumericCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub grid_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub mu: f64,
    pub seed: u64,
    pub shuffle_augment: bool,
    pub gradient_mode: GradientMode,
    pub readout: Readout,
    /// Used by the multi-dataset loop only; the single-dataset loop is plain
    /// gradient descent.
    pub optimizer: Optimizer,
    /// Intercept step relative to the value step.
    pub beta0_lr_ratio: f64,
    /// Output width of a learned key map; `None` keeps standardized covariates.
    pub key_dim: Option<usize>,
    /// Run-log stride in epochs (the last epoch is always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_min: 1e-6,
            lambda_max: 1e-2,
            grid_size: 5,
            lr_max: 1e-2,
            lr_min: 1e-5,
            epochs: 20_000,
            mu: 1.0,
            seed: 0,
            shuffle_augment: false,
            gradient_mode: GradientMode::Analytic,
            readout: Readout::Expansion,
            optimizer: Optimizer::Gd,
            beta0_lr_ratio: 1e-2,
            key_dim: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Defaults for the multi-dataset loop.
    pub fn multi() -> Self {
        TrainConfig {
            epochs: 4_000,
            mu: 1.0,
            lr_max: 1e-3,
            lr_min: 1e-5,
            optimizer: Optimizer::Adam,
            beta0_lr_ratio: 1.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lambda_min) || !pos(self.lambda_max) || self.lambda_min > self.lambda_max {
            return Err(CinaError::Config(format!(
                "need 0 < lambda_min <= lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if !pos(self.lr_min) || !pos(self.lr_max) || self.lr_min > self.lr_max {
            return Err(CinaError::Config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.grid_size == 0 {
            return Err(CinaError::Config("grid_size must be at least 1".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(CinaError::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !pos(self.beta0_lr_ratio) {
            return Err(CinaError::Config("beta0_lr_ratio must be positive".into()));
        }
        if self.key_dim == Some(0) {
            return Err(CinaError::Config("key_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_grid(&self) -> Vec<f64> {
        log_grid(self.lambda_min, self.lambda_max, self.grid_size)
    }
}

/// Cosine decay from `lr_max` to `lr_min` over the first half of training,
/// flat afterwards.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    let half = epochs / 2;
    if half == 0 || epoch >= half {
        return if half == 0 { lr_max } else { lr_min };
    }
    let phase = std::f64::consts::PI * epoch as f64 / half as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub penalty: f64,
    pub hinge: f64,
    pub supervised: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.penalty + self.hinge + self.supervised
    }
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.penalty += o.penalty;
        self.hinge += o.hinge;
        self.supervised += o.supervised;
    }
}

/// Outcomes and target for the supervised term.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub outcomes: ArrayView1<'a, f64>,
    pub truth: f64,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct CoreGrad {
    pub terms: LossTerms,
    pub d_values: Array1<f64>,
    pub d_beta0: f64,
    /// `dL/dG` treating every entry as independent; only when requested.
    pub d_gram: Option<Array2<f64>>,
}

/// Normalized weighted difference with weights `a_j = max(lambda u_j W_j, 0)`
/// and its gradient with respect to `a`. A group whose weights sum to zero
/// falls back to its plain mean and contributes no gradient.
pub fn readout_estimate(a: &Array1<f64>, w: ArrayView1<f64>, y: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let mut tau = 0.0;
    let mut da = Array1::zeros(a.len());
    for (sign, treated) in [(1.0, true), (-1.0, false)] {
        let members: Vec<usize> = (0..a.len()).filter(|&j| (w[j] > 0.0) == treated).collect();
        let s: f64 = members.iter().map(|&j| a[j]).sum();
        if s > 0.0 {
            let mean = members.iter().map(|&j| a[j] * y[j]).sum::<f64>() / s;
            tau += sign * mean;
            for &j in &members {
                da[j] = sign * (y[j] - mean) / s;
            }
        } else if !members.is_empty() {
            tau += sign * members.iter().map(|&j| y[j]).sum::<f64>() / members.len() as f64;
        }
    }
    (tau, da)
}

/// Loss and gradient for fixed Gram `g`, values `v` and signs `w`.
pub fn loss_core(
    g: &GramCache,
    v: ArrayView1<f64>,
    w: ArrayView1<f64>,
    beta0: f64,
    lambda: f64,
    readout: Readout,
    sup: Option<Supervision<'_>>,
    need_dgram: bool,
) -> CoreGrad {
    let n = v.len();
    let h = &g.normalizers;
    let u = g.scaled(v);
    let gu = g.gram.dot(&u);
    let penalty = 0.5 * lambda * u.dot(&gu).max(0.0);
    let r = match readout {
        Readout::Expansion => gu.clone(),
        Readout::Softmax => g.gram.dot(&v) / h,
    };
    let mut hinge = 0.0;
    let mut c = Array1::zeros(n);
    for i in 0..n {
        let slack = 1.0 - w[i] * (r[i] + beta0);
        if slack > 0.0 {
            hinge += slack;
            c[i] = -w[i];
        }
    }
    let d_beta0 = c.sum();

    let mut du = &gu * lambda;
    let mut dv = Array1::zeros(n);
    let mut dh = Array1::<f64>::zeros(n);
    let mut d_gram = need_dgram.then(|| Array2::<f64>::zeros((n, n)));
    match readout {
        Readout::Expansion => {
            du += &g.gram.dot(&c);
            if let Some(dg) = d_gram.as_mut() {
                outer_add(dg, &c, &u, 1.0);
            }
        }
        Readout::Softmax => {
            let ch = &c / h;
            dv += &g.gram.dot(&ch);
            dh -= &(&ch * &r);
            if let Some(dg) = d_gram.as_mut() {
                outer_add(dg, &ch, &v.to_owned(), 1.0);
            }
        }
    }

    let mut supervised = 0.0;
    if let Some(s) = sup {
        let a = Array1::from_shape_fn(n, |j| (lambda * u[j] * w[j]).max(0.0));
        let (tau_hat, da) = readout_estimate(&a, w, s.outcomes);
        let resid = tau_hat - s.truth;
        supervised = s.mu * resid * resid;
        let scale = 2.0 * s.mu * resid;
        for j in 0..n {
            if a[j] > 0.0 {
                du[j] += scale * da[j] * lambda * w[j];
            }
        }
    }

    dv += &(&du / h);
    dh -= &(&du * &u / h);
    if let Some(dg) = d_gram.as_mut() {
        outer_add(dg, &u, &u, 0.5 * lambda);
        for (mut row, &d) in dg.axis_iter_mut(Axis(0)).zip(dh.iter()) {
            row += d;
        }
    }
    CoreGrad {
        terms: LossTerms {
            penalty,
            hinge,
            supervised,
        },
        d_values: dv,
        d_beta0,
        d_gram,
    }
}

fn outer_add(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>, scale: f64) {
    for (mut row, &ai) in m.axis_iter_mut(Axis(0)).zip(a) {
        row.scaled_add(scale * ai, b);
    }
}

/// `dL/dK` for `G_ij = exp(k_i . k_j / sqrt(D))`.
pub fn gram_to_keys(d_gram: &Array2<f64>, g: &GramCache, keys: &Array2<f64>) -> Array2<f64> {
    let sym = (d_gram + &d_gram.t()) * &g.gram;
    sym.dot(keys) / (g.dim as f64).sqrt()
}

/// Loss terms and the full parameter gradient on one dataset.
pub fn dataset_loss_grad(
    d: &Dataset,
    p: &ModelParams,
    readout: Readout,
    mu: f64,
) -> Result<(LossTerms, ModelParams)> {
    let (out, cache) = forward_full(d, p)?;
    let w = d.signs();
    let sup = supervision(d, mu)?;
    let need_dgram = matches!(p.key_map, KeyMap::LinearRelu { .. });
    let core = loss_core(&out.gram, out.values.view(), w.view(), p.beta0, p.lambda, readout, sup, need_dgram);
    let d_keys = match &core.d_gram {
        Some(dg) => gram_to_keys(dg, &out.gram, &out.keys),
        None => Array2::zeros(out.keys.raw_dim()),
    };
    let grad = backward(d, p, &out, &cache, &core.d_values, &d_keys, core.d_beta0);
    Ok((core.terms, grad))
}

fn supervision(d: &Dataset, mu: f64) -> Result<Option<Supervision<'_>>> {
    if mu == 0.0 {
        return Ok(None);
    }
    let truth = d.true_ate.ok_or_else(|| CinaError::MissingTruth(d.id.clone()))?;
    Ok(Some(Supervision {
        outcomes: d.outcomes.view(),
        truth,
        mu,
    }))
}

/// Loss terms on one dataset without gradients.
pub fn dataset_loss(d: &Dataset, p: &ModelParams, readout: Readout, mu: f64) -> Result<LossTerms> {
    let (out, _) = forward_full(d, p)?;
    let w = d.signs();
    let sup = supervision(d, mu)?;
    Ok(loss_core(&out.gram, out.values.view(), w.view(), p.beta0, p.lambda, readout, sup, false).terms)
}

/// Penalized hinge loss on one dataset.
pub fn hinge_loss(d: &Dataset, p: &ModelParams, readout: Readout) -> Result<f64> {
    dataset_loss(d, p, readout, 0.0).map(|t| t.total())
}

/// Hinge losses plus `mu` times the squared estimate residuals, summed over
/// every dataset in `c`.
pub fn supervised_loss(c: &DatasetCollection, p: &ModelParams, mu: f64, readout: Readout) -> Result<f64> {
    let mut total = 0.0;
    for d in &c.datasets {
        total += dataset_loss(d, p, readout, mu)?.total();
    }
    Ok(total)
}

/// Central finite differences of `f` over the flattened parameters.
pub fn numeric_gradient(
    p: &ModelParams,
    step: f64,
    f: &dyn Fn(&ModelParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = p.to_flat();
    let mut probe = p.clone();
    let mut grad = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for k in 0..base.len() {
        x[k] = base[k] + step;
        probe.set_flat(&x)?;
        let plus = f(&probe)?;
        x[k] = base[k] - step;
        probe.set_flat(&x)?;
        let minus = f(&probe)?;
        x[k] = base[k];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Size below which a central difference of a loss of magnitude `loss` with
/// step `step` cannot resolve a derivative to four digits: round-off in the
/// two evaluations is about `eps * |loss| / step`.
pub fn fd_noise_floor(loss: f64, step: f64) -> f64 {
    1e4 * f64::EPSILON * loss.abs().max(1.0) / step
}

/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)` where the floor is the
/// larger of `noise_floor` and `1e-6 * max|a|`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], noise_floor: f64) -> f64 {
    let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(noise_floor).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub lambda: f64,
}

pub fn write_run_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Total loss at the start of every epoch.
    pub history: Vec<f64>,
    pub log: Vec<LogRecord>,
}

fn should_log(epoch: usize, cfg: &TrainConfig) -> bool {
    epoch + 1 == cfg.epochs || (cfg.log_every > 0 && epoch % cfg.log_every == 0)
}

/// Largest eigenvalue of `D^-1 G D^-1` (power iteration), `D = diag(h)`.
fn curvature(g: &GramCache) -> f64 {
    let n = g.n();
    let mut x = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..100 {
        let y = g.gram.dot(&g.scaled(x.view())) / &g.normalizers;
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            break;
        }
        est = x.dot(&y);
        x = y / norm;
    }
    est.max(f64::MIN_POSITIVE)
}

/// Gradient descent on free values for one dataset and one sign column.
///
/// The value step is `lr / (lambda * kappa)` where `kappa` is the curvature of
/// the penalty in `V`, so `lr` is dimensionless and the same schedule works
/// across `lambda` and `N`.
struct FreeProblem<'a> {
    g: &'a GramCache,
    w: Array1<f64>,
    lambda: f64,
    curvature: f64,
}

impl FreeProblem<'_> {
    fn loss_grad(&self, v: &Array1<f64>, beta0: f64, cfg: &TrainConfig) -> CoreGrad {
        let mut core = loss_core(self.g, v.view(), self.w.view(), beta0, self.lambda, cfg.readout, None, false);
        if cfg.gradient_mode == GradientMode::NumericCheck {
            let eval = |v: &Array1<f64>, b: f64| {
                loss_core(self.g, v.view(), self.w.view(), b, self.lambda, cfg.readout, None, false)
                    .terms
                    .total()
            };
            let step = 1e-6;
            let mut probe = v.clone();
            for k in 0..v.len() {
                probe[k] = v[k] + step;
                let plus = eval(&probe, beta0);
                probe[k] = v[k] - step;
                let minus = eval(&probe, beta0);
                probe[k] = v[k];
                core.d_values[k] = (plus - minus) / (2.0 * step);
            }
            core.d_beta0 = (eval(v, beta0 + step) - eval(v, beta0 - step)) / (2.0 * step);
        }
        core
    }

    fn step(&self, v: &mut Array1<f64>, beta0: &mut f64, core: &CoreGrad, lr: f64, cfg: &TrainConfig) {
        v.scaled_add(-lr / (self.lambda * self.curvature), &core.d_values);
        *beta0 -= cfg.beta0_lr_ratio * lr * core.d_beta0;
    }
}

/// Trains free per-unit values on one dataset by minimizing the penalized
/// hinge loss; `cfg.mu` is ignored since a target dataset has no truth.
pub fn train_single(d: &Dataset, cfg: &TrainConfig, lambda: f64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = ModelParams::single(d, lambda, cfg.seed)?;
    let keys = standardize_columns(&d.covariates);
    let g = build_gram(keys.view())?;
    let problem = FreeProblem {
        curvature: curvature(&g),
        g: &g,
        w: d.signs(),
        lambda,
    };
    let ValueParams::Free { values } = &params.value else {
        unreachable!("single-dataset parameters are free values")
    };
    let mut v = values.clone();
    let mut beta0 = 0.0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let core = problem.loss_grad(&v, beta0, cfg);
        let loss = core.terms.total();
        if !loss.is_finite() {
            return Err(CinaError::NonFiniteLoss { epoch });
        }
        history.push(loss);
        if should_log(epoch, cfg) {
            log.push(LogRecord { epoch, loss, lr, lambda });
        }
        problem.step(&mut v, &mut beta0, &core, lr, cfg);
    }
    params.value = ValueParams::Free { values: v };
    params.beta0 = beta0;
    Ok(TrainOutcome { params, history, log })
}

/// Adam state over the flattened parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, x: &mut [f64], g: &[f64], lr: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..x.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            x[k] -= lr[k] * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Randomly repartitions the units of `datasets` into chunks of the original
/// sizes. A chunk's truth is the unit-weighted mean of its sources' truths.
pub fn shuffle_units(datasets: &[&Dataset], rng: &mut impl rand::Rng) -> Result<Vec<Dataset>> {
    let mut pool: Vec<(usize, usize)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(m, d)| (0..d.n_units()).map(move |i| (m, i)))
        .collect();
    'attempt: for _ in 0..SHUFFLE_RETRIES {
        pool.shuffle(rng);
        let mut out = Vec::with_capacity(datasets.len());
        let mut start = 0;
        for (m, d) in datasets.iter().enumerate() {
            let chunk = &pool[start..start + d.n_units()];
            start += d.n_units();
            let x = Array2::from_shape_fn((chunk.len(), d.n_covariates()), |(r, c)| {
                let (src, i) = chunk[r];
                datasets[src].covariates[[i, c]]
            });
            let t: Vec<u8> = chunk.iter().map(|&(src, i)| datasets[src].treatments[i]).collect();
            let y = Array1::from_iter(chunk.iter().map(|&(src, i)| datasets[src].outcomes[i]));
            let truth = chunk
                .iter()
                .map(|&(src, _)| datasets[src].true_ate)
                .try_fold(0.0, |acc, v| v.map(|v| acc + v))
                .map(|s| s / chunk.len() as f64);
            match Dataset::new(format!("shuffled-{m}"), x, t, y, truth) {
                Ok(ds) => out.push(ds),
                Err(CinaError::DegenerateDataset { .. }) => continue 'attempt,
                Err(e) => return Err(e),
            }
        }
        return Ok(out);
    }
    Ok(datasets.iter().map(|d| (*d).clone()).collect())
}

/// End-to-end training of the amortized model on the training split.
pub fn train_multi(c: &DatasetCollection, cfg: &TrainConfig, lambda: f64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.shuffle_augment && !c.shared_graph {
        return Err(CinaError::Config(
            "shuffle augmentation requires datasets from a shared causal graph".into(),
        ));
    }
    let train = c.split(Split::Train);
    let first = train.first().ok_or(CinaError::EmptyCollection)?;
    let dx = first.n_covariates();
    if let Some(bad) = train.iter().find(|d| d.n_covariates() != dx) {
        return Err(CinaError::DimensionMismatch {
            expected: dx,
            actual: bad.n_covariates(),
            context: format!("covariates of `{}`", bad.id),
        });
    }
    if cfg.mu > 0.0 {
        if let Some(d) = train.iter().find(|d| d.true_ate.is_none()) {
            return Err(CinaError::MissingTruth(d.id.clone()));
        }
    }
    let mut params = ModelParams::amortized(dx, cfg.key_dim, lambda, cfg.seed)?;
    let n_params = params.n_params();
    let mut adam = Adam::new(n_params);
    // Per-entry step multipliers: the intercept is last in flat order.
    let mut rates = vec![1.0; n_params];
    rates[n_params - 1] = cfg.beta0_lr_ratio;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let shuffled;
        let batch: Vec<&Dataset> = if cfg.shuffle_augment {
            let mut rng = substream(cfg.seed, 1 + epoch as u64);
            shuffled = shuffle_units(&train, &mut rng)?;
            shuffled.iter().collect()
        } else {
            train.clone()
        };
        let mut epoch_loss = 0.0;
        for d in batch {
            let (terms, grad) = match cfg.gradient_mode {
                GradientMode::Analytic => dataset_loss_grad(d, &params, cfg.readout, cfg.mu)?,
                GradientMode::NumericCheck => {
                    let f = |q: &ModelParams| dataset_loss(d, q, cfg.readout, cfg.mu).map(|t| t.total());
                    let flat = numeric_gradient(&params, 1e-6, &f)?;
                    let mut grad = params.zeros_like();
                    grad.set_flat(&flat)?;
                    (dataset_loss(d, &params, cfg.readout, cfg.mu)?, grad)
                }
            };
            let loss = terms.total();
            if !loss.is_finite() {
                return Err(CinaError::NonFiniteLoss { epoch });
            }
            epoch_loss += loss;
            // Per-unit loss scale keeps the step independent of dataset size.
            let scale = 1.0 / d.n_units() as f64;
            let g: Vec<f64> = grad.to_flat().into_iter().map(|v| v * scale).collect();
            let mut x = params.to_flat();
            match cfg.optimizer {
                Optimizer::Gd => x.iter_mut().zip(&g).zip(&rates).for_each(|((x, g), r)| *x -= lr * r * g),
                Optimizer::Adam => {
                    let lrs: Vec<f64> = rates.iter().map(|r| lr * r).collect();
                    adam.update(&mut x, &g, &lrs);
                }
            }
            params.set_flat(&x)?;
        }
        history.push(epoch_loss);
        if should_log(epoch, cfg) {
            log.push(LogRecord {
                epoch,
                loss: epoch_loss,
                lr,
                lambda,
            });
        }
    }
    Ok(TrainOutcome { params, history, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    pub validation_mae: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best_lambda: f64,
    pub log: Vec<SweepRecord>,
    /// Winning amortized parameters; `None` for the single-dataset trainer,
    /// which fits each validation dataset separately.
    pub params: Option<ModelParams>,
    /// Run log of the winning amortized run; empty for the single trainer.
    pub run_log: Vec<LogRecord>,
}

/// Trains at every grid point (in parallel) and keeps the `lambda` with the
/// lowest validation MAE; ties go to the smaller `lambda`.
pub fn lambda_sweep(c: &DatasetCollection, cfg: &TrainConfig, trainer: Trainer) -> Result<SweepOutcome> {
    cfg.validate()?;
    let validation: Vec<&Dataset> = c
        .split(Split::Validation)
        .into_iter()
        .filter(|d| d.true_ate.is_some())
        .collect();
    if validation.is_empty() {
        return Err(CinaError::NoValidationTruth);
    }
    let grid = cfg.lambda_grid();
    type Run = (SweepRecord, Option<(ModelParams, Vec<LogRecord>)>);
    let runs: Vec<Result<Run>> = grid
        .par_iter()
        .enumerate()
        .map(|(k, &lambda)| {
            let mut run_cfg = cfg.clone();
            if grid.len() > 1 {
                run_cfg.seed = substream_seed(cfg.seed, k as u64);
            }
            let (errors, params) = match trainer {
                Trainer::Single => {
                    let mut errs = Vec::with_capacity(validation.len());
                    for d in &validation {
                        let out = train_single(d, &run_cfg, lambda)?;
                        let est = zero_shot_infer(d, &out.params)?;
                        errs.push((est.value - d.true_ate.unwrap_or_default()).abs());
                    }
                    (errs, None)
                }
                Trainer::Multi => {
                    let out = train_multi(c, &run_cfg, lambda)?;
                    let errs = validation
                        .iter()
                        .map(|d| zero_shot_infer(d, &out.params).map(|e| (e.value - d.true_ate.unwrap_or_default()).abs()))
                        .collect::<Result<Vec<_>>>()?;
                    (errs, Some((out.params, out.log)))
                }
            };
            let mae = errors.iter().sum::<f64>() / errors.len() as f64;
            Ok((SweepRecord { lambda, validation_mae: mae }, params))
        })
        .collect();
    let mut log = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, Option<(ModelParams, Vec<LogRecord>)>)> = None;
    for run in runs {
        let (rec, params) = run?;
        log.push(rec);
        let better = match &best {
            None => true,
            Some((_, mae, _)) => rec.validation_mae < *mae,
        };
        if better {
            best = Some((rec.lambda, rec.validation_mae, params));
        }
    }
    let (best_lambda, _, fitted) = best.expect("grid is nonempty");
    let (params, run_log) = match fitted {
        Some((p, l)) => (Some(p), l),
        None => (None, Vec::new()),
    };
    Ok(SweepOutcome {
        best_lambda,
        log,
        params,
        run_log,
    })
}

/// Free values `N x S` and one intercept per treatment column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTreatmentParams {
    pub values: Array2<f64>,
    pub beta0: Array1<f64>,
    pub lambda: f64,
}

impl MultiTreatmentParams {
    /// Column `s` starts exactly where a single-treatment run on that column
    /// seeded with `substream_seed(seed, s)` would.
    pub fn init(d: &MultiTreatmentDataset, lambda: f64, seed: u64) -> Result<Self> {
        let (n, s) = d.treatments.dim();
        let mut values = Array2::zeros((n, s));
        for col in 0..s {
            let p = ModelParams::single(&d.column(col)?, lambda, substream_seed(seed, col as u64))?;
            if let ValueParams::Free { values: v } = p.value {
                values.column_mut(col).assign(&v);
            }
        }
        Ok(MultiTreatmentParams {
            values,
            beta0: Array1::zeros(s),
            lambda,
        })
    }
}

fn check_multi(d: &MultiTreatmentDataset, p: &MultiTreatmentParams) -> Result<()> {
    if p.values.dim() != d.treatments.dim() {
        return Err(CinaError::DimensionMismatch {
            expected: d.treatments.len(),
            actual: p.values.len(),
            context: "multi-treatment values".into(),
        });
    }
    if p.beta0.len() != d.n_treatments() {
        return Err(CinaError::LengthMismatch(p.beta0.len(), d.n_treatments()));
    }
    Ok(())
}

/// Sum over treatment columns of the single-treatment loss; also returns the
/// gradients with respect to the values and the intercepts.
pub fn multi_treatment_loss_grad(
    d: &MultiTreatmentDataset,
    p: &MultiTreatmentParams,
    readout: Readout,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    check_multi(d, p)?;
    let g = build_gram(standardize_columns(&d.covariates).view())?;
    let w = d.signs();
    let mut total = 0.0;
    let mut dv = Array2::zeros(p.values.raw_dim());
    let mut db = Array1::zeros(p.beta0.len());
    for s in 0..d.n_treatments() {
        let core = loss_core(&g, p.values.column(s), w.column(s), p.beta0[s], p.lambda, readout, None, false);
        total += core.terms.total();
        dv.column_mut(s).assign(&core.d_values);
        db[s] = core.d_beta0;
    }
    Ok((total, dv, db))
}

pub fn multi_treatment_loss(d: &MultiTreatmentDataset, p: &MultiTreatmentParams, readout: Readout) -> Result<f64> {
    multi_treatment_loss_grad(d, p, readout).map(|(l, _, _)| l)
}

/// Balancing weights per treatment column, `lambda V_s / (h W_s)` projected.
pub fn multi_treatment_weights(d: &MultiTreatmentDataset, p: &MultiTreatmentParams) -> Result<Vec<BalancingWeights>> {
    check_multi(d, p)?;
    let g = build_gram(standardize_columns(&d.covariates).view())?;
    let w = d.signs();
    (0..d.n_treatments())
        .map(|s| {
            let raw = Array1::from_shape_fn(g.n(), |j| p.lambda * p.values[[j, s]] * w[[j, s]] / g.normalizers[j]);
            Ok(project_onto_a(raw.view(), w.column(s))?.with_objective(&g, w.column(s)))
        })
        .collect()
}

/// Joint gradient descent over all treatment columns with the same schedule
/// and step normalization as [`train_single`].
pub fn train_multi_treatment(
    d: &MultiTreatmentDataset,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<(MultiTreatmentParams, Vec<f64>)> {
    cfg.validate()?;
    let mut p = MultiTreatmentParams::init(d, lambda, cfg.seed)?;
    let g = build_gram(standardize_columns(&d.covariates).view())?;
    let w = d.signs();
    let kappa = curvature(&g);
    let problems: Vec<FreeProblem> = (0..d.n_treatments())
        .map(|s| FreeProblem {
            g: &g,
            w: w.column(s).to_owned(),
            lambda,
            curvature: kappa,
        })
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let mut total = 0.0;
        for (s, prob) in problems.iter().enumerate() {
            let mut v = p.values.column(s).to_owned();
            let core = prob.loss_grad(&v, p.beta0[s], cfg);
            total += core.terms.total();
            prob.step(&mut v, &mut p.beta0[s], &core, lr, cfg);
            p.values.column_mut(s).assign(&v);
        }
        if !total.is_finite() {
            return Err(CinaError::NonFiniteLoss { epoch });
        }
        history.push(total);
    }
    Ok((p, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{attention_readout, expansion_readout, penalty_norm_sq};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, dx: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, dx), |_| rng.gen_range(-1.0..1.0));
        let mut t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        t.shuffle(&mut rng);
        let y = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        Dataset::new("r", x, t, y, Some(0.3)).unwrap()
    }

    #[test]
    fn zero_model_loss_is_n() {
        let d = random_dataset(7, 2, 1);
        let mut p = ModelParams::single(&d, 0.1, 0).unwrap();
        p.value = ValueParams::Free { values: Array1::zeros(7) };
        for r in [Readout::Expansion, Readout::Softmax] {
            assert_eq!(hinge_loss(&d, &p, r).unwrap(), 7.0);
        }
    }

    #[test]
    fn loss_matches_kernel_readouts() {
        let d = random_dataset(9, 3, 2);
        let p = ModelParams::single(&d, 0.3, 5).unwrap();
        let g = build_gram(standardize_columns(&d.covariates).view()).unwrap();
        let ValueParams::Free { values } = &p.value else { unreachable!() };
        let w = d.signs();
        for (r, readout) in [
            (expansion_readout(&g, values.view()), Readout::Expansion),
            (attention_readout(&g, values.view()), Readout::Softmax),
        ] {
            let hinge: f64 = (0..9).map(|i| (1.0 - w[i] * r[i]).max(0.0)).sum();
            let expect = 0.15 * penalty_norm_sq(&g, values.view(), None) + hinge;
            assert_abs_diff_eq!(hinge_loss(&d, &p, readout).unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn penalty_alone_when_margins_large() {
        let d = random_dataset(6, 2, 3);
        let mut p = ModelParams::single(&d, 0.1, 0).unwrap();
        // Two well-separated units: the readout grows linearly with V.
        let d = Dataset::new("two", array![[-1.0], [1.0]], vec![0, 1], array![0.0, 1.0], None).unwrap();
        p.value = ValueParams::Free { values: d.signs() * 50.0 };
        let t = dataset_loss(&d, &p, Readout::Expansion, 0.0).unwrap();
        assert_eq!(t.hinge, 0.0);
        assert!(t.penalty > 0.0);
    }

    #[test]
    fn mu_zero_reduction() {
        let d = random_dataset(8, 2, 4);
        let c = DatasetCollection::new(vec![d.clone()], vec![Split::Train], true).unwrap();
        let p = ModelParams::single(&d, 0.2, 1).unwrap();
        assert_eq!(
            supervised_loss(&c, &p, 0.0, Readout::Expansion).unwrap(),
            hinge_loss(&d, &p, Readout::Expansion).unwrap()
        );
    }

    #[test]
    fn missing_truth_named() {
        let mut d = random_dataset(8, 2, 4);
        d.true_ate = None;
        let p = ModelParams::single(&d, 0.2, 1).unwrap();
        let err = dataset_loss(&d, &p, Readout::Expansion, 1.0).unwrap_err();
        assert!(matches!(err, CinaError::MissingTruth(id) if id == "r"));
    }

    #[test]
    fn zero_residual_supervised_term() {
        let mut d = random_dataset(10, 2, 6);
        let p = ModelParams::single(&d, 0.2, 1).unwrap();
        let out = crate::model::forward_extract(&d, &p).unwrap();
        let a = out.alpha_raw.mapv(|v| v.max(0.0));
        d.true_ate = Some(readout_estimate(&a, d.signs().view(), d.outcomes.view()).0);
        let t = dataset_loss(&d, &p, Readout::Expansion, 1.0).unwrap();
        assert!(t.supervised < 1e-25);
    }

    fn away_from_kinks(d: &Dataset, p: &ModelParams, readout: Readout) -> bool {
        let (out, _) = forward_full(d, p).unwrap();
        let v = &out.values;
        let r = match readout {
            Readout::Expansion => expansion_readout(&out.gram, v.view()),
            Readout::Softmax => attention_readout(&out.gram, v.view()),
        };
        let w = d.signs();
        (0..d.n_units()).all(|i| (w[i] * (r[i] + p.beta0) - 1.0).abs() > 1e-3)
    }

    fn check_fd(d: &Dataset, p: &ModelParams, readout: Readout, mu: f64) -> f64 {
        let (terms, grad) = dataset_loss_grad(d, p, readout, mu).unwrap();
        let f = |q: &ModelParams| dataset_loss(d, q, readout, mu).map(|t| t.total());
        let numeric = numeric_gradient(p, 1e-5, &f).unwrap();
        max_relative_error(&grad.to_flat(), &numeric, fd_noise_floor(terms.total(), 1e-5))
    }

    #[test]
    fn free_value_gradients() {
        for seed in 0..4 {
            let d = random_dataset(8, 3, seed);
            let mut p = ModelParams::single(&d, 0.5, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            p.value = ValueParams::Free {
                values: Array1::from_shape_fn(8, |_| rng.gen_range(-3.0..3.0)),
            };
            p.beta0 = rng.gen_range(-0.5..0.5);
            for readout in [Readout::Expansion, Readout::Softmax] {
                if !away_from_kinks(&d, &p, readout) {
                    continue;
                }
                for mu in [0.0, 1.0] {
                    let e = check_fd(&d, &p, readout, mu);
                    assert!(e < 1e-4, "seed {seed} {readout:?} mu {mu}: {e}");
                }
            }
        }
    }

    #[test]
    fn amortized_gradients_with_learned_keys() {
        let mut checked = 0;
        for seed in 0..6 {
            let d = random_dataset(6, 3, seed);
            let mut p = ModelParams::amortized(3, Some(2), 0.5, seed).unwrap();
            p.beta0 = 0.1;
            if !away_from_kinks(&d, &p, Readout::Expansion) {
                continue;
            }
            for readout in [Readout::Expansion, Readout::Softmax] {
                if away_from_kinks(&d, &p, readout) {
                    let e = check_fd(&d, &p, readout, 1.0);
                    assert!(e < 1e-4, "seed {seed} {readout:?}: {e}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(cosine_lr(0, 100, 1.0, 0.1), 1.0);
        assert_abs_diff_eq!(cosine_lr(25, 100, 1.0, 0.1), 0.55, epsilon = 1e-12);
        assert_eq!(cosine_lr(50, 100, 1.0, 0.1), 0.1);
        assert_eq!(cosine_lr(99, 100, 1.0, 0.1), 0.1);
    }

    #[test]
    fn two_unit_training_pins_alpha() {
        let d = Dataset::new("two", array![[0.3], [-0.8]], vec![1, 0], array![1.0, 0.0], None).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let out = train_single(&d, &cfg, 0.1).unwrap();
        let alpha = crate::model::forward_extract(&d, &out.params).unwrap().alpha.alpha;
        assert_eq!(alpha, array![1.0, 1.0]);
    }

    #[test]
    fn small_lr_loss_non_increasing() {
        let d = random_dataset(12, 2, 9);
        let cfg = TrainConfig {
            epochs: 500,
            lr_max: 1e-3,
            lr_min: 1e-5,
            ..TrainConfig::default()
        };
        let out = train_single(&d, &cfg, 1.0).unwrap();
        for pair in out.history.windows(2) {
            assert!(pair[1] <= pair[0] * 1.01, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let d = random_dataset(10, 2, 3);
        let cfg = TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        };
        let a = train_single(&d, &cfg, 0.1).unwrap();
        let b = train_single(&d, &cfg, 0.1).unwrap();
        assert_eq!(a.history.last(), b.history.last());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn numeric_mode_tracks_analytic() {
        let d = random_dataset(6, 2, 12);
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let a = train_single(&d, &cfg, 0.1).unwrap();
        let n = train_single(
            &d,
            &TrainConfig {
                gradient_mode: GradientMode::NumericCheck,
                ..cfg
            },
            0.1,
        )
        .unwrap();
        let (fa, fn_) = (a.params.to_flat(), n.params.to_flat());
        for (x, y) in fa.iter().zip(&fn_) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    fn two_datasets(shared: bool) -> DatasetCollection {
        let a = Dataset { id: "a".into(), ..random_dataset(10, 2, 1) };
        let b = Dataset { id: "b".into(), ..random_dataset(14, 2, 2) };
        DatasetCollection::new(vec![a, b], vec![Split::Train, Split::Train], shared).unwrap()
    }

    #[test]
    fn shuffle_refused_across_graphs() {
        let cfg = TrainConfig {
            shuffle_augment: true,
            epochs: 1,
            ..TrainConfig::multi()
        };
        let err = train_multi(&two_datasets(false), &cfg, 0.1).unwrap_err();
        assert!(matches!(err, CinaError::Config(_)));
    }

    #[test]
    fn shuffle_conserves_units() {
        let c = two_datasets(true);
        let refs: Vec<&Dataset> = c.datasets.iter().collect();
        let out = shuffle_units(&refs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out[0].n_units(), 10);
        assert_eq!(out[1].n_units(), 14);
        let treated: usize = out.iter().map(|d| d.n_treated()).sum();
        assert_eq!(treated, c.datasets.iter().map(|d| d.n_treated()).sum::<usize>());
        let ysum: f64 = out.iter().map(|d| d.outcomes.sum()).sum();
        let ysum0: f64 = c.datasets.iter().map(|d| d.outcomes.sum()).sum();
        assert_abs_diff_eq!(ysum, ysum0, epsilon = 1e-12);
    }

    #[test]
    fn multi_training_runs_and_logs() {
        let cfg = TrainConfig {
            epochs: 3,
            log_every: 1,
            ..TrainConfig::multi()
        };
        let out = train_multi(&two_datasets(true), &cfg, 0.1).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.log.len(), 3);
        assert!(out.params.is_amortized());
    }

    #[test]
    fn singleton_grid_returns_its_lambda() {
        let mut c = two_datasets(true);
        c.splits[1] = Split::Validation;
        let cfg = TrainConfig {
            lambda_min: 0.03,
            lambda_max: 0.03,
            grid_size: 1,
            epochs: 20,
            ..TrainConfig::default()
        };
        let out = lambda_sweep(&c, &cfg, Trainer::Single).unwrap();
        assert_eq!(out.best_lambda, 0.03);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn sweep_needs_validation_truth() {
        let c = two_datasets(true);
        let err = lambda_sweep(&c, &TrainConfig::default(), Trainer::Single).unwrap_err();
        assert!(matches!(err, CinaError::NoValidationTruth));
    }

    fn multi_dataset(cols: &[Vec<u8>]) -> MultiTreatmentDataset {
        let d = random_dataset(cols[0].len(), 2, 21);
        let t = Array2::from_shape_fn((cols[0].len(), cols.len()), |(i, s)| cols[s][i]);
        MultiTreatmentDataset::new("m", d.covariates, t, d.outcomes).unwrap()
    }

    #[test]
    fn multi_treatment_reductions() {
        let t: Vec<u8> = vec![1, 0, 1, 1, 0, 0, 1, 0];
        let one = multi_dataset(&[t.clone()]);
        let p1 = MultiTreatmentParams::init(&one, 0.2, 3).unwrap();
        let single = one.column(0).unwrap();
        let mut sp = ModelParams::single(&single, 0.2, 0).unwrap();
        sp.value = ValueParams::Free { values: p1.values.column(0).to_owned() };
        assert_abs_diff_eq!(
            multi_treatment_loss(&one, &p1, Readout::Expansion).unwrap(),
            hinge_loss(&single, &sp, Readout::Expansion).unwrap(),
            epsilon = 1e-12
        );
        let two = multi_dataset(&[t.clone(), t]);
        let mut p2 = MultiTreatmentParams::init(&two, 0.2, 3).unwrap();
        let col = p2.values.column(0).to_owned();
        p2.values.column_mut(1).assign(&col);
        assert_abs_diff_eq!(
            multi_treatment_loss(&two, &p2, Readout::Expansion).unwrap(),
            2.0 * multi_treatment_loss(&one, &p1, Readout::Expansion).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn multi_treatment_columns_independent() {
        let cols = vec![vec![1, 0, 1, 1, 0, 0, 1, 0, 1, 0], vec![0, 0, 1, 0, 1, 1, 1, 0, 0, 1]];
        let d = multi_dataset(&cols);
        let cfg = TrainConfig {
            epochs: 400,
            seed: 5,
            ..TrainConfig::default()
        };
        let (p, _) = train_multi_treatment(&d, &cfg, 0.1).unwrap();
        let joint = multi_treatment_weights(&d, &p).unwrap();
        for s in 0..2 {
            let col_cfg = TrainConfig {
                seed: substream_seed(5, s as u64),
                ..cfg.clone()
            };
            let single = d.column(s).unwrap();
            let out = train_single(&single, &col_cfg, 0.1).unwrap();
            let alpha = crate::model::forward_extract(&single, &out.params).unwrap().alpha.alpha;
            for (a, b) in alpha.iter().zip(&joint[s].alpha) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn multi_treatment_empty_column_named() {
        let t = Array2::from_shape_vec((3, 2), vec![1, 1, 0, 1, 1, 1]).unwrap();
        let err = MultiTreatmentDataset::new("m", Array2::zeros((3, 1)), t, Array1::zeros(3)).unwrap_err();
        assert!(matches!(err, CinaError::EmptyTreatmentColumn { column: 1, group: "control" }));
    }
}

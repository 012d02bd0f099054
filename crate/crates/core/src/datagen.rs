//! Synthetic collections with known treatment effects.
//!
//! * Simulation A: correlated Gaussian covariates, logistic treatment on a
//!   fixed nonlinear feature map, linear outcome with constant effect `tau`.
//! * ER SCMs: random linear structural causal models on an Erdos-Renyi DAG
//!   with a binarized treatment node.
//!
//! Every dataset draws from its own RNG substream so generation is
//! reproducible and independent of iteration order.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{standardize_columns, standardize_vector, Dataset, DatasetCollection, Split};
use crate::error::{CinaError, Result};

/// Simulation A covariate dimension.
pub const SIM_A_DX: usize = 10;

/// Covariate pairs sharing correlation [`PAIR_CORRELATION`].
pub const CORRELATED_PAIRS: [(usize, usize); 4] = [(0, 1), (2, 3), (4, 5), (6, 7)];
pub const PAIR_CORRELATION: f64 = 0.5;

/// Standard deviation of the outcome noise in Simulation A.
pub const SIM_A_NOISE_STD: f64 = 0.1;

/// Bound on rejection-sampling retries in every generator.
pub const MAX_RETRIES: usize = 100;

/// Derives an independent seed for stream `stream` (splitmix64 finalizer).
pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, stream))
}

/// The fixed nonlinear, non-additive propensity features.
pub fn h_nl(x: &[f64]) -> [f64; 10] {
    [
        x[0],
        x[1],
        x[2] * x[2],
        x[3],
        x[4],
        x[1] * x[2],
        x[3] * x[4],
        x[5],
        x[6] * x[6],
        x[0] * x[6],
    ]
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Number of units per dataset: a constant or an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UnitCount {
    Fixed(usize),
    Range([usize; 2]),
}

impl UnitCount {
    fn validate(self) -> Result<()> {
        match self {
            UnitCount::Fixed(n) if n < 2 => {
                Err(CinaError::Config(format!("units must be >= 2, got {n}")))
            }
            UnitCount::Range([lo, hi]) if lo < 2 || lo > hi => {
                Err(CinaError::Config(format!("invalid unit range [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }

    fn sample(self, rng: &mut impl Rng) -> usize {
        match self {
            UnitCount::Fixed(n) => n,
            UnitCount::Range([lo, hi]) => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaPrior {
    /// One coefficient vector shared by every dataset.
    Fixed,
    /// `U(-1, 1)^10` drawn per dataset.
    SharedPrior,
    /// Train/validation from `U(-1, 0)^10`, test from `U(0, 1)^10`.
    DisjointSupportPrior,
}

fn default_tau() -> f64 {
    -0.4
}

fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimAConfig {
    pub n_datasets: usize,
    pub units_per_dataset: UnitCount,
    #[serde(default = "default_dx")]
    pub dx: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub eta_prior: EtaPrior,
    #[serde(default)]
    pub seed: u64,
    /// Train / validation / test fractions, assigned in dataset order.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
}

fn default_dx() -> usize {
    SIM_A_DX
}

impl SimAConfig {
    pub fn new(n_datasets: usize, units: UnitCount, eta_prior: EtaPrior, seed: u64) -> Self {
        SimAConfig {
            n_datasets,
            units_per_dataset: units,
            dx: SIM_A_DX,
            tau: default_tau(),
            eta_prior,
            seed,
            split_fractions: default_fractions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dx != SIM_A_DX {
            return Err(CinaError::Config(format!(
                "simulation A requires dx = {SIM_A_DX}, got {}",
                self.dx
            )));
        }
        if !self.tau.is_finite() {
            return Err(CinaError::Config("tau must be finite".into()));
        }
        if self.n_datasets == 0 {
            return Err(CinaError::Config("n_datasets must be positive".into()));
        }
        self.units_per_dataset.validate()?;
        validate_fractions(self.split_fractions)
    }
}

fn validate_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CinaError::Config(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Splits in dataset order: first train, then validation, then test.
pub fn assign_splits(n: usize, fractions: [f64; 3]) -> Vec<Split> {
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train.min(n));
    (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Lower Cholesky factor of the pairwise-correlated covariance.
pub fn sim_a_cholesky() -> Array2<f64> {
    let mut l = Array2::eye(SIM_A_DX);
    for (a, b) in CORRELATED_PAIRS {
        l[[b, a]] = PAIR_CORRELATION;
        l[[b, b]] = (1.0 - PAIR_CORRELATION * PAIR_CORRELATION).sqrt();
    }
    l
}

/// Parameters shared by all datasets of one Simulation A experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimAParams {
    pub gamma0: f64,
    pub gamma: Array1<f64>,
    pub eta: Array1<f64>,
}

impl SimAParams {
    pub fn draw(cfg: &SimAConfig) -> Self {
        let mut rng = substream(cfg.seed, 0);
        let gamma0: f64 = StandardNormal.sample(&mut rng);
        let gamma = Array1::from_shape_fn(SIM_A_DX, |_| StandardNormal.sample(&mut rng));
        let eta = Array1::from_shape_fn(SIM_A_DX, |_| rng.gen_range(-1.0..1.0));
        SimAParams { gamma0, gamma, eta }
    }
}

pub fn gen_sim_a(cfg: &SimAConfig) -> Result<DatasetCollection> {
    cfg.validate()?;
    let shared = SimAParams::draw(cfg);
    let splits = assign_splits(cfg.n_datasets, cfg.split_fractions);
    let l = sim_a_cholesky();
    let mut datasets = Vec::with_capacity(cfg.n_datasets);
    for (m, split) in splits.iter().enumerate() {
        let mut rng = substream(cfg.seed, m as u64 + 1);
        let eta = match cfg.eta_prior {
            EtaPrior::Fixed => shared.eta.clone(),
            EtaPrior::SharedPrior => Array1::from_shape_fn(SIM_A_DX, |_| rng.gen_range(-1.0..1.0)),
            EtaPrior::DisjointSupportPrior => {
                let (lo, hi) = if *split == Split::Test { (0.0, 1.0) } else { (-1.0, 0.0) };
                Array1::from_shape_fn(SIM_A_DX, |_| rng.gen_range(lo..hi))
            }
        };
        let n = cfg.units_per_dataset.sample(&mut rng);
        let id = format!("sima-{m:04}");
        let d = sim_a_dataset(&id, n, &eta, &shared, cfg.tau, &l, &mut rng)?;
        datasets.push(d);
    }
    DatasetCollection::new(datasets, splits, true)
}

fn sim_a_dataset(
    id: &str,
    n: usize,
    eta: &Array1<f64>,
    p: &SimAParams,
    tau: f64,
    l: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    for _ in 0..MAX_RETRIES {
        let z = Array2::from_shape_fn((n, SIM_A_DX), |_| StandardNormal.sample(&mut *rng));
        let x = z.dot(&l.t());
        let mut t = Vec::with_capacity(n);
        let mut y = Array1::zeros(n);
        for (i, row) in x.outer_iter().enumerate() {
            let row = row.to_vec();
            let logit: f64 = h_nl(&row).iter().zip(eta).map(|(h, e)| h * e).sum();
            let ti = u8::from(rng.gen::<f64>() < sigmoid(logit));
            let noise: f64 = StandardNormal.sample(&mut *rng);
            y[i] = p.gamma0 + row.iter().zip(&p.gamma).map(|(a, b)| a * b).sum::<f64>()
                + tau * f64::from(ti)
                + SIM_A_NOISE_STD * noise;
            t.push(ti);
        }
        match Dataset::new(id, x, t, y, Some(tau)) {
            Ok(d) => return Ok(d),
            Err(CinaError::DegenerateDataset { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CinaError::Generation(format!(
        "dataset `{id}` had an empty treatment group after {MAX_RETRIES} attempts"
    )))
}

// ----- linear SCMs --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub adjacency: Array2<bool>,
    pub weights: Array2<f64>,
    pub noise_std: Array1<f64>,
    pub treatment_node: usize,
    pub effect_node: usize,
}

impl ScmSpec {
    pub fn n_nodes(&self) -> usize {
        self.noise_std.len()
    }

    /// Nodes in a topological order, or `CyclicGraph`.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let d = self.n_nodes();
        let mut indegree: Vec<usize> = (0..d)
            .map(|j| (0..d).filter(|&i| self.adjacency[[i, j]]).count())
            .collect();
        let mut ready: Vec<usize> = (0..d).rev().filter(|&j| indegree[j] == 0).collect();
        let mut order = Vec::with_capacity(d);
        while let Some(i) = ready.pop() {
            order.push(i);
            for j in (0..d).rev() {
                if self.adjacency[[i, j]] {
                    indegree[j] -= 1;
                    if indegree[j] == 0 {
                        ready.push(j);
                    }
                }
            }
        }
        if order.len() == d {
            Ok(order)
        } else {
            Err(CinaError::CyclicGraph)
        }
    }

    pub fn is_descendant(&self, from: usize, to: usize) -> bool {
        let d = self.n_nodes();
        let mut seen = vec![false; d];
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            for j in 0..d {
                if self.adjacency[[i, j]] && !seen[j] {
                    if j == to {
                        return true;
                    }
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        false
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_nodes();
        if self.adjacency.dim() != (d, d) || self.weights.dim() != (d, d) {
            return Err(CinaError::Validation("scm matrices must be d x d".into()));
        }
        if self.treatment_node >= d || self.effect_node >= d {
            return Err(CinaError::Validation("scm node index out of range".into()));
        }
        if self.treatment_node == self.effect_node {
            return Err(CinaError::Validation("treatment and effect nodes coincide".into()));
        }
        self.topological_order()?;
        for ((i, j), &w) in self.weights.indexed_iter() {
            if !self.adjacency[[i, j]] && w != 0.0 {
                return Err(CinaError::Validation(format!("weight on non-edge ({i}, {j})")));
            }
        }
        Ok(())
    }

    /// Draws `n` joint samples; `intervention` fixes the treatment value.
    /// `noise` supplies the standard-normal draws (n x d) so runs can be paired.
    pub fn simulate(
        &self,
        noise: &Array2<f64>,
        bernoulli: &Array1<f64>,
        intervention: Option<f64>,
    ) -> Result<Array2<f64>> {
        let order = self.topological_order()?;
        let (n, d) = (noise.nrows(), self.n_nodes());
        let mut x = Array2::zeros((n, d));
        for s in 0..n {
            for &j in &order {
                let parents: f64 = (0..d)
                    .filter(|&i| self.adjacency[[i, j]])
                    .map(|i| self.weights[[i, j]] * x[[s, i]])
                    .sum();
                x[[s, j]] = if j == self.treatment_node {
                    match intervention {
                        Some(t) => t,
                        None => f64::from(u8::from(bernoulli[s] < sigmoid(parents))),
                    }
                } else {
                    parents + self.noise_std[j] * noise[[s, j]]
                };
            }
        }
        Ok(x)
    }
}

/// Samples a random ER-DAG SCM whose effect node descends from the treatment.
pub fn sample_scm(d: usize, rng: &mut impl Rng) -> Result<ScmSpec> {
    if d < 3 {
        return Err(CinaError::Config(format!("an scm needs at least 3 nodes, got {d}")));
    }
    for _ in 0..MAX_RETRIES {
        let p: f64 = rng.gen_range(0.25..0.5);
        let mut adjacency = Array2::from_elem((d, d), false);
        let mut weights = Array2::zeros((d, d));
        for i in 0..d {
            for j in i + 1..d {
                if rng.gen::<f64>() < p {
                    adjacency[[i, j]] = true;
                    weights[[i, j]] = rng.gen_range(0.0..3.0);
                }
            }
        }
        let noise_std = Array1::from_shape_fn(d, |_| rng.gen_range(0.2..2.0));
        let treatment_node = rng.gen_range(0..d);
        let effect_node = (treatment_node + rng.gen_range(1..d)) % d;
        let spec = ScmSpec {
            adjacency,
            weights,
            noise_std,
            treatment_node,
            effect_node,
        };
        if spec.is_descendant(treatment_node, effect_node) {
            return Ok(spec);
        }
    }
    Err(CinaError::Generation(format!(
        "no treatment -> effect path after {MAX_RETRIES} graphs"
    )))
}

/// Total effect of the treatment on the effect node: sum over directed paths
/// of edge-weight products, by forward accumulation in topological order.
pub fn true_ate_linear_scm(spec: &ScmSpec) -> Result<f64> {
    let order = spec.topological_order()?;
    let d = spec.n_nodes();
    let mut effect = vec![0.0; d];
    effect[spec.treatment_node] = 1.0;
    for &j in &order {
        if j == spec.treatment_node {
            continue;
        }
        effect[j] = (0..d)
            .filter(|&i| spec.adjacency[[i, j]])
            .map(|i| spec.weights[[i, j]] * effect[i])
            .sum();
    }
    Ok(effect[spec.effect_node])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloAte {
    pub mean: f64,
    pub std_err: f64,
}

/// Interventional estimate of the ATE: `do(T=1)` minus `do(T=0)`.
/// With `paired`, both arms share the same noise draws.
pub fn monte_carlo_ate(
    spec: &ScmSpec,
    n: usize,
    rng: &mut impl Rng,
    paired: bool,
) -> Result<MonteCarloAte> {
    if n == 0 {
        return Err(CinaError::Validation("monte carlo needs n >= 1".into()));
    }
    let d = spec.n_nodes();
    let e = spec.effect_node;
    let unused = Array1::zeros(0);
    let noise1 = normal_matrix(n, d, rng);
    let noise0 = if paired { noise1.clone() } else { normal_matrix(n, d, rng) };
    let y1 = spec.simulate(&noise1, &unused, Some(1.0))?;
    let y0 = spec.simulate(&noise0, &unused, Some(0.0))?;
    let diffs: Vec<f64> = (0..n).map(|s| y1[[s, e]] - y0[[s, e]]).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MonteCarloAte { mean, std_err })
}

fn normal_matrix(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut *rng))
}

pub fn true_ate_monte_carlo(spec: &ScmSpec, n: usize, rng: &mut impl Rng) -> Result<f64> {
    monte_carlo_ate(spec, n, rng, true).map(|m| m.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErConfig {
    pub nodes: usize,
    pub n_datasets: usize,
    pub units_per_dataset: UnitCount,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
}

impl ErConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 3 {
            return Err(CinaError::Config(format!("nodes must be >= 3, got {}", self.nodes)));
        }
        if self.n_datasets == 0 {
            return Err(CinaError::Config("n_datasets must be positive".into()));
        }
        self.units_per_dataset.validate()?;
        validate_fractions(self.split_fractions)
    }
}

/// One random SCM per dataset; covariates are all nodes except treatment and
/// effect. Covariates and outcome are standardized, the treatment stays binary.
pub fn gen_er_scm(cfg: &ErConfig) -> Result<(DatasetCollection, Vec<ScmSpec>)> {
    cfg.validate()?;
    let splits = assign_splits(cfg.n_datasets, cfg.split_fractions);
    let mut datasets = Vec::with_capacity(cfg.n_datasets);
    let mut specs = Vec::with_capacity(cfg.n_datasets);
    for m in 0..cfg.n_datasets {
        let mut rng = substream(cfg.seed, m as u64 + 1);
        let id = format!("er-{m:04}");
        let (d, spec) = er_dataset(&id, cfg, &mut rng)?;
        datasets.push(d);
        specs.push(spec);
    }
    Ok((DatasetCollection::new(datasets, splits, false)?, specs))
}

fn er_dataset(id: &str, cfg: &ErConfig, rng: &mut ChaCha8Rng) -> Result<(Dataset, ScmSpec)> {
    let d = cfg.nodes;
    for _ in 0..MAX_RETRIES {
        let spec = sample_scm(d, rng)?;
        let n = cfg.units_per_dataset.sample(rng);
        let noise = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut *rng));
        let coins = Array1::from_shape_fn(n, |_| rng.gen::<f64>());
        let x = spec.simulate(&noise, &coins, None)?;
        let covariate_nodes: Vec<usize> = (0..d)
            .filter(|&j| j != spec.treatment_node && j != spec.effect_node)
            .collect();
        let raw_cov = x.select(ndarray::Axis(1), &covariate_nodes);
        let t: Vec<u8> = x.column(spec.treatment_node).iter().map(|&v| v as u8).collect();
        let (y, _, y_std) = standardize_vector(x.column(spec.effect_node));
        if y_std == 0.0 {
            continue;
        }
        let ate = true_ate_linear_scm(&spec)? / y_std;
        match Dataset::new(id, standardize_columns(&raw_cov), t, y, Some(ate)) {
            Ok(ds) => return Ok((ds, spec)),
            Err(CinaError::DegenerateDataset { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CinaError::Generation(format!(
        "dataset `{id}` stayed degenerate after {MAX_RETRIES} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_from_edges(d: usize, edges: &[(usize, usize, f64)], t: usize, e: usize) -> ScmSpec {
        let mut adjacency = Array2::from_elem((d, d), false);
        let mut weights = Array2::zeros((d, d));
        for &(i, j, w) in edges {
            adjacency[[i, j]] = true;
            weights[[i, j]] = w;
        }
        ScmSpec {
            adjacency,
            weights,
            noise_std: Array1::from_elem(d, 1.0),
            treatment_node: t,
            effect_node: e,
        }
    }

    #[test]
    fn chain_effect_is_product() {
        let s = spec_from_edges(3, &[(0, 1, 2.0), (1, 2, 3.0)], 0, 2);
        assert_eq!(true_ate_linear_scm(&s).unwrap(), 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((true_ate_monte_carlo(&s, 1000, &mut rng).unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_paths_add() {
        let s = spec_from_edges(4, &[(0, 1, 2.0), (1, 3, 1.0), (0, 2, 1.0), (2, 3, 5.0)], 0, 3);
        assert_eq!(true_ate_linear_scm(&s).unwrap(), 7.0);
    }

    #[test]
    fn no_path_is_zero() {
        let s = spec_from_edges(3, &[(1, 0, 2.0), (1, 2, 3.0)], 0, 2);
        assert_eq!(true_ate_linear_scm(&s).unwrap(), 0.0);
        assert!(!s.is_descendant(0, 2));
    }

    #[test]
    fn cycle_detected() {
        let s = spec_from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)], 0, 2);
        assert!(matches!(true_ate_linear_scm(&s), Err(CinaError::CyclicGraph)));
    }

    #[test]
    fn sampled_scm_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let s = sample_scm(8, &mut rng).unwrap();
            s.validate().unwrap();
            assert!(s.is_descendant(s.treatment_node, s.effect_node));
            assert!(s.weights.iter().all(|&w| (0.0..=3.0).contains(&w)));
            assert!(s.noise_std.iter().all(|&v| (0.2..=2.0).contains(&v)));
        }
    }

    #[test]
    fn sim_a_truth_and_shapes() {
        let cfg = SimAConfig::new(4, UnitCount::Fixed(64), EtaPrior::Fixed, 3);
        let c = gen_sim_a(&cfg).unwrap();
        assert_eq!(c.len(), 4);
        for d in &c.datasets {
            assert_eq!(d.true_ate, Some(-0.4));
            assert_eq!(d.n_units(), 64);
            assert_eq!(d.n_covariates(), 10);
        }
    }

    #[test]
    fn sim_a_deterministic() {
        let cfg = SimAConfig::new(3, UnitCount::Range([20, 40]), EtaPrior::SharedPrior, 9);
        assert_eq!(gen_sim_a(&cfg).unwrap(), gen_sim_a(&cfg).unwrap());
    }

    #[test]
    fn er_standardized_outputs() {
        let cfg = ErConfig {
            nodes: 6,
            n_datasets: 3,
            units_per_dataset: UnitCount::Fixed(200),
            seed: 1,
            split_fractions: [0.6, 0.2, 0.2],
        };
        let (c, specs) = gen_er_scm(&cfg).unwrap();
        assert_eq!(specs.len(), 3);
        assert!(!c.shared_graph);
        for d in &c.datasets {
            assert_eq!(d.n_covariates(), 4);
            let mean = d.outcomes.mean().unwrap();
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn splits_in_order() {
        let s = assign_splits(10, [0.6, 0.2, 0.2]);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 6);
        assert_eq!(s[6], Split::Validation);
        assert_eq!(s[9], Split::Test);
    }
}

//! Effect estimation from balancing weights: ATE readout, zero-shot inference
//! with a trained model, and the flip-one-unit ITE approximation.

use std::time::Instant;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{standardize_columns, Dataset};
use crate::error::{CinaError, Result};
use crate::kernel::build_gram;
use crate::model::{forward_extract, ModelParams};
use crate::oracle::{solve_balancing_qp_with, BalancingWeights, QpOptions};

/// Neighbors whose counterfactual weight is at most this are skipped.
pub const ITE_WEIGHT_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub dataset_id: String,
    pub value: f64,
    pub weights: BalancingWeights,
    pub wall_time_s: f64,
}

/// `sum_T a_i Y_i - sum_C a_i Y_i`.
pub fn weighted_difference(alpha: ArrayView1<f64>, w: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    alpha
        .iter()
        .zip(w)
        .zip(y)
        .map(|((a, s), v)| a * s * v)
        .sum()
}

pub fn estimate_ate(weights: &BalancingWeights, d: &Dataset) -> Result<AteEstimate> {
    if weights.alpha.len() != d.n_units() {
        return Err(CinaError::LengthMismatch(weights.alpha.len(), d.n_units()));
    }
    let value = weighted_difference(weights.alpha.view(), d.signs().view(), d.outcomes.view());
    if !value.is_finite() {
        return Err(CinaError::Validation(format!("non-finite estimate on `{}`", d.id)));
    }
    Ok(AteEstimate {
        dataset_id: d.id.clone(),
        value,
        weights: weights.clone(),
        wall_time_s: 0.0,
    })
}

/// One forward pass and the weighted difference; parameters are only read.
pub fn zero_shot_infer(d: &Dataset, p: &ModelParams) -> Result<AteEstimate> {
    let start = Instant::now();
    let out = forward_extract(d, p)?;
    let mut est = estimate_ate(&out.alpha, d)?;
    est.wall_time_s = start.elapsed().as_secs_f64();
    Ok(est)
}

/// Anything that maps a dataset to balancing weights in `A`.
pub trait BalancingSolver {
    fn weights(&self, d: &Dataset) -> Result<Array1<f64>>;
}

/// Exact balancing QP on standardized covariates.
#[derive(Debug, Clone, Default)]
pub struct QpOracleSolver {
    pub options: QpOptions,
}

impl QpOracleSolver {
    pub fn new() -> Self {
        QpOracleSolver {
            options: QpOptions::smo(),
        }
    }
}

impl BalancingSolver for QpOracleSolver {
    fn weights(&self, d: &Dataset) -> Result<Array1<f64>> {
        let keys = standardize_columns(&d.covariates);
        let g = build_gram(keys.view())?;
        let (b, _) = solve_balancing_qp_with(&g, d.signs().view(), &self.options)?;
        Ok(b.alpha)
    }
}

/// Weights from a trained model's forward pass.
#[derive(Debug, Clone)]
pub struct ModelSolver<'a> {
    pub params: &'a ModelParams,
}

impl BalancingSolver for ModelSolver<'_> {
    fn weights(&self, d: &Dataset) -> Result<Array1<f64>> {
        Ok(forward_extract(d, self.params)?.alpha.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteEstimate {
    pub unit_index: usize,
    pub value: f64,
    pub neighbor_count: usize,
    pub contributing_estimates: Vec<f64>,
    /// Neighbors dropped by the weight guard or a degenerate flip.
    pub skipped: Vec<usize>,
}

/// Indices of the `k` nearest units (Euclidean, standardized covariates),
/// the unit itself first.
pub fn nearest_units(d: &Dataset, unit: usize, k: usize) -> Vec<usize> {
    let z = standardize_columns(&d.covariates);
    let target = z.row(unit);
    let mut dist: Vec<(f64, usize)> = z
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let d2 = row.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (if i == unit { -1.0 } else { d2 }, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Flip-one-unit counterfactual readout averaged over `k` neighbors.
pub fn estimate_ite(
    d: &Dataset,
    solver: &dyn BalancingSolver,
    unit: usize,
    k: usize,
) -> Result<IteEstimate> {
    if unit >= d.n_units() {
        return Err(CinaError::Validation(format!(
            "unit {unit} out of range for {} units",
            d.n_units()
        )));
    }
    if k == 0 {
        return Err(CinaError::Validation("k must be at least 1".into()));
    }
    let alpha = solver.weights(d)?;
    let neighbors = nearest_units(d, unit, k);
    let mut contributing = Vec::with_capacity(neighbors.len());
    let mut skipped = Vec::new();
    for &i in &neighbors {
        match counterfactual_ite(d, solver, &alpha, i)? {
            Some(v) => contributing.push(v),
            None => skipped.push(i),
        }
    }
    if contributing.is_empty() {
        return Err(CinaError::NoIteEstimate(neighbors.len()));
    }
    let value = contributing.iter().sum::<f64>() / contributing.len() as f64;
    Ok(IteEstimate {
        unit_index: unit,
        value,
        neighbor_count: contributing.len(),
        contributing_estimates: contributing,
        skipped,
    })
}

/// `W_i (Y_i - Yhat_i)` where `Yhat_i` is the imputed outcome under the
/// opposite treatment; `None` when the flip is degenerate or guarded.
fn counterfactual_ite(
    d: &Dataset,
    solver: &dyn BalancingSolver,
    alpha: &Array1<f64>,
    i: usize,
) -> Result<Option<f64>> {
    let mut flipped = d.clone();
    flipped.treatments[i] = 1 - flipped.treatments[i];
    if flipped.validate().is_err() {
        return Ok(None);
    }
    let alpha_hat = solver.weights(&flipped)?;
    if alpha_hat[i].abs() <= ITE_WEIGHT_GUARD {
        return Ok(None);
    }
    let t_i = d.treatments[i];
    let y = &d.outcomes;
    let mut acc = -alpha[i] * y[i];
    for j in 0..d.n_units() {
        if j == i {
            continue;
        }
        let delta = (alpha_hat[j] - alpha[j]) * y[j];
        if d.treatments[j] == t_i {
            acc += delta;
        } else {
            acc -= delta;
        }
    }
    let y_hat = acc / alpha_hat[i];
    let w_i = if t_i == 1 { 1.0 } else { -1.0 };
    Ok(Some(w_i * (y[i] - y_hat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            "toy",
            array![[0.0], [1.0], [2.0], [3.0]],
            vec![1, 1, 0, 0],
            array![1.0, 2.0, 3.0, 4.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn uniform_weights_group_means() {
        let d = toy();
        let b = BalancingWeights::uniform(d.signs().view()).unwrap();
        assert_eq!(estimate_ate(&b, &d).unwrap().value, -2.0);
    }

    #[test]
    fn point_mass() {
        let d = toy();
        let b = BalancingWeights::new(array![0.0, 1.0, 1.0, 0.0], d.signs().view());
        assert_eq!(estimate_ate(&b, &d).unwrap().value, 2.0 - 3.0);
    }

    #[test]
    fn neighbors_start_with_unit() {
        let d = toy();
        assert_eq!(nearest_units(&d, 2, 3), vec![2, 1, 3]);
        assert_eq!(nearest_units(&d, 0, 1), vec![0]);
    }

    struct Uniform;
    impl BalancingSolver for Uniform {
        fn weights(&self, d: &Dataset) -> Result<Array1<f64>> {
            Ok(BalancingWeights::uniform(d.signs().view())?.alpha)
        }
    }

    #[test]
    fn single_neighbor_is_its_contribution() {
        let d = toy();
        let e = estimate_ite(&d, &Uniform, 1, 1).unwrap();
        assert_eq!(e.neighbor_count, 1);
        assert_eq!(e.value, e.contributing_estimates[0]);
    }

    #[test]
    fn degenerate_flip_skipped() {
        let d = Dataset::new("t", array![[0.0], [1.0], [2.0]], vec![1, 0, 0], array![1.0, 2.0, 3.0], None)
            .unwrap();
        // Flipping the only treated unit empties its group.
        let err = estimate_ite(&d, &Uniform, 0, 1).unwrap_err();
        assert!(matches!(err, CinaError::NoIteEstimate(1)));
    }
}

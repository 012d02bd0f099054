//! Reference estimators: naive group difference, logistic-propensity IPW and
//! its self-normalized variant, and the mean-of-training-truths predictor.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{standardize_columns, Dataset, DatasetCollection};
use crate::error::{CinaError, Result};
use crate::inference::{estimate_ate, AteEstimate};
use crate::oracle::BalancingWeights;

pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);
const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;
const RIDGE: f64 = 1e-6;

/// Logistic model on standardized covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coefficients: Array1<f64>,
    pub intercept: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PropensityModel {
    /// Propensities for the rows of `z` (already standardized).
    pub fn predict(&self, z: &Array2<f64>) -> Array1<f64> {
        (z.dot(&self.coefficients) + self.intercept).mapv(sigmoid)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn naive_estimator(d: &Dataset) -> Result<AteEstimate> {
    estimate_ate(&BalancingWeights::uniform(d.signs().view())?, d)
}

/// Ridge-penalized logistic regression by iteratively reweighted least
/// squares; the intercept is not penalized. Returns the last iterate with
/// `converged = false` when the step never falls below tolerance.
pub fn fit_propensity(d: &Dataset) -> PropensityModel {
    let z = standardize_columns(&d.covariates);
    let (n, p) = z.dim();
    let k = p + 1;
    let design = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { z[[i, j - 1]] });
    let t = DVector::from_iterator(n, d.treatments.iter().map(|&t| t as f64));
    let mut beta = DVector::<f64>::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        let eta = &design * &beta;
        let mu = eta.map(sigmoid);
        let weights = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        // Newton step: (X' S X + R) delta = X' (t - mu) - R beta.
        let mut hess = design.transpose() * DMatrix::from_diagonal(&weights) * &design;
        let mut grad = design.transpose() * (&t - &mu);
        for j in 1..k {
            hess[(j, j)] += RIDGE;
            grad[j] -= RIDGE * beta[j];
        }
        let Some(chol) = hess.cholesky() else { break };
        let delta = chol.solve(&grad);
        beta += &delta;
        if delta.amax() < IRLS_TOL {
            converged = true;
            break;
        }
    }
    PropensityModel {
        coefficients: Array1::from_iter(beta.iter().skip(1).copied()),
        intercept: beta[0],
        converged,
        iterations,
    }
}

fn clipped_propensities(d: &Dataset) -> Array1<f64> {
    let model = fit_propensity(d);
    model
        .predict(&standardize_columns(&d.covariates))
        .mapv(|e| e.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1))
}

/// Horvitz-Thompson IPW. The returned weights are the per-unit IPW
/// coefficients and need not lie in `A`.
pub fn ipw_estimator(d: &Dataset) -> Result<AteEstimate> {
    let e = clipped_propensities(d);
    ipw_with_propensities(d, &e)
}

pub fn ipw_with_propensities(d: &Dataset, e: &Array1<f64>) -> Result<AteEstimate> {
    let n = d.n_units() as f64;
    let alpha = Array1::from_shape_fn(d.n_units(), |i| {
        if d.treatments[i] == 1 {
            1.0 / (n * e[i])
        } else {
            1.0 / (n * (1.0 - e[i]))
        }
    });
    estimate_ate(&BalancingWeights::new(alpha, d.signs().view()), d)
}

pub fn self_normalized_ipw(d: &Dataset) -> Result<AteEstimate> {
    let e = clipped_propensities(d);
    snipw_with_propensities(d, &e)
}

pub fn snipw_with_propensities(d: &Dataset, e: &Array1<f64>) -> Result<AteEstimate> {
    let raw = Array1::from_shape_fn(d.n_units(), |i| {
        if d.treatments[i] == 1 {
            1.0 / e[i]
        } else {
            1.0 / (1.0 - e[i])
        }
    });
    let w = d.signs();
    let (st, sc) = raw
        .iter()
        .zip(&w)
        .fold((0.0, 0.0), |(t, c), (r, s)| if *s > 0.0 { (t + r, c) } else { (t, c + r) });
    let alpha = Array1::from_shape_fn(raw.len(), |i| raw[i] / if w[i] > 0.0 { st } else { sc });
    estimate_ate(&BalancingWeights::new(alpha, w.view()), d)
}

/// Mean of the training truths, reported for `test` with uniform weights.
pub fn mean_prediction(training: &DatasetCollection, test: &Dataset) -> Result<AteEstimate> {
    if training.is_empty() {
        return Err(CinaError::EmptyCollection);
    }
    let mut sum = 0.0;
    for d in &training.datasets {
        sum += d.true_ate.ok_or_else(|| CinaError::MissingTruth(d.id.clone()))?;
    }
    let mut est = naive_estimator(test)?;
    est.value = sum / training.len() as f64;
    Ok(est)
}

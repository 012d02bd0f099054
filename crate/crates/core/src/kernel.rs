//! Exponential-kernel Gram matrix and the two readouts built on it.
//!
//! `G_ij = exp(k_i . k_j / sqrt(D))`, `h_i = sum_j G_ij`. Rows are computed in
//! parallel; the cache is immutable afterwards.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{CinaError, Result};

/// Largest scaled dot product accepted before `exp` is considered unsafe.
pub const EXP_ARG_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GramCache {
    pub gram: Array2<f64>,
    pub normalizers: Array1<f64>,
    pub dim: usize,
    /// `Some` for padded inputs; `false` entries are ignored everywhere.
    pub mask: Option<Vec<bool>>,
}

impl GramCache {
    pub fn n(&self) -> usize {
        self.gram.nrows()
    }

    fn active(&self, i: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[i])
    }

    /// `u_j = v_j / h_j`, zero on masked units.
    pub fn scaled(&self, v: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(self.n(), |j| {
            if self.active(j) {
                v[j] / self.normalizers[j]
            } else {
                0.0
            }
        })
    }

    /// `G x` with masked rows set to zero.
    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut out = self.gram.dot(&x);
        if let Some(m) = &self.mask {
            out.iter_mut().zip(m).filter(|(_, &k)| !k).for_each(|(o, _)| *o = 0.0);
        }
        out
    }
}

pub fn build_gram(keys: ArrayView2<f64>) -> Result<GramCache> {
    build(keys, None)
}

/// Gram over all rows, with normalizers summing only over `mask`ed-in units.
pub fn build_gram_masked(keys: ArrayView2<f64>, mask: &[bool]) -> Result<GramCache> {
    if mask.len() != keys.nrows() {
        return Err(CinaError::DimensionMismatch {
            expected: keys.nrows(),
            actual: mask.len(),
            context: "gram mask".into(),
        });
    }
    build(keys, Some(mask.to_vec()))
}

fn build(keys: ArrayView2<f64>, mask: Option<Vec<bool>>) -> Result<GramCache> {
    let (n, d) = keys.dim();
    if d == 0 {
        return Err(CinaError::Validation("keys must have at least one column".into()));
    }
    if keys.iter().any(|v| !v.is_finite()) {
        return Err(CinaError::Validation("keys contain non-finite values".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut gram = keys.dot(&keys.t()).as_standard_layout().into_owned();
    let worst = gram
        .as_slice_mut()
        .expect("fresh matrix is contiguous")
        .par_chunks_mut(n.max(1))
        .map(|row| {
            let mut worst = f64::NEG_INFINITY;
            for g in row.iter_mut() {
                let arg = *g * scale;
                worst = worst.max(arg);
                *g = arg.exp();
            }
            worst
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    if worst > EXP_ARG_LIMIT {
        return Err(CinaError::KernelOverflow {
            value: worst,
            limit: EXP_ARG_LIMIT,
        });
    }
    // Symmetrize exactly: the product above can differ in the last ulp.
    for i in 0..n {
        for j in 0..i {
            let v = gram[[j, i]];
            gram[[i, j]] = v;
        }
    }
    let normalizers = Array1::from_shape_fn(n, |i| match &mask {
        None => gram.row(i).sum(),
        Some(m) => gram
            .row(i)
            .iter()
            .zip(m)
            .filter(|(_, &k)| k)
            .map(|(g, _)| g)
            .sum(),
    });
    Ok(GramCache {
        gram,
        normalizers,
        dim: d,
        mask,
    })
}

/// Softmax attention with queries = keys: `out_i = sum_j G_ij v_j / h_i`.
pub fn attention_readout(g: &GramCache, v: ArrayView1<f64>) -> Array1<f64> {
    let masked_v = match &g.mask {
        None => v.to_owned(),
        Some(m) => Array1::from_shape_fn(v.len(), |j| if m[j] { v[j] } else { 0.0 }),
    };
    let mut out = g.apply(masked_v.view());
    out /= &g.normalizers;
    out
}

/// Support-vector expansion readout: `out_i = sum_j G_ij v_j / h_j`.
pub fn expansion_readout(g: &GramCache, v: ArrayView1<f64>) -> Array1<f64> {
    g.apply(g.scaled(v).view())
}

/// `sum_ij v_i v_j G_ij / (h_i h_j)` over unmasked units.
pub fn penalty_norm_sq(g: &GramCache, v: ArrayView1<f64>, mask: Option<&[bool]>) -> f64 {
    let mut u = g.scaled(v);
    if let Some(m) = mask {
        u.iter_mut().zip(m).filter(|(_, &k)| !k).for_each(|(x, _)| *x = 0.0);
    }
    u.dot(&g.gram.dot(&u)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_keys() {
        let g = build_gram(Array2::zeros((2, 3)).view()).unwrap();
        assert_eq!(g.gram, array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(g.normalizers, array![2.0, 2.0]);
        let out = attention_readout(&g, array![1.0, 4.0].view());
        assert_eq!(out, array![2.5, 2.5]);
    }

    #[test]
    fn one_dim_pair() {
        let g = build_gram(array![[1.0], [-1.0]].view()).unwrap();
        let e = std::f64::consts::E;
        assert!((g.gram[[0, 0]] - e).abs() < 1e-12);
        assert!((g.gram[[0, 1]] - 1.0 / e).abs() < 1e-12);
        assert!((g.gram[[1, 1]] - e).abs() < 1e-12);
    }

    #[test]
    fn overflow_guard() {
        let err = build_gram(array![[30.0], [30.0]].view()).unwrap_err();
        assert!(matches!(err, CinaError::KernelOverflow { .. }));
    }

    #[test]
    fn constant_values_pass_through() {
        let g = build_gram(array![[0.3, 1.0], [-0.2, 0.5], [1.0, -1.0]].view()).unwrap();
        let out = attention_readout(&g, array![2.0, 2.0, 2.0].view());
        assert!(out.iter().all(|o| (o - 2.0).abs() < 1e-14));
    }

    #[test]
    fn penalty_scalar_case() {
        let g = build_gram(array![[0.0]].view()).unwrap();
        assert_eq!(penalty_norm_sq(&g, array![3.0].view(), None), 9.0);
        assert_eq!(penalty_norm_sq(&g, array![0.0].view(), None), 0.0);
    }

    #[test]
    fn masked_gram_matches_unpadded() {
        let keys = array![[0.1, 0.2], [0.5, -0.3], [0.0, 0.0]];
        let full = build_gram(keys.slice(ndarray::s![..2, ..])).unwrap();
        let padded = build_gram_masked(keys.view(), &[true, true, false]).unwrap();
        let v = array![1.0, -2.0];
        let vp = array![1.0, -2.0, 7.0];
        let a = attention_readout(&full, v.view());
        let b = attention_readout(&padded, vp.view());
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        let p1 = penalty_norm_sq(&full, v.view(), None);
        let p2 = penalty_norm_sq(&padded, vp.view(), None);
        assert!((p1 - p2).abs() < 1e-12);
    }
}

//! Exact solvers for the balancing quadratic program and its dual SVM.
//!
//! Balancing QP: minimize `a' Kphi a` over
//! `A = {0 <= a <= 1, sum_T a = sum_C a = 1}` with `Kphi_ij = W_i W_j G_ij`.
//! Dual SVM: minimize `a' Kphi a - 2 lambda 1'a` over `{0 <= a <= 1, W'a = 0}`.
//!
//! Two interchangeable methods are provided. [`QpMethod::Pgd`] is accelerated
//! projected gradient with Dykstra projections; [`QpMethod::Smo`] is a
//! pairwise coordinate method (second-order working-set selection) that is
//! much cheaper per iteration for large `N`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{CinaError, Result};
use crate::kernel::GramCache;

/// Group sums after projection must be 1 within this tolerance.
pub const GROUP_SUM_TOL: f64 = 1e-8;

const DYKSTRA_TOL: f64 = 1e-13;
const DYKSTRA_MAX_ITER: usize = 10_000;
const SMO_TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingWeights {
    pub alpha: Array1<f64>,
    pub treated_sum: f64,
    pub control_sum: f64,
    /// `a' Kphi a`, when a Gram matrix was available.
    pub objective: Option<f64>,
}

impl BalancingWeights {
    pub fn new(alpha: Array1<f64>, w: ArrayView1<f64>) -> Self {
        let (treated_sum, control_sum) = group_sums(alpha.view(), w);
        BalancingWeights {
            alpha,
            treated_sum,
            control_sum,
            objective: None,
        }
    }

    pub fn with_objective(mut self, g: &GramCache, w: ArrayView1<f64>) -> Self {
        self.objective = Some(balancing_objective(g, w, self.alpha.view()));
        self
    }

    /// Uniform weights inside each group.
    pub fn uniform(w: ArrayView1<f64>) -> Result<Self> {
        let nt = w.iter().filter(|&&s| s > 0.0).count();
        let nc = w.len() - nt;
        if nt == 0 {
            return Err(CinaError::EmptyGroup("treated"));
        }
        if nc == 0 {
            return Err(CinaError::EmptyGroup("control"));
        }
        let alpha = w.mapv(|s| if s > 0.0 { 1.0 / nt as f64 } else { 1.0 / nc as f64 });
        Ok(BalancingWeights::new(alpha, w))
    }

    /// True when the weights lie in `A` within `tol`.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.alpha.iter().all(|&a| (-tol..=1.0 + tol).contains(&a))
            && (self.treated_sum - 1.0).abs() <= tol
            && (self.control_sum - 1.0).abs() <= tol
    }
}

fn group_sums(alpha: ArrayView1<f64>, w: ArrayView1<f64>) -> (f64, f64) {
    alpha.iter().zip(w).fold((0.0, 0.0), |(t, c), (&a, &s)| {
        if s > 0.0 {
            (t + a, c)
        } else {
            (t, c + a)
        }
    })
}

fn check_groups(w: ArrayView1<f64>) -> Result<()> {
    if !w.iter().any(|&s| s > 0.0) {
        return Err(CinaError::EmptyGroup("treated"));
    }
    if !w.iter().any(|&s| s < 0.0) {
        return Err(CinaError::EmptyGroup("control"));
    }
    Ok(())
}

/// Clamp at zero, then rescale each group to sum one (uniform if no mass).
pub fn project_onto_a(alpha: ArrayView1<f64>, w: ArrayView1<f64>) -> Result<BalancingWeights> {
    if alpha.len() != w.len() {
        return Err(CinaError::LengthMismatch(alpha.len(), w.len()));
    }
    check_groups(w)?;
    let clamped = alpha.mapv(|a| if a > 0.0 { a } else { 0.0 });
    let (mass_t, mass_c) = group_sums(clamped.view(), w);
    let nt = w.iter().filter(|&&s| s > 0.0).count() as f64;
    let nc = w.len() as f64 - nt;
    let out = Array1::from_shape_fn(w.len(), |i| {
        let (mass, count) = if w[i] > 0.0 { (mass_t, nt) } else { (mass_c, nc) };
        if mass > 0.0 && mass.is_finite() {
            clamped[i] / mass
        } else {
            1.0 / count
        }
    });
    Ok(BalancingWeights::new(out, w))
}

/// `(a W)' G (a W)`, the adversarial bound on the conditional bias.
pub fn balancing_objective(g: &GramCache, w: ArrayView1<f64>, alpha: ArrayView1<f64>) -> f64 {
    let aw = &alpha * &w;
    aw.dot(&g.gram.dot(&aw)).max(0.0)
}

pub fn conditional_bias_bound(weights: &BalancingWeights, g: &GramCache, w: ArrayView1<f64>) -> f64 {
    balancing_objective(g, w, weights.alpha.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpMethod {
    Pgd,
    #[default]
    Smo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub method: QpMethod,
    /// PGD: max-norm of the projected-gradient step. SMO: max KKT gap.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            method: QpMethod::Smo,
            tol: 1e-7,
            max_iter: 100_000,
        }
    }
}

impl QpOptions {
    pub fn pgd() -> Self {
        QpOptions {
            method: QpMethod::Pgd,
            ..Default::default()
        }
    }

    pub fn smo() -> Self {
        QpOptions {
            method: QpMethod::Smo,
            tol: 1e-9,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Feasible sets handled by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feasible {
    /// Box intersected with both group-sum constraints.
    Simplices,
    /// Box intersected with `W'a = 0`.
    Hyperplane,
}

pub fn solve_balancing_qp(g: &GramCache, w: ArrayView1<f64>) -> Result<BalancingWeights> {
    solve_balancing_qp_with(g, w, &QpOptions::smo()).map(|(b, _)| b)
}

pub fn solve_balancing_qp_with(
    g: &GramCache,
    w: ArrayView1<f64>,
    opts: &QpOptions,
) -> Result<(BalancingWeights, SolverStats)> {
    check_inputs(g, w)?;
    let (alpha, stats) = match opts.method {
        QpMethod::Pgd => {
            let start = BalancingWeights::uniform(w)?.alpha;
            pgd(g, w, 0.0, Feasible::Simplices, start, opts)?
        }
        QpMethod::Smo => {
            let start = BalancingWeights::uniform(w)?.alpha;
            smo(g, w, 0.0, true, start, opts)?
        }
    };
    Ok((BalancingWeights::new(alpha, w).with_objective(g, w), stats))
}

pub fn solve_dual_svm(g: &GramCache, w: ArrayView1<f64>, lambda: f64) -> Result<BalancingWeights> {
    solve_dual_svm_with(g, w, lambda, &QpOptions::smo()).map(|(b, _)| b)
}

/// The returned objective is the quadratic part `a' Kphi a` only.
pub fn solve_dual_svm_with(
    g: &GramCache,
    w: ArrayView1<f64>,
    lambda: f64,
    opts: &QpOptions,
) -> Result<(BalancingWeights, SolverStats)> {
    check_inputs(g, w)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CinaError::Validation(format!("lambda must be >= 0, got {lambda}")));
    }
    let start = Array1::zeros(w.len());
    let (alpha, stats) = match opts.method {
        QpMethod::Pgd => pgd(g, w, lambda, Feasible::Hyperplane, start, opts)?,
        QpMethod::Smo => smo(g, w, lambda, false, start, opts)?,
    };
    Ok((BalancingWeights::new(alpha, w).with_objective(g, w), stats))
}

fn check_inputs(g: &GramCache, w: ArrayView1<f64>) -> Result<()> {
    if g.n() != w.len() {
        return Err(CinaError::LengthMismatch(g.n(), w.len()));
    }
    check_groups(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    /// Balancing objective of the projected dual solution.
    pub objective: f64,
}

/// Solves the dual on each `lambda`, projects into `A`, and keeps the best.
pub fn dual_equivalence_sweep(
    g: &GramCache,
    w: ArrayView1<f64>,
    lambdas: &[f64],
    opts: &QpOptions,
) -> Result<(f64, BalancingWeights, Vec<SweepPoint>)> {
    let mut best: Option<(f64, BalancingWeights)> = None;
    let mut log = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let (dual, _) = solve_dual_svm_with(g, w, lambda, opts)?;
        let projected = project_onto_a(dual.alpha.view(), w)?.with_objective(g, w);
        let obj = projected.objective.expect("objective set");
        log.push(SweepPoint { lambda, objective: obj });
        if best.as_ref().map_or(true, |(_, b)| obj < b.objective.unwrap()) {
            best = Some((lambda, projected));
        }
    }
    let (lambda, weights) = best.ok_or(CinaError::Validation("empty lambda grid".into()))?;
    Ok((lambda, weights, log))
}

/// Geometric grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

// ----- projections -----------------------------------------------------

fn project_box(x: &mut Array1<f64>) {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Euclidean projection onto the affine part of the feasible set.
fn project_affine(x: &mut Array1<f64>, w: ArrayView1<f64>, set: Feasible) {
    match set {
        Feasible::Simplices => {
            let (st, sc) = group_sums(x.view(), w);
            let nt = w.iter().filter(|&&s| s > 0.0).count() as f64;
            let nc = w.len() as f64 - nt;
            let (dt, dc) = ((1.0 - st) / nt, (1.0 - sc) / nc);
            x.iter_mut()
                .zip(w)
                .for_each(|(v, &s)| *v += if s > 0.0 { dt } else { dc });
        }
        Feasible::Hyperplane => {
            let shift = x.dot(&w) / w.len() as f64;
            x.iter_mut().zip(w).for_each(|(v, &s)| *v -= shift * s);
        }
    }
}

/// Dykstra's alternating projection onto box and affine set.
fn dykstra(z: &Array1<f64>, w: ArrayView1<f64>, set: Feasible) -> Array1<f64> {
    let n = z.len();
    let mut x = z.clone();
    let mut p = Array1::<f64>::zeros(n);
    let mut q = Array1::<f64>::zeros(n);
    for _ in 0..DYKSTRA_MAX_ITER {
        let mut y = &x + &p;
        project_box(&mut y);
        let p_new = &x + &p - &y;
        // `x` can stall for a few sweeps while the corrections still move.
        let p_change = max_abs_diff(&p_new, &p);
        p = p_new;
        let mut x_new = &y + &q;
        project_affine(&mut x_new, w, set);
        q = &y + &q - &x_new;
        let change = max_abs_diff(&x_new, &x).max(p_change);
        let box_gap = x_new
            .iter()
            .fold(0.0f64, |m, &v| m.max(-v).max(v - 1.0));
        x = x_new;
        if change <= DYKSTRA_TOL && box_gap <= DYKSTRA_TOL {
            break;
        }
    }
    // The affine step leaves box violations at the Dykstra tolerance; clip them
    // and restore the equalities exactly on the interior coordinates.
    polish(&mut x, w, set);
    x
}

fn polish(x: &mut Array1<f64>, w: ArrayView1<f64>, set: Feasible) {
    project_box(x);
    match set {
        Feasible::Simplices => {
            for sign in [1.0, -1.0] {
                let sum: f64 = x.iter().zip(w).filter(|(_, &s)| s == sign).map(|(v, _)| v).sum();
                if sum > 0.0 {
                    x.iter_mut()
                        .zip(w)
                        .filter(|(_, &s)| s == sign)
                        .for_each(|(v, _)| *v = (*v / sum).min(1.0));
                }
            }
        }
        Feasible::Hyperplane => {
            let (st, sc) = group_sums(x.view(), w);
            if st > sc && st > 0.0 {
                x.iter_mut().zip(w).filter(|(_, &s)| s > 0.0).for_each(|(v, _)| *v *= sc / st);
            } else if sc > 0.0 {
                x.iter_mut().zip(w).filter(|(_, &s)| s < 0.0).for_each(|(v, _)| *v *= st / sc);
            }
        }
    }
}

/// Exact projection onto the feasible set by bisection on the multiplier(s).
pub fn exact_projection_simplices(z: ArrayView1<f64>, w: ArrayView1<f64>) -> Array1<f64> {
    let mut out = z.to_owned();
    for sign in [1.0, -1.0] {
        let idx: Vec<usize> = (0..z.len()).filter(|&i| w[i] == sign).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
        let total = |theta: f64| vals.iter().map(|v| (v - theta).clamp(0.0, 1.0)).sum::<f64>();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let theta = bisect(|t| total(t) - 1.0, lo, hi);
        for &i in &idx {
            out[i] = (z[i] - theta).clamp(0.0, 1.0);
        }
    }
    out
}

/// Exact projection onto `{0 <= a <= 1, W'a = 0}`.
pub fn exact_projection_hyperplane(z: ArrayView1<f64>, w: ArrayView1<f64>) -> Array1<f64> {
    let f = |theta: f64| {
        z.iter()
            .zip(w)
            .map(|(&v, &s)| s * (v - theta * s).clamp(0.0, 1.0))
            .sum::<f64>()
    };
    let span = z.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0;
    let theta = bisect(f, -span, span);
    Array1::from_shape_fn(z.len(), |i| (z[i] - theta * w[i]).clamp(0.0, 1.0))
}

/// Root of a nonincreasing function on `[lo, hi]`.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

// ----- accelerated projected gradient ----------------------------------

/// `Kphi x = W * (G (W * x))`.
fn kphi_apply(g: &GramCache, w: ArrayView1<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    let wx = &x * &w;
    g.gram.dot(&wx) * &w
}

/// Largest eigenvalue of `Kphi` by 50 power iterations.
pub fn kphi_lambda_max(g: &GramCache, w: ArrayView1<f64>) -> f64 {
    let n = w.len();
    let mut x = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..50 {
        let y = kphi_apply(g, w, x.view());
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = x.dot(&y);
        x = y / norm;
    }
    // Power iteration underestimates; a small margin keeps the step stable.
    est.max(x.dot(&kphi_apply(g, w, x.view()))) * 1.01
}

fn pgd(
    g: &GramCache,
    w: ArrayView1<f64>,
    lambda: f64,
    set: Feasible,
    start: Array1<f64>,
    opts: &QpOptions,
) -> Result<(Array1<f64>, SolverStats)> {
    let lmax = kphi_lambda_max(g, w);
    if lmax == 0.0 {
        return Ok((start, SolverStats { iterations: 0, residual: 0.0 }));
    }
    let step = 1.0 / (2.0 * lmax);
    let grad = |x: &Array1<f64>| kphi_apply(g, w, x.view()) * 2.0 - 2.0 * lambda;
    let mut x = dykstra(&start, w, set);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let x_new = dykstra(&(&y - &(grad(&y) * step)), w, set);
        // Gradient-based adaptive restart of the momentum.
        let restart = (&y - &x_new).dot(&(&x_new - &x)) > 0.0;
        let t_new = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let beta = if restart { 0.0 } else { (t - 1.0) / t_new };
        y = &x_new + &((&x_new - &x) * beta);
        x = x_new;
        t = t_new;
        if it % 10 == 0 || it == opts.max_iter {
            let probe = dykstra(&(&x - &(grad(&x) * step)), w, set);
            residual = probe
                .iter()
                .zip(x.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if residual <= opts.tol {
                return Ok((x, SolverStats { iterations: it, residual }));
            }
        }
    }
    Err(CinaError::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

// ----- pairwise coordinate (SMO) ----------------------------------------

/// Minimizes `1/2 a'Qa + p 1'a`, `Q_ij = y_i y_j G_ij`, over `0 <= a <= 1`
/// with either `y'a` fixed (`per_class = false`) or both class sums fixed.
fn smo(
    g: &GramCache,
    y: ArrayView1<f64>,
    lambda: f64,
    per_class: bool,
    start: Array1<f64>,
    opts: &QpOptions,
) -> Result<(Array1<f64>, SolverStats)> {
    let n = y.len();
    let k = &g.gram;
    let diag: Vec<f64> = (0..n).map(|i| k[[i, i]]).collect();
    let mut a = start;
    // Gradient of 1/2 a'Qa - lambda 1'a.
    let mut grad = kphi_apply(g, y, a.view()) - lambda;
    let mut gap = f64::INFINITY;
    for it in 0..opts.max_iter {
        let sel = if per_class {
            select_per_class(&a, &grad, y, k, &diag)
        } else {
            select_joint(&a, &grad, y, k, &diag)
        };
        let (i, j) = match sel {
            Selection::Pair(i, j, g) => {
                gap = g;
                if g < opts.tol {
                    return Ok((a, SolverStats { iterations: it, residual: g }));
                }
                (i, j)
            }
            Selection::Optimal(g) => {
                return Ok((a, SolverStats { iterations: it, residual: g }));
            }
        };
        let (old_i, old_j) = (a[i], a[j]);
        let kij = k[[i, j]];
        if y[i] != y[j] {
            // Q_ij = -G_ij.
            let quad = (diag[i] + diag[j] - 2.0 * kij).max(SMO_TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > 1.0 {
                    a[i] = 1.0;
                    a[j] = 1.0 - diff;
                }
            } else if a[j] > 1.0 {
                a[j] = 1.0;
                a[i] = 1.0 + diff;
            }
        } else {
            let quad = (diag[i] + diag[j] - 2.0 * kij).max(SMO_TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > 1.0 {
                if a[i] > 1.0 {
                    a[i] = 1.0;
                    a[j] = sum - 1.0;
                }
            } else if a[j] < 0.0 {
                a[j] = 0.0;
                a[i] = sum;
            }
            if sum > 1.0 {
                if a[j] > 1.0 {
                    a[j] = 1.0;
                    a[i] = sum - 1.0;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = sum;
            }
        }
        let (di, dj) = (a[i] - old_i, a[j] - old_j);
        let (yi, yj) = (y[i], y[j]);
        let (ri, rj) = (k.row(i), k.row(j));
        for t in 0..n {
            grad[t] += y[t] * (yi * ri[t] * di + yj * rj[t] * dj);
        }
    }
    Err(CinaError::NonConvergence {
        iterations: opts.max_iter,
        residual: gap,
    })
}

enum Selection {
    Pair(usize, usize, f64),
    Optimal(f64),
}

fn can_increase(a: f64, y: f64) -> bool {
    if y > 0.0 {
        a < 1.0
    } else {
        a > 0.0
    }
}

fn can_decrease(a: f64, y: f64) -> bool {
    if y > 0.0 {
        a > 0.0
    } else {
        a < 1.0
    }
}

fn second_order_score(grad_diff: f64, quad: f64) -> f64 {
    -(grad_diff * grad_diff) / quad.max(SMO_TAU)
}

fn select_joint(
    a: &Array1<f64>,
    grad: &Array1<f64>,
    y: ArrayView1<f64>,
    k: &ndarray::Array2<f64>,
    diag: &[f64],
) -> Selection {
    let n = a.len();
    let mut gmax = f64::NEG_INFINITY;
    let mut i = usize::MAX;
    for t in 0..n {
        if can_increase(a[t], y[t]) && -y[t] * grad[t] >= gmax {
            gmax = -y[t] * grad[t];
            i = t;
        }
    }
    let mut gmax2 = f64::NEG_INFINITY;
    let mut best = f64::INFINITY;
    let mut j = usize::MAX;
    for t in 0..n {
        if !can_decrease(a[t], y[t]) {
            continue;
        }
        let v = y[t] * grad[t];
        gmax2 = gmax2.max(v);
        let grad_diff = gmax + v;
        if i != usize::MAX && grad_diff > 0.0 {
            let quad = diag[i] + diag[t] - 2.0 * k[[i, t]];
            let score = second_order_score(grad_diff, quad);
            if score <= best {
                best = score;
                j = t;
            }
        }
    }
    let gap = gmax + gmax2;
    if i == usize::MAX || j == usize::MAX {
        Selection::Optimal(gap.max(0.0))
    } else {
        Selection::Pair(i, j, gap)
    }
}

fn select_per_class(
    a: &Array1<f64>,
    grad: &Array1<f64>,
    y: ArrayView1<f64>,
    k: &ndarray::Array2<f64>,
    diag: &[f64],
) -> Selection {
    let n = a.len();
    let (mut gmaxp, mut gmaxn) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut ip, mut in_) = (usize::MAX, usize::MAX);
    for t in 0..n {
        if y[t] > 0.0 {
            if a[t] < 1.0 && -grad[t] >= gmaxp {
                gmaxp = -grad[t];
                ip = t;
            }
        } else if a[t] > 0.0 && grad[t] >= gmaxn {
            gmaxn = grad[t];
            in_ = t;
        }
    }
    let (mut gmaxp2, mut gmaxn2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best = f64::INFINITY;
    let mut j = usize::MAX;
    for t in 0..n {
        if y[t] > 0.0 {
            if a[t] > 0.0 {
                gmaxp2 = gmaxp2.max(grad[t]);
                let grad_diff = gmaxp + grad[t];
                if ip != usize::MAX && grad_diff > 0.0 {
                    let quad = diag[ip] + diag[t] - 2.0 * k[[ip, t]];
                    let score = second_order_score(grad_diff, quad);
                    if score <= best {
                        best = score;
                        j = t;
                    }
                }
            }
        } else if a[t] < 1.0 {
            gmaxn2 = gmaxn2.max(-grad[t]);
            let grad_diff = gmaxn - grad[t];
            if in_ != usize::MAX && grad_diff > 0.0 {
                let quad = diag[in_] + diag[t] - 2.0 * k[[in_, t]];
                let score = second_order_score(grad_diff, quad);
                if score <= best {
                    best = score;
                    j = t;
                }
            }
        }
    }
    let gap = (gmaxp + gmaxp2).max(gmaxn + gmaxn2);
    if j == usize::MAX {
        return Selection::Optimal(gap.max(0.0));
    }
    let i = if y[j] > 0.0 { ip } else { in_ };
    Selection::Pair(i, j, gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_gram;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, d: usize) -> (GramCache, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let mut w = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        if rng.gen_bool(0.5) {
            w[n - 1] = 1.0;
        }
        (build_gram(keys.view()).unwrap(), w)
    }

    #[test]
    fn projection_arithmetic() {
        let w = array![1.0, 1.0, -1.0, -1.0];
        let p = project_onto_a(array![2.0, 0.0, 3.0, 1.0].view(), w.view()).unwrap();
        assert_eq!(p.alpha, array![1.0, 0.0, 0.75, 0.25]);
        let again = project_onto_a(p.alpha.view(), w.view()).unwrap();
        assert_eq!(again.alpha, p.alpha);
    }

    #[test]
    fn projection_uniform_fallback() {
        let w = array![1.0, 1.0, -1.0];
        let p = project_onto_a(array![-1.0, -2.0, 4.0].view(), w.view()).unwrap();
        assert_eq!(p.alpha, array![0.5, 0.5, 1.0]);
    }

    #[test]
    fn projection_empty_group() {
        let w = array![1.0, 1.0];
        assert!(matches!(
            project_onto_a(array![1.0, 1.0].view(), w.view()),
            Err(CinaError::EmptyGroup("control"))
        ));
    }

    #[test]
    fn two_units_pinned() {
        let (g, _) = random_instance(3, 2, 2);
        let w = array![1.0, -1.0];
        for opts in [QpOptions::pgd(), QpOptions::smo()] {
            let (b, _) = solve_balancing_qp_with(&g, w.view(), &opts).unwrap();
            assert!((b.alpha[0] - 1.0).abs() < 1e-9 && (b.alpha[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_covariates_symmetric() {
        let g = build_gram(Array2::from_elem((4, 3), 0.4).view()).unwrap();
        let w = array![1.0, 1.0, -1.0, -1.0];
        for opts in [QpOptions::pgd(), QpOptions::smo()] {
            let (b, _) = solve_balancing_qp_with(&g, w.view(), &opts).unwrap();
            assert!(b.objective.unwrap() < 1e-12);
            // Any balanced pair attains zero; the uniform start already does.
            assert!(b.alpha.iter().all(|a| (a - 0.5).abs() < 1e-9));
        }
    }

    #[test]
    fn dual_zero_lambda_is_zero() {
        let (g, w) = random_instance(5, 8, 8);
        for opts in [QpOptions::pgd(), QpOptions::smo()] {
            let (b, _) = solve_dual_svm_with(&g, w.view(), 0.0, &opts).unwrap();
            assert!(b.alpha.iter().all(|a| a.abs() < 1e-9));
        }
    }

    #[test]
    fn dual_hyperplane_feasible() {
        let (g, w) = random_instance(6, 12, 3);
        for lambda in [1e-3, 0.1, 1.0, 10.0] {
            for opts in [QpOptions::pgd(), QpOptions::smo()] {
                let (b, _) = solve_dual_svm_with(&g, w.view(), lambda, &opts).unwrap();
                assert!(b.alpha.dot(&w).abs() < 1e-8, "lambda {lambda}");
                assert!(b.alpha.iter().all(|&a| (-1e-12..=1.0 + 1e-12).contains(&a)));
            }
        }
    }

    #[test]
    fn pgd_and_smo_agree() {
        for seed in 0..5 {
            let (g, w) = random_instance(seed, 16, 3);
            let (a, _) = solve_balancing_qp_with(&g, w.view(), &QpOptions::pgd()).unwrap();
            let (b, _) = solve_balancing_qp_with(&g, w.view(), &QpOptions::smo()).unwrap();
            let (oa, ob) = (a.objective.unwrap(), b.objective.unwrap());
            assert!((oa - ob).abs() <= 1e-6 * (1.0 + ob), "{oa} vs {ob}");
            for lambda in [0.01, 0.5] {
                let (a, _) = solve_dual_svm_with(&g, w.view(), lambda, &QpOptions::pgd()).unwrap();
                let (b, _) = solve_dual_svm_with(&g, w.view(), lambda, &QpOptions::smo()).unwrap();
                let fa = a.objective.unwrap() - 2.0 * lambda * a.alpha.sum();
                let fb = b.objective.unwrap() - 2.0 * lambda * b.alpha.sum();
                assert!((fa - fb).abs() <= 1e-6 * (1.0 + fb.abs()), "{fa} vs {fb}");
            }
        }
    }

    #[test]
    fn dykstra_matches_exact_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(3..12);
            let mut w = Array1::from_shape_fn(n, |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            w[0] = 1.0;
            w[1] = -1.0;
            let z = Array1::from_shape_fn(n, |_| rng.gen_range(-2.0..2.0));
            let d = dykstra(&z, w.view(), Feasible::Simplices);
            let e = exact_projection_simplices(z.view(), w.view());
            assert!((&d - &e).iter().all(|v| v.abs() < 1e-8), "{d} vs {e}");
            let d = dykstra(&z, w.view(), Feasible::Hyperplane);
            let e = exact_projection_hyperplane(z.view(), w.view());
            assert!((&d - &e).iter().all(|v| v.abs() < 1e-8), "{d} vs {e}");
        }
    }

    #[test]
    fn bias_bound_two_point() {
        let g = build_gram(array![[0.3, 0.2], [0.3, 0.2]].view()).unwrap();
        let w = array![1.0, -1.0];
        let b = BalancingWeights::new(array![0.7, 0.2], w.view());
        let expected = (0.7f64 - 0.2).powi(2) * g.gram[[0, 0]];
        assert!((conditional_bias_bound(&b, &g, w.view()) - expected).abs() < 1e-12);
        let zero = BalancingWeights::new(array![0.0, 0.0], w.view());
        assert_eq!(conditional_bias_bound(&zero, &g, w.view()), 0.0);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-6, 1e-2, 5);
        assert!((g[0] - 1e-6).abs() < 1e-18 && (g[4] - 1e-2).abs() < 1e-14);
        assert!((g[1] - 1e-5).abs() < 1e-17);
        assert_eq!(log_grid(0.3, 5.0, 1), vec![0.3]);
    }
}

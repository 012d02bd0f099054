//! Forward pass: key map, value network, Gram matrix and weight extraction.
//!
//! Keys are standardized covariates (optionally after a trainable
//! `relu(X A + c)` map). Values are either free per-unit parameters (the
//! single-dataset variant) or the output of a small attention network over the
//! units (the amortized variant). Balancing weights are read off as
//! `alpha_raw_j = lambda V_j / (h_j W_j)` and projected into the feasible set.
//!
//! Backward passes are hand-written; [`ModelParams::visit`] flattens every
//! trainable tensor in a fixed order so gradients can be compared against
//! finite differences.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{column_moments, is_constant_column, Dataset, PaddedBatch};
use crate::error::{CinaError, Result};
use crate::kernel::{build_gram, GramCache};
use crate::oracle::{project_onto_a, BalancingWeights};

/// Width of each of the two unit embeddings.
pub const EMBED_DIM: usize = 32;
/// Width of the attention block inside the value network.
pub const ATTN_DIM: usize = 2 * EMBED_DIM;

pub const CHECKPOINT_VERSION: u32 = 1;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Affine {
            weight: Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(output, |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Affine) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.weight.as_slice().expect("standard layout"));
        f(self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_slice_mut().expect("standard layout"));
        f(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Per-column z-scoring with the statistics kept for the backward pass.
#[derive(Debug, Clone)]
struct ColumnNorm {
    std: Array1<f64>,
    constant: Vec<bool>,
}

fn normalize_forward(x: &Array2<f64>) -> (Array2<f64>, ColumnNorm) {
    let (mean, std) = column_moments(x);
    let constant: Vec<bool> = (0..x.ncols()).map(|j| is_constant_column(mean[j], std[j])).collect();
    let mut z = x.clone();
    for j in 0..x.ncols() {
        let (m, s, c) = (mean[j], std[j], constant[j]);
        z.column_mut(j).mapv_inplace(|v| if c { 0.0 } else { (v - m) / s });
    }
    (z, ColumnNorm { std, constant })
}

fn normalize_backward(norm: &ColumnNorm, z: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let n = z.nrows() as f64;
    let mut dx = Array2::zeros(z.dim());
    for j in 0..z.ncols() {
        if norm.constant[j] {
            continue;
        }
        let (zc, dzc) = (z.column(j), dz.column(j));
        let mean_dz = dzc.sum() / n;
        let mean_dzz = dzc.dot(&zc) / n;
        let s = norm.std[j];
        dx.column_mut(j)
            .iter_mut()
            .zip(zc.iter().zip(dzc.iter()))
            .for_each(|(o, (&zi, &di))| *o = (di - mean_dz - zi * mean_dzz) / s);
    }
    dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyMap {
    /// Keys are the standardized covariates.
    Identity,
    /// Keys are standardized `relu(X A + c)`.
    LinearRelu { map: Affine },
}

impl KeyMap {
    pub fn linear(dx: usize, dim: usize, rng: &mut impl Rng) -> Self {
        KeyMap::LinearRelu {
            map: Affine::init(dx, dim, rng),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KeyMap::Identity => None,
            KeyMap::LinearRelu { map } => Some(map.weight.nrows()),
        }
    }

    pub fn key_dim(&self, dx: usize) -> usize {
        match self {
            KeyMap::Identity => dx,
            KeyMap::LinearRelu { map } => map.weight.ncols(),
        }
    }
}

#[derive(Debug, Clone)]
struct KeyCache {
    pre: Option<Array2<f64>>,
    norm: ColumnNorm,
}

fn key_forward(km: &KeyMap, x: &Array2<f64>) -> Result<(Array2<f64>, KeyCache)> {
    match km {
        KeyMap::Identity => {
            let (z, norm) = normalize_forward(x);
            Ok((z, KeyCache { pre: None, norm }))
        }
        KeyMap::LinearRelu { map } => {
            if map.weight.nrows() != x.ncols() {
                return Err(CinaError::DimensionMismatch {
                    expected: map.weight.nrows(),
                    actual: x.ncols(),
                    context: "key map input".into(),
                });
            }
            let pre = map.forward(x.view());
            let (z, norm) = normalize_forward(&pre.mapv(relu));
            Ok((z, KeyCache { pre: Some(pre), norm }))
        }
    }
}

/// The amortized value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub embed_w: Affine,
    pub embed_k: Affine,
    pub attn_query: Affine,
    pub attn_key: Affine,
    pub attn_value: Affine,
    pub out_proj: Affine,
}

impl ValueNet {
    pub fn init(key_dim: usize, rng: &mut impl Rng) -> Self {
        ValueNet {
            embed_w: Affine::init(1, EMBED_DIM, rng),
            embed_k: Affine::init(key_dim, EMBED_DIM, rng),
            attn_query: Affine::init(ATTN_DIM, ATTN_DIM, rng),
            attn_key: Affine::init(ATTN_DIM, ATTN_DIM, rng),
            attn_value: Affine::init(ATTN_DIM, ATTN_DIM, rng),
            out_proj: Affine::init(ATTN_DIM, 1, rng),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.embed_k.weight.nrows()
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for a in [
            &self.embed_w,
            &self.embed_k,
            &self.attn_query,
            &self.attn_key,
            &self.attn_value,
            &self.out_proj,
        ] {
            a.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for a in [
            &mut self.embed_w,
            &mut self.embed_k,
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_value,
            &mut self.out_proj,
        ] {
            a.visit_mut(f);
        }
    }

    /// Raw scalar output `O` per unit, before the sign multiplier.
    pub fn outputs(&self, keys: ArrayView2<f64>, w: ArrayView1<f64>) -> Array1<f64> {
        self.forward(keys, w).o
    }

    fn forward(&self, keys: ArrayView2<f64>, w: ArrayView1<f64>) -> NetCache {
        let n = keys.nrows();
        let w_col = w.to_owned().into_shape_with_order((n, 1)).expect("vector to column");
        let pre_a = self.embed_w.forward(w_col.view());
        let pre_b = self.embed_k.forward(keys);
        let e = concatenate(Axis(1), &[pre_a.mapv(relu).view(), pre_b.mapv(relu).view()])
            .expect("equal row counts");
        let (z, norm) = normalize_forward(&e);
        let q = self.attn_query.forward(z.view());
        let k = self.attn_key.forward(z.view());
        let v = self.attn_value.forward(z.view());
        let scale = 1.0 / (ATTN_DIM as f64).sqrt();
        let mut attn = q.dot(&k.t()) * scale;
        for mut row in attn.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        // Residual path keeps each unit's own embedding (and so its sign W_i)
        // visible to the output layer.
        let hidden = attn.dot(&v) + &z;
        let o = self.out_proj.forward(hidden.view()).column(0).to_owned();
        NetCache {
            w_col,
            pre_a,
            pre_b,
            z,
            norm,
            q,
            k,
            v,
            attn,
            hidden,
            o,
        }
    }

    /// Returns `dL/dkeys` and accumulates parameter gradients into `grad`.
    fn backward(
        &self,
        keys: ArrayView2<f64>,
        c: &NetCache,
        d_o: &Array1<f64>,
        grad: &mut ValueNet,
    ) -> Array2<f64> {
        let n = keys.nrows();
        let d_o = d_o.to_owned().into_shape_with_order((n, 1)).expect("vector to column");
        let d_hidden = self.out_proj.backward(c.hidden.view(), d_o.view(), &mut grad.out_proj);
        let d_attn = d_hidden.dot(&c.v.t());
        let d_v = c.attn.t().dot(&d_hidden);
        let mut d_s = d_attn;
        for (mut ds_row, a_row) in d_s.rows_mut().into_iter().zip(c.attn.rows()) {
            let dot = ds_row.dot(&a_row);
            ds_row
                .iter_mut()
                .zip(a_row.iter())
                .for_each(|(d, &a)| *d = a * (*d - dot));
        }
        d_s *= 1.0 / (ATTN_DIM as f64).sqrt();
        let d_q = d_s.dot(&c.k);
        let d_k = d_s.t().dot(&c.q);
        let mut d_z = self.attn_query.backward(c.z.view(), d_q.view(), &mut grad.attn_query);
        d_z += &self.attn_key.backward(c.z.view(), d_k.view(), &mut grad.attn_key);
        d_z += &self.attn_value.backward(c.z.view(), d_v.view(), &mut grad.attn_value);
        d_z += &d_hidden;
        let d_e = normalize_backward(&c.norm, &c.z, &d_z);
        let mut d_a = d_e.slice(s![.., ..EMBED_DIM]).to_owned();
        d_a.zip_mut_with(&c.pre_a, |d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        let mut d_b = d_e.slice(s![.., EMBED_DIM..]).to_owned();
        d_b.zip_mut_with(&c.pre_b, |d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        self.embed_w.backward(c.w_col.view(), d_a.view(), &mut grad.embed_w);
        self.embed_k.backward(keys, d_b.view(), &mut grad.embed_k)
    }
}

#[derive(Debug, Clone)]
struct NetCache {
    w_col: Array2<f64>,
    pre_a: Array2<f64>,
    pre_b: Array2<f64>,
    z: Array2<f64>,
    norm: ColumnNorm,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    hidden: Array2<f64>,
    o: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueParams {
    /// One free value per unit of a single dataset.
    Free { values: Array1<f64> },
    /// Values produced by the attention network.
    Amortized { net: ValueNet },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub key_map: KeyMap,
    pub value: ValueParams,
    pub beta0: f64,
    pub lambda: f64,
}

impl ModelParams {
    /// Single-dataset parameters: `V = |N(0, 0.01)| * W`, `beta0 = 0`.
    pub fn single(d: &Dataset, lambda: f64, seed: u64) -> Result<Self> {
        check_lambda(lambda)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::<f64>::new(0.0, 0.01).expect("valid normal");
        let values = d.signs().mapv(|w| w * normal.sample(&mut rng).abs());
        Ok(ModelParams {
            key_map: KeyMap::Identity,
            value: ValueParams::Free { values },
            beta0: 0.0,
            lambda,
        })
    }

    /// Amortized parameters for covariate dimension `dx`.
    pub fn amortized(dx: usize, key_dim: Option<usize>, lambda: f64, seed: u64) -> Result<Self> {
        check_lambda(lambda)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key_map = match key_dim {
            None => KeyMap::Identity,
            Some(k) => KeyMap::linear(dx, k, &mut rng),
        };
        let net = ValueNet::init(key_map.key_dim(dx), &mut rng);
        Ok(ModelParams {
            key_map,
            value: ValueParams::Amortized { net },
            beta0: 0.0,
            lambda,
        })
    }

    pub fn is_amortized(&self) -> bool {
        matches!(self.value, ValueParams::Amortized { .. })
    }

    /// Scale applied to the network output so that `alpha_raw` does not
    /// depend on `lambda`; free values are used as-is.
    pub fn value_scale(&self) -> f64 {
        match self.value {
            ValueParams::Free { .. } => 1.0,
            ValueParams::Amortized { .. } => 1.0 / self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let mut finite = self.beta0.is_finite();
        self.visit(&mut |t| finite &= t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(CinaError::Validation("parameters contain non-finite values".into()));
        }
        if let (KeyMap::LinearRelu { map }, ValueParams::Amortized { net }) = (&self.key_map, &self.value) {
            if map.weight.ncols() != net.key_dim() {
                return Err(CinaError::DimensionMismatch {
                    expected: net.key_dim(),
                    actual: map.weight.ncols(),
                    context: "key map output vs value network input".into(),
                });
            }
        }
        Ok(())
    }

    /// Visits every trainable tensor (all but `lambda`) in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        if let KeyMap::LinearRelu { map } = &self.key_map {
            map.visit(f);
        }
        match &self.value {
            ValueParams::Free { values } => f(values.as_slice().expect("standard layout")),
            ValueParams::Amortized { net } => net.visit(f),
        }
        f(std::slice::from_ref(&self.beta0));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        if let KeyMap::LinearRelu { map } = &mut self.key_map {
            map.visit_mut(f);
        }
        match &mut self.value {
            ValueParams::Free { values } => f(values.as_slice_mut().expect("standard layout")),
            ValueParams::Amortized { net } => net.visit_mut(f),
        }
        f(std::slice::from_mut(&mut self.beta0));
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |t| out.extend_from_slice(t));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(CinaError::LengthMismatch(flat.len(), self.n_params()));
        }
        let mut pos = 0;
        self.visit_mut(&mut |t| {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        });
        Ok(())
    }

    /// Same shape with every trainable entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |t| t.fill(0.0));
        z
    }

    /// SHA-256 over the trainable values and `lambda`.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |t| t.iter().for_each(|v| hasher.update(v.to_le_bytes())));
        hasher.update(self.lambda.to_le_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(CinaError::Validation(format!("lambda must be positive, got {lambda}")))
    }
}

/// Keys for a dataset under the given key map.
pub fn key_map(d: &Dataset, p: &ModelParams) -> Result<Array2<f64>> {
    Ok(key_forward(&p.key_map, &d.covariates)?.0)
}

/// Values with the sign multiplier applied: `V = s W relu(O W)`.
pub fn value_net(keys: ArrayView2<f64>, w: ArrayView1<f64>, p: &ModelParams) -> Result<Array1<f64>> {
    match &p.value {
        ValueParams::Amortized { net } => {
            check_key_dim(net, keys.ncols())?;
            let o = net.outputs(keys, w);
            Ok(sign_multiplier(&o, w, p.value_scale()))
        }
        ValueParams::Free { .. } => Err(CinaError::Validation(
            "free-value parameters have no value network".into(),
        )),
    }
}

fn check_key_dim(net: &ValueNet, got: usize) -> Result<()> {
    if net.key_dim() != got {
        return Err(CinaError::DimensionMismatch {
            expected: net.key_dim(),
            actual: got,
            context: "value network key dimension".into(),
        });
    }
    Ok(())
}

pub fn sign_multiplier(o: &Array1<f64>, w: ArrayView1<f64>, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(o.len(), |i| scale * w[i] * relu(o[i] * w[i]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub keys: Array2<f64>,
    pub gram: GramCache,
    pub values: Array1<f64>,
    pub alpha_raw: Array1<f64>,
    pub alpha: BalancingWeights,
}

/// Intermediate state kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    key: KeyCache,
    net: Option<NetCache>,
}

impl ForwardCache {
    /// Smallest |pre-activation| over every ReLU in the forward pass. A
    /// perturbation smaller than this cannot flip any ReLU.
    pub fn relu_margin(&self, w: ArrayView1<f64>) -> f64 {
        let mut m = f64::INFINITY;
        let mut scan = |a: &Array2<f64>| m = a.fold(m, |m, x| m.min(x.abs()));
        if let Some(pre) = &self.key.pre {
            scan(pre);
        }
        if let Some(net) = &self.net {
            scan(&net.pre_a);
            scan(&net.pre_b);
            m = net.o.iter().zip(w).fold(m, |m, (o, s)| m.min((o * s).abs()));
        }
        m
    }
}

/// `alpha_raw_j = lambda V_j / (h_j W_j)`.
pub fn extract_alpha_raw(g: &GramCache, values: ArrayView1<f64>, w: ArrayView1<f64>, lambda: f64) -> Array1<f64> {
    Array1::from_shape_fn(values.len(), |j| lambda * values[j] * w[j] / g.normalizers[j])
}

pub fn forward_extract(d: &Dataset, p: &ModelParams) -> Result<ForwardOutputs> {
    forward_full(d, p).map(|(o, _)| o)
}

pub fn forward_full(d: &Dataset, p: &ModelParams) -> Result<(ForwardOutputs, ForwardCache)> {
    let w = d.signs();
    if let Some(dx) = p.key_map.input_dim() {
        if dx != d.n_covariates() {
            return Err(CinaError::DimensionMismatch {
                expected: dx,
                actual: d.n_covariates(),
                context: format!("covariates of `{}`", d.id),
            });
        }
    }
    let (keys, key_cache) = key_forward(&p.key_map, &d.covariates)?;
    let (values, net) = match &p.value {
        ValueParams::Free { values } => {
            if values.len() != d.n_units() {
                return Err(CinaError::DimensionMismatch {
                    expected: values.len(),
                    actual: d.n_units(),
                    context: format!("free values vs units of `{}`", d.id),
                });
            }
            (values.clone(), None)
        }
        ValueParams::Amortized { net } => {
            check_key_dim(net, keys.ncols())?;
            let cache = net.forward(keys.view(), w.view());
            let v = sign_multiplier(&cache.o, w.view(), p.value_scale());
            (v, Some(cache))
        }
    };
    let gram = build_gram(keys.view())?;
    let alpha_raw = extract_alpha_raw(&gram, values.view(), w.view(), p.lambda);
    let alpha = project_onto_a(alpha_raw.view(), w.view())?.with_objective(&gram, w.view());
    Ok((
        ForwardOutputs {
            keys,
            gram,
            values,
            alpha_raw,
            alpha,
        },
        ForwardCache { key: key_cache, net },
    ))
}

/// Propagates `dL/dV` and `dL/dkeys` to every trainable parameter.
/// `d_beta0` is copied into the returned gradient.
pub fn backward(
    d: &Dataset,
    p: &ModelParams,
    out: &ForwardOutputs,
    cache: &ForwardCache,
    d_values: &Array1<f64>,
    d_keys: &Array2<f64>,
    d_beta0: f64,
) -> ModelParams {
    let mut grad = p.zeros_like();
    grad.beta0 = d_beta0;
    let w = d.signs();
    let mut d_keys = d_keys.clone();
    match (&p.value, &mut grad.value, &cache.net) {
        (ValueParams::Free { .. }, ValueParams::Free { values }, _) => values.assign(d_values),
        (ValueParams::Amortized { net }, ValueParams::Amortized { net: g }, Some(c)) => {
            let scale = p.value_scale();
            let d_o = Array1::from_shape_fn(w.len(), |i| {
                if c.o[i] * w[i] > 0.0 {
                    scale * d_values[i]
                } else {
                    0.0
                }
            });
            d_keys += &net.backward(out.keys.view(), c, &d_o, g);
        }
        _ => unreachable!("gradient mirrors parameter shape"),
    }
    if let (KeyMap::LinearRelu { map }, KeyMap::LinearRelu { map: g }, Some(pre)) =
        (&p.key_map, &mut grad.key_map, &cache.key.pre)
    {
        let mut d_relu = normalize_backward(&cache.key.norm, &out.keys, &d_keys);
        d_relu.zip_mut_with(pre, |dv, &x| {
            if x <= 0.0 {
                *dv = 0.0
            }
        });
        map.backward(d.covariates.view(), d_relu.view(), g);
    }
    grad
}

/// Forward on one padded row; masked units get zero weight.
pub fn forward_padded(batch: &PaddedBatch, row: usize, p: &ModelParams) -> Result<Array1<f64>> {
    let datasets = batch.unpad()?;
    let d = datasets.get(row).ok_or(CinaError::LengthMismatch(row, datasets.len()))?;
    let out = forward_extract(d, p)?;
    let mut alpha = Array1::zeros(batch.n_max());
    alpha.slice_mut(s![..d.n_units()]).assign(&out.alpha.alpha);
    Ok(alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Covariate dimension the parameters were trained on.
    pub dx: usize,
    pub params: ModelParams,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl Checkpoint {
    pub fn new(dx: usize, params: ModelParams, config_hash: Option<String>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dx,
            params,
            config_hash,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(CinaError::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: probe.version,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.params.validate()?;
        Ok(ckpt)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dataset() -> Dataset {
        Dataset::new(
            "m",
            array![[0.1, 1.0], [0.4, -0.2], [-0.3, 0.5], [0.9, 0.0], [0.2, 0.2]],
            vec![1, 0, 1, 0, 0],
            array![1.0, 2.0, 3.0, 4.0, 5.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn alpha_raw_formula() {
        let g = GramCache {
            gram: array![[2.0, 2.0], [2.0, 2.0]],
            normalizers: array![4.0, 4.0],
            dim: 1,
            mask: None,
        };
        let a = extract_alpha_raw(&g, array![2.0, -2.0].view(), array![1.0, -1.0].view(), 0.1);
        assert!((a[0] - 0.05).abs() < 1e-15 && (a[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_values_fall_back_to_uniform() {
        let d = dataset();
        let mut p = ModelParams::single(&d, 0.1, 0).unwrap();
        p.value = ValueParams::Free { values: Array1::zeros(5) };
        let out = forward_extract(&d, &p).unwrap();
        assert!(out.alpha_raw.iter().all(|&a| a == 0.0));
        assert_eq!(out.alpha.alpha, array![0.5, 1.0 / 3.0, 0.5, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn identity_keys_on_standardized_data() {
        let d = dataset().standardize();
        let p = ModelParams::single(&d, 1.0, 0).unwrap();
        let k = key_map(&d, &p).unwrap();
        assert!((&k - &d.covariates).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_linear_key_map_gives_zero_keys() {
        let d = dataset();
        let mut p = ModelParams::amortized(2, Some(3), 1.0, 0).unwrap();
        p.key_map = KeyMap::LinearRelu { map: Affine::zeros(2, 3) };
        let k = key_map(&d, &p).unwrap();
        assert!(k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sign_multiplier_cases() {
        let w = array![1.0, -1.0, 1.0];
        let c = 0.7;
        let v = sign_multiplier(&(&w * c), w.view(), 1.0);
        assert_eq!(v, &w * c);
        let v = sign_multiplier(&array![-1.0, 2.0, 0.5], w.view(), 1.0);
        assert_eq!(v, array![0.0, 0.0, 0.5]);
    }

    #[test]
    fn scale_invariance_of_projection() {
        let d = dataset();
        let p = ModelParams::single(&d, 0.3, 5).unwrap();
        let mut q = p.clone();
        if let ValueParams::Free { values } = &mut q.value {
            *values *= 7.5;
        }
        let a = forward_extract(&d, &p).unwrap();
        let b = forward_extract(&d, &q).unwrap();
        assert!((&a.alpha_raw * 7.5 - &b.alpha_raw).iter().all(|v| v.abs() < 1e-12));
        assert!((&a.alpha.alpha - &b.alpha.alpha).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::amortized(2, Some(4), 0.5, 1).unwrap();
        let flat = p.to_flat();
        let mut q = p.zeros_like();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn checkpoint_version_checked() {
        let p = ModelParams::amortized(2, None, 0.5, 1).unwrap();
        let text = Checkpoint::new(2, p.clone(), None).to_json_string();
        assert_eq!(Checkpoint::from_json_str(&text).unwrap().params, p);
        let bad = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            Checkpoint::from_json_str(&bad),
            Err(CinaError::CheckpointVersion { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn covariate_dim_mismatch() {
        let d = dataset();
        let p = ModelParams::amortized(3, None, 0.5, 1).unwrap();
        assert!(matches!(
            forward_extract(&d, &p),
            Err(CinaError::DimensionMismatch { .. })
        ));
    }
}

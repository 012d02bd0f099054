//! Datasets, standardization, padding and the on-disk formats.
//!
//! A dataset is `N` units with covariates `X` (`N x Dx`), a binary treatment
//! `T` and an outcome `Y`. Two text formats are supported:
//!
//! * CSV with header `x0,...,x{Dx-1},t,y` and an optional first line
//!   `# true_ate=<float>`.
//! * JSON with arrays `covariates`, `treatments`, `outcomes` and optional
//!   `true_ate` / `id`.
//!
//! A collection on disk is a directory of dataset files plus a `manifest.json`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CinaError, Result};

/// Below this (relative) standard deviation a column is treated as constant.
const CONSTANT_COLUMN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub covariates: Array2<f64>,
    pub treatments: Vec<u8>,
    pub outcomes: Array1<f64>,
    pub true_ate: Option<f64>,
}

impl Dataset {
    /// Builds a dataset, checking every invariant.
    pub fn new(
        id: impl Into<String>,
        covariates: Array2<f64>,
        treatments: Vec<u8>,
        outcomes: Array1<f64>,
        true_ate: Option<f64>,
    ) -> Result<Self> {
        let d = Dataset {
            id: id.into(),
            covariates,
            treatments,
            outcomes,
            true_ate,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.covariates.nrows();
        if self.treatments.len() != n {
            return Err(CinaError::DimensionMismatch {
                expected: n,
                actual: self.treatments.len(),
                context: "treatments".into(),
            });
        }
        if self.outcomes.len() != n {
            return Err(CinaError::DimensionMismatch {
                expected: n,
                actual: self.outcomes.len(),
                context: "outcomes".into(),
            });
        }
        if self.covariates.ncols() == 0 {
            return Err(CinaError::Validation(format!(
                "dataset `{}` has no covariates",
                self.id
            )));
        }
        if let Some(t) = self.treatments.iter().find(|&&t| t > 1) {
            return Err(CinaError::Validation(format!(
                "treatment value {t} is not binary"
            )));
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return Err(CinaError::Validation(format!(
                "dataset `{}` has non-finite covariates",
                self.id
            )));
        }
        if self.outcomes.iter().any(|v| !v.is_finite()) {
            return Err(CinaError::Validation(format!(
                "dataset `{}` has non-finite outcomes",
                self.id
            )));
        }
        if let Some(ate) = self.true_ate {
            if !ate.is_finite() {
                return Err(CinaError::Validation("true_ate is not finite".into()));
            }
        }
        if n < 2 {
            return Err(CinaError::DegenerateDataset {
                id: self.id.clone(),
                reason: format!("{n} units"),
            });
        }
        let treated = self.n_treated();
        if treated == 0 {
            return Err(CinaError::DegenerateDataset {
                id: self.id.clone(),
                reason: "all units are control".into(),
            });
        }
        if treated == n {
            return Err(CinaError::DegenerateDataset {
                id: self.id.clone(),
                reason: "all units are treated".into(),
            });
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.treatments.iter().filter(|&&t| t == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.n_units() - self.n_treated()
    }

    /// Treatment signs `W_i = 2 T_i - 1`.
    pub fn signs(&self) -> Array1<f64> {
        signs_of(&self.treatments)
    }

    /// Copy with every covariate column z-scored over this dataset's units.
    pub fn standardize(&self) -> Dataset {
        Dataset {
            covariates: standardize_columns(&self.covariates),
            ..self.clone()
        }
    }

    pub fn from_csv_str(id: &str, text: &str) -> Result<Self> {
        parse_csv(id, text)
    }

    pub fn from_json_str(default_id: &str, text: &str) -> Result<Self> {
        let raw: JsonDataset = serde_json::from_str(text)?;
        raw.into_dataset(default_id)
    }

    /// Loads a dataset file; the id defaults to the file stem.
    pub fn load(path: &Path, format: DataFormat) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match format {
            DataFormat::Csv => Self::from_csv_str(&stem, &text),
            DataFormat::Json => Self::from_json_str(&stem, &text),
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        if let Some(ate) = self.true_ate {
            let _ = writeln!(out, "# true_ate={ate}");
        }
        let header: Vec<String> = (0..self.n_covariates())
            .map(|j| format!("x{j}"))
            .chain(["t".to_string(), "y".to_string()])
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, row) in self.covariates.outer_iter().enumerate() {
            for v in row.iter() {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{},{}", self.treatments[i], self.outcomes[i]);
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        let raw = JsonDataset {
            id: Some(self.id.clone()),
            covariates: self.covariates.outer_iter().map(|r| r.to_vec()).collect(),
            treatments: self.treatments.iter().map(|&t| f64::from(t)).collect(),
            outcomes: self.outcomes.to_vec(),
            true_ate: self.true_ate,
        };
        serde_json::to_string(&raw).expect("dataset serializes")
    }

    pub fn save(&self, path: &Path, format: DataFormat) -> Result<()> {
        let text = match format {
            DataFormat::Csv => self.to_csv_string(),
            DataFormat::Json => self.to_json_string(),
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn signs_of(treatments: &[u8]) -> Array1<f64> {
    treatments
        .iter()
        .map(|&t| if t == 1 { 1.0 } else { -1.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Json => "json",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(DataFormat::Csv),
            "json" => Some(DataFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonDataset {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    covariates: Vec<Vec<f64>>,
    treatments: Vec<f64>,
    outcomes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_ate: Option<f64>,
}

impl JsonDataset {
    fn into_dataset(self, default_id: &str) -> Result<Dataset> {
        let n = self.covariates.len();
        let dx = self.covariates.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * dx);
        for (i, row) in self.covariates.iter().enumerate() {
            if row.len() != dx {
                return Err(CinaError::Parse {
                    row: i + 1,
                    column: "covariates".into(),
                    message: format!("expected {dx} values, found {}", row.len()),
                });
            }
            flat.extend_from_slice(row);
        }
        let covariates = Array2::from_shape_vec((n, dx), flat).expect("shape checked");
        let treatments = self
            .treatments
            .iter()
            .enumerate()
            .map(|(i, &t)| binary_value(t).ok_or_else(|| non_binary(i + 1, &t.to_string())))
            .collect::<Result<Vec<u8>>>()?;
        let id = self.id.unwrap_or_else(|| default_id.to_string());
        Dataset::new(
            id,
            covariates,
            treatments,
            Array1::from(self.outcomes),
            self.true_ate,
        )
    }
}

fn binary_value(t: f64) -> Option<u8> {
    if t == 0.0 {
        Some(0)
    } else if t == 1.0 {
        Some(1)
    } else {
        None
    }
}

fn non_binary(row: usize, raw: &str) -> CinaError {
    CinaError::Validation(format!("row {row}: treatment `{raw}` is not in {{0,1}}"))
}

fn parse_csv(id: &str, text: &str) -> Result<Dataset> {
    let mut true_ate = None;
    let mut body = text;
    if let Some(rest) = text.strip_prefix('#') {
        let (line, remainder) = rest.split_once('\n').unwrap_or((rest, ""));
        let line = line.trim();
        let value = line
            .strip_prefix("true_ate=")
            .ok_or_else(|| CinaError::Parse {
                row: 0,
                column: "metadata".into(),
                message: format!("unrecognized metadata line `#{line}`"),
            })?;
        let parsed: f64 = value.trim().parse().map_err(|_| CinaError::Parse {
            row: 0,
            column: "true_ate".into(),
            message: format!("`{value}` is not a number"),
        })?;
        true_ate = Some(parsed);
        body = remainder;
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CinaError::Parse {
            row: 0,
            column: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let ncols = headers.len();
    if ncols < 3 {
        return Err(CinaError::Parse {
            row: 0,
            column: "header".into(),
            message: format!("expected at least 3 columns, found {ncols}"),
        });
    }
    let dx = ncols - 2;
    for (j, name) in headers.iter().enumerate() {
        let expected = match j {
            j if j < dx => format!("x{j}"),
            j if j == dx => "t".to_string(),
            _ => "y".to_string(),
        };
        if name != expected {
            return Err(CinaError::Parse {
                row: 0,
                column: name.to_string(),
                message: format!("expected column `{expected}`"),
            });
        }
    }

    let mut flat = Vec::new();
    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CinaError::Parse {
            row,
            column: "*".into(),
            message: e.to_string(),
        })?;
        if record.len() != ncols {
            return Err(CinaError::Parse {
                row,
                column: "*".into(),
                message: format!("expected {ncols} fields, found {}", record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| CinaError::Parse {
                row,
                column: headers[j].to_string(),
                message: format!("`{field}` is not a number"),
            })?;
            if j < dx {
                flat.push(value);
            } else if j == dx {
                treatments.push(binary_value(value).ok_or_else(|| non_binary(row, field))?);
            } else {
                outcomes.push(value);
            }
        }
    }
    let n = treatments.len();
    let covariates = Array2::from_shape_vec((n, dx), flat).expect("row lengths checked");
    Dataset::new(id, covariates, treatments, Array1::from(outcomes), true_ate)
}

/// Per-column mean and population standard deviation.
pub fn column_moments(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(x.ncols());
    for row in x.outer_iter() {
        for j in 0..x.ncols() {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    (mean, var.mapv(|v: f64| (v / n).sqrt()))
}

pub(crate) fn is_constant_column(mean: f64, std: f64) -> bool {
    std <= CONSTANT_COLUMN_TOL * mean.abs().max(1.0)
}

/// z-scores each column; constant columns become exactly zero.
pub fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let (mean, std) = column_moments(x);
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let constant = is_constant_column(mean[j], std[j]);
        out.column_mut(j).mapv_inplace(|v| {
            if constant {
                0.0
            } else {
                (v - mean[j]) / std[j]
            }
        });
    }
    out
}

/// z-scores a vector with population std; constant vectors map to zero.
pub fn standardize_vector(v: ArrayView1<f64>) -> (Array1<f64>, f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.sum() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if is_constant_column(mean, std) {
        (Array1::zeros(v.len()), mean, 0.0)
    } else {
        (v.mapv(|x| (x - mean) / std), mean, std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCollection {
    pub datasets: Vec<Dataset>,
    pub splits: Vec<Split>,
    /// All datasets come from one causal graph (unit shuffling is meaningful).
    pub shared_graph: bool,
}

impl DatasetCollection {
    pub fn new(datasets: Vec<Dataset>, splits: Vec<Split>, shared_graph: bool) -> Result<Self> {
        if datasets.len() != splits.len() {
            return Err(CinaError::LengthMismatch(datasets.len(), splits.len()));
        }
        let mut seen = HashSet::new();
        for d in &datasets {
            if !seen.insert(d.id.as_str()) {
                return Err(CinaError::Validation(format!("duplicate dataset id `{}`", d.id)));
            }
        }
        Ok(DatasetCollection {
            datasets,
            splits,
            shared_graph,
        })
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&Dataset> {
        self.datasets
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(d, _)| d)
            .collect()
    }

    /// Sub-collection holding only the datasets of one split.
    pub fn subset(&self, which: Split) -> DatasetCollection {
        let datasets: Vec<Dataset> = self.split(which).into_iter().cloned().collect();
        let splits = vec![which; datasets.len()];
        DatasetCollection {
            datasets,
            splits,
            shared_graph: self.shared_graph,
        }
    }

    /// Writes every dataset plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, format: DataFormat) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (d, split) in self.datasets.iter().zip(&self.splits) {
            let file = format!("{}.{}", d.id, format.extension());
            d.save(&dir.join(&file), format)?;
            entries.push(ManifestEntry {
                id: d.id.clone(),
                split: *split,
                true_ate: d.true_ate,
                file,
            });
        }
        let manifest = Manifest {
            shared_graph: self.shared_graph,
            datasets: entries,
        };
        std::fs::write(dir.join("manifest.json"), manifest.to_json_string())?;
        Ok(manifest)
    }

    /// Loads a collection from a `manifest.json` path.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::from_json_str(&std::fs::read_to_string(manifest_path)?)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.load_collection(&base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    #[serde(default)]
    pub true_ate: Option<f64>,
    pub file: String,
}

/// `manifest.json`: ids, splits and true ATEs of a stored collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub shared_graph: bool,
    pub datasets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        let mut seen = HashSet::new();
        for e in &m.datasets {
            if !seen.insert(e.id.as_str()) {
                return Err(CinaError::Validation(format!("duplicate dataset id `{}`", e.id)));
            }
            let p = Path::new(&e.file);
            if p.is_absolute() || p.components().any(|c| c == std::path::Component::ParentDir) {
                return Err(CinaError::Validation(format!(
                    "manifest file `{}` escapes the collection directory",
                    e.file
                )));
            }
        }
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load_collection(&self, base: &Path) -> Result<DatasetCollection> {
        let mut datasets = Vec::with_capacity(self.datasets.len());
        let mut splits = Vec::with_capacity(self.datasets.len());
        for e in &self.datasets {
            let path: PathBuf = base.join(&e.file);
            let format = DataFormat::from_path(&path).ok_or_else(|| {
                CinaError::Validation(format!("unknown data format for `{}`", e.file))
            })?;
            let mut d = Dataset::load(&path, format)?;
            d.id = e.id.clone();
            if d.true_ate.is_none() {
                d.true_ate = e.true_ate;
            }
            datasets.push(d);
            splits.push(e.split);
        }
        DatasetCollection::new(datasets, splits, self.shared_graph)
    }
}

/// Datasets padded to a common unit count, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<String>,
    pub true_ates: Vec<Option<f64>>,
    pub covariates: Array3<f64>,
    pub treatments: Array2<f64>,
    pub outcomes: Array2<f64>,
    pub mask: Array2<bool>,
}

impl PaddedBatch {
    pub fn n_max(&self) -> usize {
        self.mask.ncols()
    }

    pub fn unit_counts(&self) -> Vec<usize> {
        self.mask
            .outer_iter()
            .map(|row| row.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Recovers the original datasets.
    pub fn unpad(&self) -> Result<Vec<Dataset>> {
        let counts = self.unit_counts();
        (0..self.ids.len())
            .map(|m| {
                let n = counts[m];
                let x = self
                    .covariates
                    .index_axis(Axis(0), m)
                    .slice(ndarray::s![..n, ..])
                    .to_owned();
                let t = (0..n).map(|i| self.treatments[[m, i]] as u8).collect();
                let y = self.outcomes.row(m).slice(ndarray::s![..n]).to_owned();
                Dataset::new(self.ids[m].clone(), x, t, y, self.true_ates[m])
            })
            .collect()
    }
}

pub fn pad_collection(c: &DatasetCollection) -> Result<PaddedBatch> {
    pad_datasets(&c.datasets.iter().collect::<Vec<_>>())
}

pub fn pad_datasets(datasets: &[&Dataset]) -> Result<PaddedBatch> {
    let first = datasets.first().ok_or(CinaError::EmptyCollection)?;
    let dx = first.n_covariates();
    let n_max = datasets.iter().map(|d| d.n_units()).max().unwrap_or(0);
    let m = datasets.len();
    let mut covariates = Array3::zeros((m, n_max, dx));
    let mut treatments = Array2::zeros((m, n_max));
    let mut outcomes = Array2::zeros((m, n_max));
    let mut mask = Array2::from_elem((m, n_max), false);
    for (k, d) in datasets.iter().enumerate() {
        if d.n_covariates() != dx {
            return Err(CinaError::DimensionMismatch {
                expected: dx,
                actual: d.n_covariates(),
                context: format!("covariates of `{}`", d.id),
            });
        }
        for i in 0..d.n_units() {
            covariates
                .slice_mut(ndarray::s![k, i, ..])
                .assign(&d.covariates.row(i));
            treatments[[k, i]] = f64::from(d.treatments[i]);
            outcomes[[k, i]] = d.outcomes[i];
            mask[[k, i]] = true;
        }
    }
    Ok(PaddedBatch {
        ids: datasets.iter().map(|d| d.id.clone()).collect(),
        true_ates: datasets.iter().map(|d| d.true_ate).collect(),
        covariates,
        treatments,
        outcomes,
        mask,
    })
}

/// One outcome with `S` binary treatment columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTreatmentDataset {
    pub id: String,
    pub covariates: Array2<f64>,
    /// `N x S`, entries in {0, 1}.
    pub treatments: Array2<u8>,
    pub outcomes: Array1<f64>,
}

impl MultiTreatmentDataset {
    pub fn new(
        id: impl Into<String>,
        covariates: Array2<f64>,
        treatments: Array2<u8>,
        outcomes: Array1<f64>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if treatments.nrows() != n || outcomes.len() != n {
            return Err(CinaError::DimensionMismatch {
                expected: n,
                actual: treatments.nrows().min(outcomes.len()),
                context: "multi-treatment rows".into(),
            });
        }
        if treatments.iter().any(|&t| t > 1) {
            return Err(CinaError::Validation("treatments must be binary".into()));
        }
        if covariates.iter().chain(outcomes.iter()).any(|v| !v.is_finite()) {
            return Err(CinaError::Validation("non-finite covariates or outcomes".into()));
        }
        for (s, col) in treatments.columns().into_iter().enumerate() {
            let treated = col.iter().filter(|&&t| t == 1).count();
            if treated == 0 {
                return Err(CinaError::EmptyTreatmentColumn { column: s, group: "treated" });
            }
            if treated == n {
                return Err(CinaError::EmptyTreatmentColumn { column: s, group: "control" });
            }
        }
        Ok(MultiTreatmentDataset {
            id: id.into(),
            covariates,
            treatments,
            outcomes,
        })
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.ncols()
    }

    /// Sign matrix `W_is = 2 T_is - 1`.
    pub fn signs(&self) -> Array2<f64> {
        self.treatments.mapv(|t| if t == 1 { 1.0 } else { -1.0 })
    }

    /// The single-treatment dataset for column `s`.
    pub fn column(&self, s: usize) -> Result<Dataset> {
        Dataset::new(
            format!("{}-t{s}", self.id),
            self.covariates.clone(),
            self.treatments.column(s).to_vec(),
            self.outcomes.clone(),
            None,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            "toy",
            array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0]],
            vec![1, 1, 0, 0],
            array![1.0, 2.0, 3.0, 4.0],
            Some(0.5),
        )
        .unwrap()
    }

    #[test]
    fn csv_read_back() {
        let text = "x0,x1,t,y\n0.5,1,1,2\n0.1,2,1,3\n0.2,3,0,4\n0.3,4,0,5\n";
        let d = Dataset::from_csv_str("a", text).unwrap();
        assert_eq!(d.n_units(), 4);
        assert_eq!(d.n_treated(), 2);
        assert_eq!(d.true_ate, None);
    }

    #[test]
    fn csv_metadata_header() {
        let text = "# true_ate=-0.4\nx0,t,y\n1,1,2\n2,0,3\n";
        let d = Dataset::from_csv_str("a", text).unwrap();
        assert_eq!(d.true_ate, Some(-0.4));
    }

    #[test]
    fn all_treated_is_degenerate() {
        let text = "x0,t,y\n1,1,2\n2,1,3\n3,1,3\n4,1,3\n";
        let err = Dataset::from_csv_str("a", text).unwrap_err();
        assert!(matches!(err, CinaError::DegenerateDataset { .. }));
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let text = "x0,t,y\n1,1,2\n2,2,3\n";
        assert!(matches!(
            Dataset::from_csv_str("a", text).unwrap_err(),
            CinaError::Validation(_)
        ));
    }

    #[test]
    fn malformed_cell_names_row_and_column() {
        let text = "x0,x1,t,y\n1,2,1,2\n2,abc,0,3\n";
        match Dataset::from_csv_str("a", text).unwrap_err() {
            CinaError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "x1");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_header_rejected() {
        let text = "a,b,t,y\n1,2,1,2\n2,3,0,3\n";
        assert!(matches!(
            Dataset::from_csv_str("a", text).unwrap_err(),
            CinaError::Parse { row: 0, .. }
        ));
    }

    #[test]
    fn json_round_trip() {
        let d = toy();
        let back = Dataset::from_json_str("other", &d.to_json_string()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn standardize_arithmetic_sequence() {
        let x = array![[1.0], [2.0], [3.0]];
        let z = standardize_columns(&x);
        let expected = 1.5f64.sqrt();
        assert!((z[[0, 0]] + expected).abs() < 1e-4);
        assert!(z[[1, 0]].abs() < 1e-12);
        assert!((z[[2, 0]] - expected).abs() < 1e-4);
        assert!((z[[2, 0]] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn standardize_constant_column_is_zero() {
        let d = toy().standardize();
        assert!(d.covariates.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(d.treatments, toy().treatments);
        assert_eq!(d.outcomes, toy().outcomes);
        assert_eq!(d.true_ate, toy().true_ate);
    }

    #[test]
    fn signs_square_to_one() {
        let w = toy().signs();
        assert_eq!(w, array![1.0, 1.0, -1.0, -1.0]);
        assert!(w.iter().all(|s| s * s == 1.0));
    }

    #[test]
    fn pad_two_datasets() {
        let a = toy();
        let mut b = toy();
        b.id = "b".into();
        b.covariates = array![[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]];
        b.treatments = vec![1, 0, 0];
        b.outcomes = array![1.0, 2.0, 3.0];
        let c = DatasetCollection::new(vec![b, a], vec![Split::Train, Split::Test], true).unwrap();
        let batch = pad_collection(&c).unwrap();
        assert_eq!(batch.n_max(), 4);
        assert_eq!(batch.unit_counts(), vec![3, 4]);
        assert_eq!(batch.covariates[[0, 3, 0]], 0.0);
        assert_eq!(batch.outcomes[[0, 3]], 0.0);
        assert_eq!(batch.unpad().unwrap(), c.datasets);
    }

    #[test]
    fn pad_single_is_identity() {
        let c = DatasetCollection::new(vec![toy()], vec![Split::Test], true).unwrap();
        let batch = pad_collection(&c).unwrap();
        assert!(batch.mask.iter().all(|&m| m));
        assert_eq!(batch.unpad().unwrap()[0], toy());
    }

    #[test]
    fn pad_empty_errors() {
        let c = DatasetCollection::new(vec![], vec![], true).unwrap();
        assert!(matches!(pad_collection(&c), Err(CinaError::EmptyCollection)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = DatasetCollection::new(vec![toy(), toy()], vec![Split::Train, Split::Test], true);
        assert!(r.is_err());
    }

    #[test]
    fn manifest_rejects_parent_paths() {
        let text = r#"{"datasets":[{"id":"a","split":"train","file":"../a.csv"}]}"#;
        assert!(Manifest::from_json_str(text).is_err());
    }
}

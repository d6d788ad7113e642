//! CSV ingestion, standardization, sphere projection, splits and minibatches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harmonics::SpherePoint;

/// Default bias coordinate appended before projection.
pub const DEFAULT_BIAS: f64 = 1.0;

/// Default tolerated fraction of malformed rows.
pub const DEFAULT_MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Binary,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "regression" => Ok(Task::Regression),
            "binary" => Ok(Task::Binary),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected regression or binary)"
            ))),
        }
    }
}

/// Which columns to read and how to interpret the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub target: String,
    pub features: Vec<String>,
    pub task: Task,
    /// Column names of a headerless file; `None` reads them from the header.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
}

impl Schema {
    /// Parse `key=value` lines: `target=`, `features=a,b,c`, `task=` and
    /// optionally `columns=a,b,c` for files without a header row.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("schema line {}: expected key=value", n + 1))
            })?;
            if map
                .insert(k.trim().to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("schema key '{}' repeated", k.trim())));
            }
        }
        let take = |key: &str, map: &mut HashMap<String, String>| {
            map.remove(key)
                .ok_or_else(|| Error::Config(format!("schema is missing '{key}'")))
        };
        let target = take("target", &mut map)?;
        let features = split_names(&take("features", &mut map)?);
        let task = Task::parse(&take("task", &mut map)?)?;
        let columns = map.remove("columns").map(|c| split_names(&c));
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown schema key '{k}'")));
        }
        if features.is_empty() {
            return Err(Error::Config("schema lists no feature columns".into()));
        }
        if features.contains(&target) {
            return Err(Error::Config(format!(
                "target '{target}' also listed as a feature"
            )));
        }
        if let Some(cols) = &columns {
            for name in features.iter().chain(std::iter::once(&target)) {
                if !cols.contains(name) {
                    return Err(Error::Config(format!(
                        "column '{name}' not listed in 'columns'"
                    )));
                }
            }
        }
        Ok(Self {
            target,
            features,
            task,
            columns,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "target={}\nfeatures={}\ntask={}\n",
            self.target,
            self.features.join(","),
            self.task.name()
        );
        if let Some(cols) = &self.columns {
            s.push_str(&format!("columns={}\n", cols.join(",")));
        }
        s
    }
}

fn split_names(s: &str) -> Vec<String> {
    s.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Raw or standardized tabular data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    /// `N × d_raw`, one row per example.
    pub inputs: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub task: Task,
    /// Rows dropped because a value was NaN, infinite or empty.
    pub rejected_rows: usize,
    /// Rows dropped because they could not be parsed.
    pub malformed_rows: usize,
    pub standardized: bool,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        inputs: DMatrix<f64>,
        targets: Vec<f64>,
        task: Task,
    ) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                actual: targets.len(),
            });
        }
        if inputs.ncols() != feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: feature_names.len(),
                actual: inputs.ncols(),
            });
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        if task == Task::Binary {
            if let Some(row) = targets.iter().position(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::InvalidTarget {
                    row,
                    value: targets[row],
                    likelihood: "binary task",
                });
            }
        }
        Ok(Self {
            feature_names,
            inputs,
            targets,
            task,
            rejected_rows: 0,
            malformed_rows: 0,
            standardized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn raw_dimension(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.raw_dimension();
        let inputs = DMatrix::from_fn(indices.len(), d, |i, j| self.inputs[(indices[i], j)]);
        Dataset {
            feature_names: self.feature_names.clone(),
            inputs,
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            task: self.task,
            rejected_rows: 0,
            malformed_rows: 0,
            standardized: self.standardized,
        }
    }

    /// SHA-256 over the numeric contents (little-endian bytes, row-major).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.raw_dimension() as u64).to_le_bytes());
        for i in 0..self.len() {
            for j in 0..self.raw_dimension() {
                h.update(self.inputs[(i, j)].to_le_bytes());
            }
            h.update(self.targets[i].to_le_bytes());
        }
        to_hex(&h.finalize())
    }
}

/// Lowercase hexadecimal encoding.
pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a CSV file with a header row according to `schema`.
///
/// Rows with NaN, infinite or empty values are dropped and counted in
/// `rejected_rows`. Rows that fail to parse (wrong field count, non-numeric
/// text, non-binary labels for a binary task) are counted in
/// `malformed_rows`; loading fails if they exceed `max_malformed_fraction`
/// of the data rows.
pub fn load_csv(path: &Path, schema: &Schema, max_malformed_fraction: f64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.columns.is_none())
        .flexible(true)
        .from_path(path)?;
    let headers = match &schema.columns {
        Some(cols) => csv::StringRecord::from(cols.clone()),
        None => reader.headers()?.clone(),
    };
    let n_cols = headers.len();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                Error::Data(format!(
                    "column '{name}' not in header of {}",
                    path.display()
                ))
            })
    };
    let target_col = col(&schema.target)?;
    let feature_cols = schema
        .features
        .iter()
        .map(|f| col(f))
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    let mut targets = Vec::new();
    let mut rejected = 0usize;
    let mut malformed = 0usize;
    let mut total = 0usize;
    for record in reader.records() {
        total += 1;
        let record = match record {
            Ok(r) if r.len() == n_cols => r,
            _ => {
                malformed += 1;
                continue;
            }
        };
        let parse = |idx: usize| -> std::result::Result<f64, bool> {
            // Err(true): missing value, Err(false): malformed.
            let s = record[idx].trim();
            if s.is_empty() {
                return Err(true);
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(true),
                Err(_) => Err(false),
            }
        };
        let mut row = Vec::with_capacity(feature_cols.len());
        let mut status = Ok(());
        for &c in &feature_cols {
            match parse(c) {
                Ok(v) => row.push(v),
                Err(missing) => {
                    status = Err(missing);
                    break;
                }
            }
        }
        let target = status.and_then(|_| parse(target_col)).and_then(|y| {
            if schema.task == Task::Binary && y != 0.0 && y != 1.0 {
                Err(false)
            } else {
                Ok(y)
            }
        });
        match target {
            Ok(y) => {
                values.extend(row);
                targets.push(y);
            }
            Err(true) => rejected += 1,
            Err(false) => malformed += 1,
        }
    }
    if total > 0 && malformed as f64 > max_malformed_fraction * total as f64 {
        return Err(Error::Data(format!(
            "{malformed} of {total} rows in {} are malformed (limit {:.3}%)",
            path.display(),
            100.0 * max_malformed_fraction
        )));
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("no usable rows in {}", path.display())));
    }
    let inputs = DMatrix::from_row_slice(targets.len(), feature_cols.len(), &values);
    let mut ds = Dataset::new(schema.features.clone(), inputs, targets, schema.task)?;
    ds.rejected_rows = rejected;
    ds.malformed_rows = malformed;
    Ok(ds)
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Column means and population standard deviations; constant columns get
    /// unit scale.
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Data("cannot fit a scaler on zero rows".into()));
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mu = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Ok(Self { mean, std })
    }

    /// Leaves `columns` columns unchanged.
    pub fn identity(columns: usize) -> Self {
        Self {
            mean: vec![0.0; columns],
            std: vec![1.0; columns],
        }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.ncols(),
            });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.std[j]
        }))
    }

    pub fn inverse(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.ncols(),
            });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            x[(i, j)] * self.std[j] + self.mean[j]
        }))
    }
}

/// Scalar standardization of regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(y: &[f64]) -> Result<Self> {
        let s = Scaler::fit(&DMatrix::from_column_slice(y.len(), 1, y))?;
        Ok(Self {
            mean: s.mean[0],
            std: s.std[0],
        })
    }

    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Map a predictive variance in standardized units back.
    pub fn unstandardize_variance(&self, v: f64) -> f64 {
        v * self.std * self.std
    }
}

/// Scalers fit on a training split, applied to any split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub inputs: Scaler,
    /// Present for regression only.
    pub target: Option<TargetScaler>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.standardized {
            return Err(Error::Data("dataset is already standardized".into()));
        }
        Ok(Self {
            inputs: Scaler::fit(&train.inputs)?,
            target: match train.task {
                Task::Regression => Some(TargetScaler::fit(&train.targets)?),
                Task::Binary => None,
            },
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.standardized {
            return Err(Error::Data("dataset is already standardized".into()));
        }
        let mut out = data.clone();
        out.inputs = self.inputs.transform(&data.inputs)?;
        if let Some(t) = &self.target {
            out.targets = data.targets.iter().map(|&y| t.standardize(y)).collect();
        }
        out.standardized = true;
        Ok(out)
    }

    pub fn target_scaler(&self) -> TargetScaler {
        self.target.unwrap_or_else(TargetScaler::identity)
    }
}

/// Inputs mapped onto `S^{d_raw}` with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereData {
    /// `N × (d_raw + 1)` unit rows.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Norm of each bias-augmented row before normalization.
    pub stored_norms: Vec<f64>,
    pub bias: f64,
    pub task: Task,
}

impl SphereData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.x.ncols()
    }

    pub fn points(&self) -> Vec<SpherePoint> {
        (0..self.len())
            .map(|i| {
                let row: Vec<f64> = self
                    .x
                    .row(i)
                    .iter()
                    .map(|v| v * self.stored_norms[i])
                    .collect();
                SpherePoint::from_vector(&row).expect("rows have positive norm")
            })
            .collect()
    }

    /// Rows `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(indices.len(), self.dimension(), |i, j| {
            self.x[(indices[i], j)]
        });
        (x, indices.iter().map(|&i| self.y[i]).collect())
    }
}

/// Append the bias coordinate `b` to each standardized row and normalize.
pub fn project_to_sphere(data: &Dataset, bias: f64) -> Result<SphereData> {
    if !data.standardized {
        return Err(Error::Data(
            "inputs must be standardized before projection".into(),
        ));
    }
    project_rows(data, bias)
}

/// As [`project_to_sphere`] without the standardization guard.
pub fn project_rows(data: &Dataset, bias: f64) -> Result<SphereData> {
    if !(bias > 0.0) || !bias.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bias must be positive, got {bias}"
        )));
    }
    let n = data.len();
    let d = data.raw_dimension() + 1;
    if d < 3 {
        return Err(Error::Domain(format!(
            "{} input column(s) give sphere dimension {d}; at least 2 are needed",
            data.raw_dimension()
        )));
    }
    let mut x = DMatrix::zeros(n, d);
    let mut stored_norms = Vec::with_capacity(n);
    for i in 0..n {
        let mut sq = bias * bias;
        for j in 0..d - 1 {
            sq += data.inputs[(i, j)] * data.inputs[(i, j)];
        }
        let norm = sq.sqrt();
        for j in 0..d - 1 {
            x[(i, j)] = data.inputs[(i, j)] / norm;
        }
        x[(i, d - 1)] = bias / norm;
        stored_norms.push(norm);
    }
    Ok(SphereData {
        x,
        y: data.targets.clone(),
        stored_norms,
        bias,
        task: data.task,
    })
}

/// Deterministic seeded permutation split into `(train, test)` index sets.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Data(format!(
            "test fraction {test_fraction} of {n} rows leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    Ok((train, test))
}

/// Split a raw dataset into `(train, test)`.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(data.len(), test_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}

/// Index blocks covering `0..n` once, in an order reshuffled by `epoch_seed`.
#[derive(Debug, Clone)]
pub struct Minibatches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Minibatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let block = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(block)
    }
}

pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Minibatches> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(Minibatches {
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema() -> Schema {
        Schema::parse("target=y\nfeatures=a,b\ntask=regression\n").unwrap()
    }

    #[test]
    fn schema_parsing() {
        let s = schema();
        assert_eq!(s.features, vec!["a", "b"]);
        assert_eq!(Schema::parse(&s.to_text()).unwrap(), s);
        assert!(Schema::parse("target=y\nfeatures=a\n").is_err());
        assert!(Schema::parse("target=y\nfeatures=a\ntask=ranking\n").is_err());
        assert!(Schema::parse("target=y\nfeatures=y\ntask=binary\n").is_err());
    }

    #[test]
    fn headerless_file_with_declared_columns() {
        let schema =
            Schema::parse("target=label\nfeatures=f2,f1\ntask=binary\ncolumns=label,f1,f2\n")
                .unwrap();
        assert_eq!(Schema::parse(&schema.to_text()).unwrap(), schema);
        let f = write_tmp("1.000000000000000000e+00,0.5,2\n0.0,1.5,3\n");
        let ds = load_csv(f.path(), &schema, 0.0).unwrap();
        assert_eq!(ds.targets, vec![1.0, 0.0]);
        assert_eq!(ds.inputs[(0, 0)], 2.0);
        assert_eq!(ds.inputs[(1, 1)], 1.5);
        assert!(Schema::parse("target=y\nfeatures=a\ntask=binary\ncolumns=a,b\n").is_err());
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_tmp("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let ds = load_csv(f.path(), &schema(), 0.0).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.inputs[(2, 1)], 8.0);
        assert_eq!(ds.targets, vec![3.0, 6.0, 9.0]);
    }

    #[test]
    fn column_order_follows_schema_and_quoting_works() {
        let f = write_tmp("y,\"b\",a\n1,\"2\",3\n");
        let ds = load_csv(f.path(), &schema(), 0.0).unwrap();
        assert_eq!(
            ds.inputs.row(0).iter().cloned().collect::<Vec<_>>(),
            vec![3.0, 2.0]
        );
    }

    #[test]
    fn missing_values_are_dropped_and_counted() {
        let f = write_tmp("a,b,y\n1,NaN,3\n4,5,6\n,1,2\n1,inf,0\n");
        let ds = load_csv(f.path(), &schema(), 0.0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.rejected_rows, 3);
    }

    #[test]
    fn malformed_rows_abort_beyond_fraction() {
        let f = write_tmp("a,b,y\n1,2,3\n4,x,6\n7,8\n1,1,1\n");
        assert!(load_csv(f.path(), &schema(), 0.1).is_err());
        let ds = load_csv(f.path(), &schema(), 0.5).unwrap();
        assert_eq!(ds.malformed_rows, 2);
        assert_eq!(ds.len(), 2);
        let f = write_tmp("a,q,y\n1,2,3\n");
        assert!(matches!(
            load_csv(f.path(), &schema(), 0.0),
            Err(Error::Data(_))
        ));
        let binary = Schema::parse("target=y\nfeatures=a,b\ntask=binary\n").unwrap();
        let f = write_tmp("a,b,y\n1,2,0\n1,2,2\n");
        assert_eq!(load_csv(f.path(), &binary, 0.5).unwrap().malformed_rows, 1);
    }

    #[test]
    fn loading_is_deterministic() {
        let f = write_tmp("a,b,y\n1.5,2,3\n4,5e-3,6\n");
        let a = load_csv(f.path(), &schema(), 0.0).unwrap();
        let b = load_csv(f.path(), &schema(), 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), a.subset(&[1, 0]).content_hash());
    }

    fn toy(n: usize) -> Dataset {
        let inputs = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * (j + 1) as f64);
        let targets = (0..n).map(|i| (i as f64).sin() * 4.0 + 2.0).collect();
        Dataset::new(
            vec!["a".into(), "b".into(), "c".into()],
            inputs,
            targets,
            Task::Regression,
        )
        .unwrap()
    }

    #[test]
    fn standardized_training_columns() {
        let (train, test) = split(&toy(50), 0.2, 3).unwrap();
        let st = Standardizer::fit(&train).unwrap();
        let z = st.apply(&train).unwrap();
        for col in z.inputs.column_iter() {
            let mean = col.mean();
            let std =
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() <= 1e-9);
            assert!((std - 1.0).abs() <= 1e-9);
        }
        let zt = st.apply(&test).unwrap();
        assert_eq!(zt.len(), 10);
        assert!(st.apply(&z).is_err());
        let ts = st.target_scaler();
        for (&y, &s) in train.targets.iter().zip(&z.targets) {
            assert!((ts.unstandardize(s) - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let mut ds = Dataset::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]),
            vec![0.0, 1.0],
            Task::Regression,
        )
        .unwrap();
        assert!(project_to_sphere(&ds, 1.0).is_err());
        ds.standardized = true;
        let p = project_to_sphere(&ds, 1.0).unwrap();
        assert_eq!(p.dimension(), 3);
        assert_eq!(
            p.x.row(0).iter().cloned().collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0]
        );
        assert!((p.stored_norms[1] - 26f64.sqrt()).abs() <= 1e-12);
        assert!(project_to_sphere(&ds, 0.0).is_err());
        // Doubling a raw row changes the point (the bias does not scale) and
        // doubles the unbiased part of the norm.
        let mut doubled = ds.clone();
        doubled.inputs.row_mut(1).scale_mut(2.0);
        let q = project_to_sphere(&doubled, 1.0).unwrap();
        assert!((q.x.row(1) - p.x.row(1)).norm() > 1e-3);
        assert!(
            (q.stored_norms[1].powi(2) - 1.0 - 4.0 * (p.stored_norms[1].powi(2) - 1.0)).abs()
                <= 1e-10
        );
        // Projecting an already projected row again is not the identity.
        let again = Dataset {
            inputs: p.x.columns(0, 2).clone_owned(),
            ..ds.clone()
        };
        let twice = project_to_sphere(&again, 1.0).unwrap();
        assert!((twice.x.row(1) - p.x.row(1)).norm() > 1e-3);
        let one_col = Dataset::new(
            vec!["a".into()],
            DMatrix::zeros(1, 1),
            vec![0.0],
            Task::Regression,
        )
        .unwrap();
        assert!(matches!(project_rows(&one_col, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn split_examples() {
        let (tr, te) = split_indices(10, 0.2, 42).unwrap();
        assert_eq!(te.len(), 2);
        assert_eq!(
            split_indices(10, 0.2, 42).unwrap(),
            (tr.clone(), te.clone())
        );
        let mut all: Vec<usize> = tr.iter().chain(&te).cloned().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let sets: Vec<Vec<usize>> = (1..=3)
            .map(|s| {
                let mut t = split_indices(100, 0.2, s).unwrap().1;
                t.sort();
                t
            })
            .collect();
        assert!(sets[0] != sets[1] && sets[1] != sets[2] && sets[0] != sets[2]);
        assert!(split_indices(10, 0.0, 1).is_err());
        assert!(split_indices(3, 0.1, 1).is_err());
    }

    #[test]
    fn minibatch_examples() {
        let sizes: Vec<usize> = minibatches(5, 2, 0).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let a: Vec<usize> = minibatches(20, 3, 1).unwrap().flatten().collect();
        let b: Vec<usize> = minibatches(20, 3, 2).unwrap().flatten().collect();
        assert_ne!(a, b);
        let mut sa = a.clone();
        sa.sort();
        let mut sb = b.clone();
        sb.sort();
        assert_eq!(sa, sb);
        assert!(minibatches(3, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn minibatches_cover_every_index_once(n in 0usize..200, bs in 1usize..50, seed: u64) {
            let mut all: Vec<usize> = minibatches(n, bs, seed).unwrap().flatten().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn projected_rows_are_unit(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..20), b in 0.01f64..10.0) {
            let n = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let mut ds = Dataset::new((0..4).map(|i| i.to_string()).collect(), DMatrix::from_row_slice(n, 4, &flat), vec![0.0; n], Task::Regression).unwrap();
            ds.standardized = true;
            let p = project_to_sphere(&ds, b).unwrap();
            for i in 0..n {
                prop_assert!((p.x.row(i).norm() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn target_round_trip(ys in proptest::collection::vec(-1e6f64..1e6, 2..50)) {
            let t = TargetScaler::fit(&ys).unwrap();
            for &y in &ys {
                prop_assert!((t.unstandardize(t.standardize(y)) - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}

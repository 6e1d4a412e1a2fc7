//! Synthetic token-grid classification tasks and dataset files.
//!
//! Class `c` owns a template `U_c·V_c` (`tokens × token_dim`, rank 2),
//! centered over tokens and scaled to unit RMS. A sample is its class
//! template plus `difficulty · N(0, 1)` noise. Labels cycle through the
//! classes, so every split is balanced to within one sample.
//!
//! CSV files carry a header `label,t0_0,t0_1,...` (`t{token}_{feature}`) and
//! one sample per row. Binary files are tensor bundles with a `x` tensor
//! (`samples·tokens × token_dim`) and a `labels` row.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{read_bundle, write_bundle};
use crate::error::{param_err, Result};
use crate::numerics::{gaussian_at, Matrix};
use crate::rng::{self, Site};
use crate::{Error, Scalar};

const TEMPLATE_RANK: usize = 2;
pub const DATASET_KIND: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_classes: 10,
            n_train: 200,
            n_val: 100,
            n_test: 200,
            tokens: 16,
            token_dim: 16,
            difficulty: 0.5,
            seed: 0,
        }
    }
}

/// One split: `labels.len()` samples of `tokens` consecutive rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T: Scalar> {
    pub x: Matrix<T>,
    pub labels: Vec<usize>,
    pub tokens: usize,
}

impl<T: Scalar> Split<T> {
    pub fn new(x: Matrix<T>, labels: Vec<usize>, tokens: usize) -> Result<Self> {
        if tokens == 0 || x.rows() != labels.len() * tokens {
            return Err(param_err(format!(
                "{} rows cannot hold {} samples of {tokens} tokens",
                x.rows(),
                labels.len()
            )));
        }
        Ok(Split { x, labels, tokens })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.x.cols()
    }

    /// Samples `idx` stacked into one batch.
    pub fn batch(&self, idx: &[usize]) -> (Matrix<T>, Vec<usize>) {
        let t = self.tokens;
        let mut x = Matrix::zeros(idx.len() * t, self.x.cols());
        for (k, &i) in idx.iter().enumerate() {
            for r in 0..t {
                x.row_mut(k * t + r).copy_from_slice(self.x.row(i * t + r));
            }
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Writes the split as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["label".to_string()];
        for t in 0..self.tokens {
            for f in 0..self.token_dim() {
                header.push(format!("t{t}_{f}"));
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for (i, &y) in self.labels.iter().enumerate() {
            let mut rec = vec![y.to_string()];
            for t in 0..self.tokens {
                rec.extend(self.x.row(i * self.tokens + t).iter().map(|v| v.as_f64().to_string()));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV split; token count and width come from the header.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        let (tokens, width) = parse_header(&header)?;
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != header.len() {
                return Err(Error::Format(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let label = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("row {}: bad label `{}`", line + 1, &rec[0])))?;
            labels.push(label);
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad value `{field}`", line + 1)))?;
                data.push(T::of(v));
            }
        }
        let x = Matrix::new(labels.len() * tokens, width, data)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Split::new(x, labels, tokens)
    }

    /// Writes the split as a tensor bundle.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let labels = Matrix::row_vector(self.labels.iter().map(|&y| T::of(y as f64)).collect());
        write_bundle(
            path,
            DATASET_KIND,
            serde_json::Value::Null,
            json!({ "tokens": self.tokens }),
            &[("x".to_string(), self.x.clone()), ("labels".to_string(), labels)],
        )?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (manifest, mut t) = read_bundle::<T>(path)?;
        if manifest.kind != DATASET_KIND {
            return Err(Error::Format(format!("{} is not a dataset", path.display())));
        }
        let tokens = manifest.meta["tokens"]
            .as_u64()
            .ok_or_else(|| Error::Format("dataset metadata lacks `tokens`".into()))? as usize;
        let (Some(x), Some(labels)) = (t.remove("x"), t.remove("labels")) else {
            return Err(Error::Format("dataset needs `x` and `labels` tensors".into()));
        };
        let labels = labels.data().iter().map(|v| v.as_f64() as usize).collect();
        Split::new(x, labels, tokens)
    }

    /// Dispatches on the extension: `.csv` or a bundle manifest otherwise.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset {} not found", path.display()),
            )));
        }
        if path.extension().is_some_and(|e| e == "csv") {
            Self::read_csv(path)
        } else {
            Self::read_binary(path)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        if path.extension().is_some_and(|e| e == "csv") {
            self.write_csv(path)
        } else {
            self.write_binary(path)
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Format("dataset header must start with `label`".into()));
    }
    let mut cells = Vec::with_capacity(header.len() - 1);
    for name in header.iter().skip(1) {
        let parsed = name
            .strip_prefix('t')
            .and_then(|s| s.split_once('_'))
            .and_then(|(t, f)| Some((t.parse::<usize>().ok()?, f.parse::<usize>().ok()?)));
        cells.push(parsed.ok_or_else(|| Error::Format(format!("bad column `{name}`")))?);
    }
    let width = cells.iter().filter(|c| c.0 == 0).count();
    if width == 0 || cells.len() % width != 0 {
        return Err(Error::Format("columns do not form a token grid".into()));
    }
    let tokens = cells.len() / width;
    for (k, &(t, f)) in cells.iter().enumerate() {
        if (t, f) != (k / width, k % width) {
            return Err(Error::Format(format!("column t{t}_{f} out of order")));
        }
    }
    Ok((tokens, width))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub train: Split<T>,
    pub val: Split<T>,
    pub test: Option<Split<T>>,
    pub n_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn tokens(&self) -> usize {
        self.train.tokens
    }

    pub fn token_dim(&self) -> usize {
        self.train.token_dim()
    }
}

/// Deterministic synthetic task; see the module docs for the generator.
pub fn make_synthetic_task<T: Scalar>(spec: &TaskSpec) -> Result<Dataset<T>> {
    if spec.n_classes < 2 || spec.tokens == 0 || spec.token_dim == 0 {
        return Err(param_err("task needs at least 2 classes and non-empty tokens"));
    }
    if spec.n_train < spec.n_classes || spec.n_val == 0 {
        return Err(param_err(format!(
            "task needs n_train >= n_classes ({} < {}) and a validation split",
            spec.n_train, spec.n_classes
        )));
    }
    if !(spec.difficulty >= 0.0) || !spec.difficulty.is_finite() {
        return Err(param_err(format!("difficulty must be non-negative, got {}", spec.difficulty)));
    }
    let templates: Vec<Matrix<f64>> = (0..spec.n_classes)
        .map(|c| template(spec, c))
        .collect::<Result<_>>()?;
    let split = |id: u32, n: usize| -> Result<Split<T>> {
        let mut x = Matrix::zeros(n * spec.tokens, spec.token_dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % spec.n_classes;
            labels.push(y);
            let mut r = rng::stream(spec.seed, Site::TaskSample { split: id, index: i as u32 });
            for t in 0..spec.tokens {
                let row = x.row_mut(i * spec.tokens + t);
                for (f, v) in row.iter_mut().enumerate() {
                    let noise: f64 = rng::normal(&mut r, 1.0);
                    *v = T::of(templates[y].get(t, f) + spec.difficulty * noise);
                }
            }
        }
        Split::new(x, labels, spec.tokens)
    };
    Ok(Dataset {
        train: split(0, spec.n_train)?,
        val: split(1, spec.n_val)?,
        test: if spec.n_test > 0 { Some(split(2, spec.n_test)?) } else { None },
        n_classes: spec.n_classes,
    })
}

fn template(spec: &TaskSpec, class: usize) -> Result<Matrix<f64>> {
    let site = Site::TaskTemplate { class: class as u32 };
    let uv: Matrix<f64> = gaussian_at(spec.tokens + spec.token_dim, TEMPLATE_RANK, 1.0, spec.seed, site)?;
    let u = uv.slice_rows(0, spec.tokens);
    let v = uv.slice_rows(spec.tokens, spec.tokens + spec.token_dim);
    let mut m = u.matmul_nt(&v)?;
    let n = spec.tokens as f64;
    for f in 0..spec.token_dim {
        let mean = (0..spec.tokens).map(|t| m.get(t, f)).sum::<f64>() / n;
        for t in 0..spec.tokens {
            m.set(t, f, m.get(t, f) - mean);
        }
    }
    let rms = (m.data().iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
    if rms > 0.0 {
        m = m.scale(1.0 / rms)?;
    }
    Ok(m)
}

//! Synthetic datasets, CSV ingestion and seeded batching.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Row-major `n x dim` feature matrix.
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Feature matrix and labels for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Dataset {
    /// Builds a dataset whose rows are all in the training split.
    pub fn new(name: impl Into<String>, features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let n = labels.len();
        Ok(Self {
            name: name.into(),
            features,
            dim,
            labels,
            classes,
            train: (0..n).collect(),
            eval: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Reassigns a seeded `TRAIN_FRACTION` / rest split.
    pub fn with_split(mut self, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::keyed(seed, u64::MAX).shuffle(&mut idx);
        let n_train = ((self.len() as f64) * TRAIN_FRACTION).round() as usize;
        self.eval = idx.split_off(n_train);
        self.train = idx;
        self
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        Batch {
            x: Tensor::new(vec![rows.len(), self.dim], x).expect("row-major batch"),
            y: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn train_batch(&self) -> Batch {
        self.batch(&self.train)
    }

    pub fn eval_batch(&self) -> Batch {
        self.batch(&self.eval)
    }

    /// First `limit` training rows, in split order.
    pub fn train_subset(&self, limit: usize) -> Batch {
        self.batch(&self.train[..limit.min(self.train.len())])
    }
}

/// Two interleaved half circles; label 0 is the upper arc centred at the
/// origin, label 1 the lower arc centred at `(1, 0.5)`.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::Data(format!("two moons needs at least 4 points, got {n}")));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut rng = Rng::new(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let arc = |i: usize, count: usize| std::f64::consts::PI * i as f64 / (count - 1) as f64;
    for i in 0..n_outer {
        let t = arc(i, n_outer);
        features.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = arc(i, n_inner);
        features.extend([1.0 - t.cos(), 1.0 - t.sin() - 0.5]);
        labels.push(1);
    }
    if noise > 0.0 {
        for x in &mut features {
            *x += noise * rng.normal();
        }
    }
    Ok(Dataset::new("two_moons", features, 2, labels)?.with_split(seed))
}

/// Isotropic Gaussian clusters; point `i` belongs to center `i % centers.len()`.
pub fn gen_blobs(n: usize, centers: &[Vec<f64>], spread: f64, seed: u64) -> Result<Dataset> {
    let dim = centers.first().map_or(0, |c| c.len());
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Data("blob centers must share a nonzero dimension".into()));
    }
    let mut rng = Rng::new(seed);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers.len();
        for &mu in &centers[c] {
            features.push(mu + spread * rng.normal());
        }
        labels.push(c);
    }
    let mut ds = Dataset::new("blobs", features, dim, labels)?;
    ds.classes = centers.len();
    Ok(ds.with_split(seed))
}

/// Row indices for one epoch: `rows` shuffled by `(seed, epoch)` and cut
/// into `batch_size` pieces, keeping the final short batch.
pub fn batch_indices(rows: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    Rng::keyed(seed, epoch).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batches(ds: &Dataset, rows: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    batch_indices(rows, batch_size, seed, epoch)
        .iter()
        .map(|b| ds.batch(b))
        .collect()
}

/// Reads `f0,...,fk,label` CSV. All rows land in the training split.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[header.len() - 1] != "label" {
        return Err(Error::Data(format!(
            "{}: header must be f0,...,fk,label",
            path.display()
        )));
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                dim + 1,
                record.len()
            )));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: non-finite value {field:?}")));
            }
            features.push(v);
        }
        let label = record[dim]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("line {line}: bad label {:?}", &record[dim])))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, features, dim, labels)
}

/// Writes `rows` of `ds` (all rows when `None`) in the CSV layout read by
/// [`load_csv`]. Values are printed with shortest round-trip formatting.
pub fn write_csv(ds: &Dataset, rows: Option<&[usize]>, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    writer.write_record(&header)?;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..ds.len()).collect();
            &all
        }
    };
    for &r in rows {
        let mut rec: Vec<String> = ds.row(r).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.labels[r].to_string());
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

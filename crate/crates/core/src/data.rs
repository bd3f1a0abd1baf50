//! Datasets: synthetic GP draws, CSV ingestion, train/test splitting and
//! standardization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, InputSet, KernelParams};
use crate::linalg::{chol_psd, JitterPolicy, Mat, Vector};

/// Expected shape of a benchmark dataset and the auxiliary subset size used
/// with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub aux_k: usize,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry { name: "synthetic", n_train: 1000, n_test: 1000, d: 1, aux_k: 100 },
    RegistryEntry { name: "delays10k", n_train: 8000, n_test: 2000, d: 8, aux_k: 800 },
    RegistryEntry { name: "abalone", n_train: 3177, n_test: 1000, d: 8, aux_k: 300 },
    RegistryEntry { name: "airfoil", n_train: 1103, n_test: 400, d: 5, aux_k: 100 },
    RegistryEntry { name: "ccpp", n_train: 7568, n_test: 2000, d: 4, aux_k: 700 },
    RegistryEntry { name: "wine", n_train: 3898, n_test: 1000, d: 11, aux_k: 300 },
];

pub fn registry_entry(name: &str) -> Option<&'static RegistryEntry> {
    REGISTRY.iter().find(|e| e.name.eq_ignore_ascii_case(name))
}

/// Held-out size: `max(1000, ⌈0.2 N⌉)` capped at `N − 1`.
pub fn protocol_test_size(n_total: usize) -> usize {
    let fifth = (n_total as f64 * 0.2).ceil() as usize;
    fifth.max(1000).min(n_total.saturating_sub(1))
}

/// Per-column affine maps applied to inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = var.sqrt();
    (mean, if scale > 0.0 { scale } else { 1.0 })
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    /// Population mean and standard deviation of each column; constant
    /// columns get scale 1.
    pub fn fit(x: &Mat, y: &Vector) -> Self {
        let (x_mean, x_scale) = (0..x.ncols()).map(|j| mean_and_scale(x.column(j).iter().copied())).unzip();
        let (y_mean, y_scale) = mean_and_scale(y.iter().copied());
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn apply_x(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_scale[j])
    }

    pub fn apply_y(&self, y: &Vector) -> Vector {
        y.map(|v| (v - self.y_mean) / self.y_scale)
    }

    pub fn invert_y(&self, y: &Vector) -> Vector {
        y.map(|v| v * self.y_scale + self.y_mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub x_train: InputSet,
    pub y_train: Vector,
    pub x_test: InputSet,
    pub y_test: Vector,
    pub standardization: Standardization,
    /// Auxiliary subset size prescribed for this dataset, if any.
    pub aux_k: Option<usize>,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.x_train.len()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.len()
    }

    pub fn dim(&self) -> usize {
        self.x_train.dim()
    }

    /// Auxiliary subset size: the prescribed one when known, else
    /// `⌈fraction · N_train⌉`.
    pub fn aux_size(&self, fraction: f64) -> usize {
        self.aux_k
            .unwrap_or_else(|| (fraction * self.n_train() as f64).ceil() as usize)
            .clamp(1, self.n_train())
    }
}

fn rows_of(x: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

/// Splits already-ordered rows (train first) and standardizes with train
/// statistics.
fn split_and_standardize(
    name: &str,
    seed: u64,
    x: &Mat,
    y: &Vector,
    order: &[usize],
    n_test: usize,
    standardize_x: bool,
) -> Result<Dataset> {
    let n_train = order.len() - n_test;
    let (train, test) = order.split_at(n_train);
    let xtr = rows_of(x, train);
    let ytr = Vector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
    let xte = rows_of(x, test);
    let yte = Vector::from_iterator(test.len(), test.iter().map(|&i| y[i]));
    let mut st = Standardization::fit(&xtr, &ytr);
    if !standardize_x {
        st.x_mean = vec![0.0; x.ncols()];
        st.x_scale = vec![1.0; x.ncols()];
    }
    Ok(Dataset {
        name: name.to_string(),
        seed,
        x_train: InputSet::new(st.apply_x(&xtr))?,
        y_train: st.apply_y(&ytr),
        x_test: InputSet::new(st.apply_x(&xte))?,
        y_test: st.apply_y(&yte),
        standardization: st,
        aux_k: registry_entry(name).map(|e| e.aux_k),
    })
}

/// One joint draw of `f(X)` from the zero-mean GP prior per column.
pub fn sample_gp_prior(x: &InputSet, p: &KernelParams, n_samples: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let k = kernel_matrix(x, x, p)?;
    let l = chol_psd(&k, &JitterPolicy::default())?.lower();
    let z = Mat::from_fn(x.len(), n_samples, |_, _| StandardNormal.sample(rng));
    Ok(l * z)
}

/// Raw synthetic sample: inputs uniform on `[−3, 3]^d`, latent `f` from the
/// GP prior, `y = f + N(0, σ²)`.
pub fn synthetic_raw(n: usize, seed: u64, p: &KernelParams) -> Result<(InputSet, Vector, Vector)> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new(-3.0, 3.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let x = InputSet::new(Mat::from_fn(n, p.dim(), |_, _| unif.sample(&mut rng)))?;
    let f = sample_gp_prior(&x, p, 1, &mut rng)?.column(0).into_owned();
    let sd = p.noise_variance.sqrt();
    let y = f.map(|v| v + sd * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    Ok((x, f, y))
}

/// Default generator: unit signal variance, lengthscale 0.5, noise 0.05.
pub fn default_synthetic_params(d: usize) -> KernelParams {
    KernelParams::isotropic(d, 0.5, 1.0, 0.05).expect("valid constants")
}

/// Synthetic dataset split by the held-out protocol. Targets are
/// standardized; inputs stay on `[−3, 3]` so the generating lengthscale
/// remains meaningful.
pub fn generate_synthetic(n_total: usize, seed: u64, gen_params: &KernelParams) -> Result<Dataset> {
    generate_synthetic_split(n_total, protocol_test_size(n_total), seed, gen_params)
}

/// Synthetic dataset with an explicit held-out size.
pub fn generate_synthetic_split(n_total: usize, n_test: usize, seed: u64, gen_params: &KernelParams) -> Result<Dataset> {
    if n_total < 2 || n_test == 0 || n_test >= n_total {
        return Err(Error::InvalidInput(format!(
            "need 1 <= N_test < N_total, got N_test = {n_test} and N_total = {n_total}"
        )));
    }
    let (x, _, y) = synthetic_raw(n_total, seed, gen_params)?;
    let order: Vec<usize> = (0..n_total).collect();
    split_and_standardize("synthetic", seed, x.matrix(), &y, &order, n_test, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    /// Defaults to the last column.
    pub target: Option<ColumnRef>,
    /// Defaults to every column except the target.
    pub features: Option<Vec<ColumnRef>>,
    /// Overrides the registry and the protocol rule.
    pub test_size: Option<usize>,
    pub shuffle: bool,
}

impl DatasetSpec {
    pub fn csv(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            path: path.into(),
            target: None,
            features: None,
            test_size: None,
            shuffle: true,
        }
    }
}

fn resolve(col: &ColumnRef, headers: &[String]) -> Result<usize> {
    match col {
        ColumnRef::Index(i) if *i < headers.len() => Ok(*i),
        ColumnRef::Index(i) => Err(Error::Parse {
            row: 0,
            column: i.to_string(),
            message: format!("column index out of range (file has {} columns)", headers.len()),
        }),
        ColumnRef::Name(n) => headers.iter().position(|h| h.trim() == n).ok_or_else(|| Error::Parse {
            row: 0,
            column: n.clone(),
            message: "column not found in header".into(),
        }),
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "?" | "null")
}

/// Reads a headed CSV, drops rows with missing values, shuffles with `seed`,
/// splits and standardizes with training statistics.
pub fn load_csv(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if !spec.path.exists() {
        return Err(Error::FileNotFound(spec.path.clone()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(&spec.path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::EmptyAfterCleaning);
    }
    let target = match &spec.target {
        Some(c) => resolve(c, &headers)?,
        None => headers.len() - 1,
    };
    let features: Vec<usize> = match &spec.features {
        Some(cols) => cols.iter().map(|c| resolve(c, &headers)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&j| j != target).collect(),
    };
    if features.is_empty() || features.contains(&target) {
        return Err(Error::InvalidInput("feature columns must be non-empty and exclude the target".into()));
    }

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let cols: Vec<usize> = features.iter().copied().chain(std::iter::once(target)).collect();
        if cols.iter().any(|&j| rec.get(j).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        let mut parsed = Vec::with_capacity(cols.len());
        for &j in &cols {
            let raw = rec.get(j).unwrap_or_default().trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("'{raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].clone(),
                    message: format!("'{raw}' is not finite"),
                });
            }
            parsed.push(v);
        }
        ys.push(parsed.pop().expect("target parsed"));
        xs.extend(parsed);
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows with missing values", spec.name);
    }
    let n = ys.len();
    if n < 2 {
        return Err(Error::EmptyAfterCleaning);
    }
    let d = features.len();
    let x = Mat::from_row_slice(n, d, &xs);
    let y = Vector::from_vec(ys);

    let entry = registry_entry(&spec.name);
    let n_test = match (spec.test_size, entry) {
        (Some(t), _) => t,
        (None, Some(e)) if e.n_test < n => e.n_test,
        _ => protocol_test_size(n),
    };
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidInput(format!("test size {n_test} invalid for {n} rows")));
    }
    if let Some(e) = entry {
        if (e.n_train, e.n_test, e.d) != (n - n_test, n_test, d) {
            log::warn!(
                "{}: loaded (N_train, N_test, d) = ({}, {}, {}), expected ({}, {}, {})",
                spec.name,
                n - n_test,
                n_test,
                d,
                e.n_train,
                e.n_test,
                e.d
            );
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    if spec.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    split_and_standardize(&spec.name, seed, &x, &y, &order, n_test, true)
}

/// `⌈fraction · N_train⌉` distinct training indices, sorted.
pub fn draw_aux_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let k = ((fraction * dataset.n_train() as f64).ceil() as usize).clamp(1, dataset.n_train());
    draw_indices(dataset.n_train(), k, seed)
}

/// `k` distinct indices below `n`, sorted; deterministic per seed.
pub fn draw_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("cannot draw {k} of {n} indices")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Resolves a dataset path relative to a config file location.
pub fn resolve_relative(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

//! Squared-exponential ARD kernel and cross-covariance assembly.
//!
//! The RKHS kernel used by the divergence bounds is the model kernel itself,
//! so there is exactly one kernel object in play everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// A covariance function over `R^d`.
pub trait Kernel {
    fn dim(&self) -> usize;

    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    /// `k(a, a)`.
    fn diag_value(&self, a: &[f64]) -> f64;

    /// Gradient of `k(a, b)` with respect to `a`, written into `out`.
    fn grad_first(&self, a: &[f64], b: &[f64], out: &mut [f64]);
}

/// SE-ARD hyperparameters plus the observation noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let p = Self {
            lengthscales,
            signal_variance,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit lengthscales and signal variance in `d` dimensions.
    pub fn isotropic(d: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        Self::new(vec![lengthscale; d], signal_variance, noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidInput("kernel needs at least one lengthscale".into()));
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(Error::InvalidInput(format!(
                "lengthscales must be positive and finite: {:?}",
                self.lengthscales
            )));
        }
        if !ok(self.signal_variance) {
            return Err(Error::InvalidInput(format!(
                "signal variance must be positive: {}",
                self.signal_variance
            )));
        }
        if !ok(self.noise_variance) {
            return Err(Error::InvalidInput(format!(
                "noise variance must be positive: {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `(log ℓ_1, …, log ℓ_d, log signal_variance, log σ²)`.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::DimensionMismatch(format!(
                "log-parameter vector needs at least 3 entries, got {}",
                v.len()
            )));
        }
        let d = v.len() - 2;
        Self::new(v[..d].iter().map(|x| x.exp()).collect(), v[d].exp(), v[d + 1].exp())
    }
}

impl Kernel for KernelParams {
    fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let t = (x - y) / l;
                t * t
            })
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }

    fn diag_value(&self, _a: &[f64]) -> f64 {
        self.signal_variance
    }

    fn grad_first(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let k = self.eval(a, b);
        for ((o, (x, y)), l) in out.iter_mut().zip(a.iter().zip(b)).zip(&self.lengthscales) {
            *o = -k * (x - y) / (l * l);
        }
    }
}

/// `N × d` matrix of covariates, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    points: Mat,
}

impl InputSet {
    pub fn new(points: Mat) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "input set must be non-empty, got {}x{}",
                points.nrows(),
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("input set contains NaN or Inf".into()));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("ragged input rows".into()));
        }
        Self::new(Mat::from_fn(n, d, |i, j| rows[i][j]))
    }

    /// One-dimensional inputs.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(Mat::from_column_slice(xs.len(), 1, xs))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn matrix(&self) -> &Mat {
        &self.points
    }

    pub fn into_matrix(self) -> Mat {
        self.points
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        Self::new(self.points.select_rows(indices))
    }

    /// Row-wise concatenation.
    pub fn stack(&self, other: &InputSet) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot stack inputs of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let (n, m, d) = (self.len(), other.len(), self.dim());
        Self::new(Mat::from_fn(n + m, d, |i, j| {
            if i < n {
                self.points[(i, j)]
            } else {
                other.points[(i - n, j)]
            }
        }))
    }

    /// Row-major copy with each coordinate divided by its lengthscale.
    pub(crate) fn scaled_rows(&self, lengthscales: &[f64]) -> Vec<f64> {
        let (n, d) = (self.len(), self.dim());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                out[i * d + k] = self.points[(i, k)] / lengthscales[k];
            }
        }
        out
    }
}

fn check_dims(a: &InputSet, b: &InputSet, p: &KernelParams) -> Result<()> {
    if a.dim() != p.dim() || b.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dimensions {} and {} but the kernel has {} lengthscales",
            a.dim(),
            b.dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// `[K]_{ij} = k(a_i, b_j)`; symmetrized when `a` and `b` hold the same points.
pub fn kernel_matrix(a: &InputSet, b: &InputSet, p: &KernelParams) -> Result<Mat> {
    check_dims(a, b, p)?;
    let d = p.dim();
    let sa = a.scaled_rows(&p.lengthscales);
    let sb = b.scaled_rows(&p.lengthscales);
    let (n, m) = (a.len(), b.len());
    let mut out = Mat::zeros(n, m);
    for j in 0..m {
        let bj = &sb[j * d..(j + 1) * d];
        for i in 0..n {
            let ai = &sa[i * d..(i + 1) * d];
            let r2: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            out[(i, j)] = p.signal_variance * (-0.5 * r2).exp();
        }
    }
    if std::ptr::eq(a, b) || a == b {
        out = crate::linalg::symmetrize(&out);
    }
    Ok(out)
}

/// `k(x_i, x_i)` for every row.
pub fn kernel_diag(a: &InputSet, p: &KernelParams) -> Result<Vector> {
    check_dims(a, a, p)?;
    Ok(Vector::from_fn(a.len(), |i, _| p.diag_value(&a.row(i))))
}

/// Chain rule through `K = kernel_matrix(fixed, moving)`:
/// `out[j, k] += Σ_i adj[i, j] · ∂K[i, j]/∂moving[j, k]`.
pub(crate) fn accumulate_grad_wrt_columns(
    fixed: &InputSet,
    moving: &InputSet,
    kmat: &Mat,
    adj: &Mat,
    p: &KernelParams,
    out: &mut Mat,
) {
    let d = p.dim();
    let inv_l2: Vec<f64> = p.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let f = fixed.matrix();
    let mv = moving.matrix();
    for j in 0..moving.len() {
        for k in 0..d {
            let xj = mv[(j, k)];
            let mut acc = 0.0;
            for i in 0..fixed.len() {
                acc += adj[(i, j)] * kmat[(i, j)] * (f[(i, k)] - xj);
            }
            out[(j, k)] += acc * inv_l2[k];
        }
    }
}

/// Chain rule through the symmetric `K = kernel_matrix(moving, moving)`.
pub(crate) fn accumulate_grad_wrt_self(moving: &InputSet, kmat: &Mat, adj: &Mat, p: &KernelParams, out: &mut Mat) {
    let d = p.dim();
    let m = moving.len();
    let x = moving.matrix();
    for i in 0..m {
        for k in 0..d {
            let xi = x[(i, k)];
            let mut acc = 0.0;
            for j in 0..m {
                if i != j {
                    acc += (adj[(i, j)] + adj[(j, i)]) * kmat[(i, j)] * (x[(j, k)] - xi);
                }
            }
            out[(i, k)] += acc / (p.lengthscales[k] * p.lengthscales[k]);
        }
    }
}

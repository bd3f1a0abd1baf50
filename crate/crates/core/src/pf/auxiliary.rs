//! Auxiliary Gaussian processes `ν = GP(μ̂, K̂)` under which the pF
//! expectation is taken.
//!
//! Both kinds share one representation:
//! `K̂(a, b) = c·k(a, b) + sign·k(a, X̂) F⁻¹ k(X̂, b)` and `μ̂(x) = k(x, X̂) w`.
//!
//! * subset of data: `c = 1`, `sign = −1`, `F = k(X̂, X̂) + σ²I`, `w = F⁻¹ŷ`;
//! * SoR on a subset: `c = 0`, `sign = +1`, `F = k(X̂, X̂) + σ⁻²k(X̂, X)k(X, X̂)`,
//!   `w = σ⁻² F⁻¹ k(X̂, X) y`.
//!
//! The subset kind needs products with the full `k(X, X)`, which is `O(N²)`
//! and therefore only allowed below a configurable validation cap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, InputSet, KernelParams};
use crate::linalg::{chol_psd, symmetrize, CholFactor, JitterPolicy, Mat, Vector};

/// Largest `N` for which `O(N²)` validation paths run by default.
pub const DEFAULT_VALIDATION_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxKind {
    SubsetOfData,
    SorLowRank,
}

impl std::fmt::Display for AuxKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxKind::SubsetOfData => "subset",
            AuxKind::SorLowRank => "sor",
        })
    }
}

impl std::str::FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subset" | "subset-of-data" => Ok(AuxKind::SubsetOfData),
            "sor" | "sor-low-rank" => Ok(AuxKind::SorLowRank),
            other => Err(Error::Config(format!("unknown auxiliary kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuxiliaryDistribution {
    pub(crate) kind: AuxKind,
    pub(crate) x: InputSet,
    pub(crate) aux_points: InputSet,
    pub(crate) indices: Vec<usize>,
    pub(crate) aux_targets: Vector,
    pub(crate) params: KernelParams,
    /// `k(X, X̂)`.
    pub(crate) k_xa: Mat,
    pub(crate) f_chol: CholFactor,
    pub(crate) w: Vector,
    pub(crate) mu_x: Vector,
    pub(crate) validation_cap: usize,
}

fn checked_subset(x: &InputSet, y: &Vector, indices: &[usize]) -> Result<(InputSet, Vector)> {
    if y.len() != x.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if indices.is_empty() {
        return Err(Error::InvalidInput("auxiliary subset must be non-empty".into()));
    }
    let mut seen = vec![false; x.len()];
    for &i in indices {
        if i >= x.len() {
            return Err(Error::IndexOutOfRange { index: i, len: x.len() });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidInput(format!("auxiliary index {i} repeated")));
        }
    }
    let ys = Vector::from_iterator(indices.len(), indices.iter().map(|&i| y[i]));
    Ok((x.select(indices)?, ys))
}

/// Subset-of-data auxiliary with the default validation cap.
pub fn build_aux_subset(x: &InputSet, y: &Vector, indices: &[usize], p: &KernelParams) -> Result<AuxiliaryDistribution> {
    build_aux_subset_capped(x, y, indices, p, DEFAULT_VALIDATION_CAP)
}

pub fn build_aux_subset_capped(
    x: &InputSet,
    y: &Vector,
    indices: &[usize],
    p: &KernelParams,
    cap: usize,
) -> Result<AuxiliaryDistribution> {
    if x.len() > cap {
        return Err(Error::ValidationModeRequired { n: x.len(), cap });
    }
    let (xa, ya) = checked_subset(x, y, indices)?;
    let mut f = kernel_matrix(&xa, &xa, p)?;
    for i in 0..f.nrows() {
        f[(i, i)] += p.noise_variance;
    }
    let f_chol = chol_psd(&f, &JitterPolicy::default())?;
    let w = f_chol.solve_vec(&ya);
    let k_xa = kernel_matrix(x, &xa, p)?;
    let mu_x = &k_xa * &w;
    Ok(AuxiliaryDistribution {
        kind: AuxKind::SubsetOfData,
        x: x.clone(),
        aux_points: xa,
        indices: indices.to_vec(),
        aux_targets: ya,
        params: p.clone(),
        k_xa,
        f_chol,
        w,
        mu_x,
        validation_cap: cap,
    })
}

/// SoR auxiliary whose inducing inputs are the data subset `X̂`.
pub fn build_aux_sor(x: &InputSet, y: &Vector, indices: &[usize], p: &KernelParams) -> Result<AuxiliaryDistribution> {
    let (xa, ya) = checked_subset(x, y, indices)?;
    let s = 1.0 / p.noise_variance;
    let k_xa = kernel_matrix(x, &xa, p)?;
    let f = kernel_matrix(&xa, &xa, p)? + (k_xa.transpose() * &k_xa) * s;
    let f_chol = chol_psd(&symmetrize(&f), &JitterPolicy::default())?;
    let w = f_chol.solve_vec(&(k_xa.transpose() * y)) * s;
    let mu_x = &k_xa * &w;
    Ok(AuxiliaryDistribution {
        kind: AuxKind::SorLowRank,
        x: x.clone(),
        aux_points: xa,
        indices: indices.to_vec(),
        aux_targets: ya,
        params: p.clone(),
        k_xa,
        f_chol,
        w,
        mu_x,
        validation_cap: DEFAULT_VALIDATION_CAP,
    })
}

pub fn build_aux(
    kind: AuxKind,
    x: &InputSet,
    y: &Vector,
    indices: &[usize],
    p: &KernelParams,
    cap: usize,
) -> Result<AuxiliaryDistribution> {
    match kind {
        AuxKind::SubsetOfData => build_aux_subset_capped(x, y, indices, p, cap),
        AuxKind::SorLowRank => build_aux_sor(x, y, indices, p).map(|a| a.with_validation_cap(cap)),
    }
}

impl AuxiliaryDistribution {
    pub fn with_validation_cap(mut self, cap: usize) -> Self {
        self.validation_cap = cap;
        self
    }

    pub fn kind(&self) -> AuxKind {
        self.kind
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn aux_points(&self) -> &InputSet {
        &self.aux_points
    }

    pub fn aux_targets(&self) -> &Vector {
        &self.aux_targets
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn validation_cap(&self) -> usize {
        self.validation_cap
    }

    /// `μ̂(X)` on the training inputs.
    pub fn mu_x(&self) -> &Vector {
        &self.mu_x
    }

    pub(crate) fn scale(&self) -> f64 {
        match self.kind {
            AuxKind::SubsetOfData => 1.0,
            AuxKind::SorLowRank => 0.0,
        }
    }

    pub(crate) fn sign(&self) -> f64 {
        match self.kind {
            AuxKind::SubsetOfData => -1.0,
            AuxKind::SorLowRank => 1.0,
        }
    }

    pub fn mu_at(&self, xq: &InputSet) -> Result<Vector> {
        Ok(kernel_matrix(xq, &self.aux_points, &self.params)? * &self.w)
    }

    /// `K̂(a, b)` for arbitrary point sets; dense in `|a|·|b|`.
    pub fn cross(&self, a: &InputSet, b: &InputSet) -> Result<Mat> {
        let ka = kernel_matrix(a, &self.aux_points, &self.params)?;
        let kb = kernel_matrix(&self.aux_points, b, &self.params)?;
        let mut out = ka * self.f_chol.solve_mat(&kb) * self.sign();
        if self.kind == AuxKind::SubsetOfData {
            out += kernel_matrix(a, b, &self.params)?;
        }
        Ok(out)
    }

    /// `K̂(X, X) V`. The SoR kind costs `O(N M' cols)`; the subset kind streams
    /// rows of `k(X, X)` and is gated by the validation cap.
    pub fn k_hat_times(&self, v: &Mat) -> Result<Mat> {
        let n = self.x.len();
        if v.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "K̂ is {n}x{n} but the operand has {} rows",
                v.nrows()
            )));
        }
        let mut out = &self.k_xa * self.f_chol.solve_mat(&(self.k_xa.transpose() * v)) * self.sign();
        if self.kind == AuxKind::SubsetOfData {
            if n > self.validation_cap {
                return Err(Error::ValidationModeRequired {
                    n,
                    cap: self.validation_cap,
                });
            }
            out += streamed_gram_times(&self.x, &self.params, v);
        }
        Ok(out)
    }

    /// Dense `K̂(X, X)`; validation only.
    pub fn dense_k_hat(&self) -> Result<Mat> {
        let n = self.x.len();
        if n > self.validation_cap {
            return Err(Error::ValidationModeRequired {
                n,
                cap: self.validation_cap,
            });
        }
        let mut out = &self.k_xa * self.f_chol.solve_mat(&self.k_xa.transpose()) * self.sign();
        if self.kind == AuxKind::SubsetOfData {
            out += kernel_matrix(&self.x, &self.x, &self.params)?;
        }
        Ok(symmetrize(&out))
    }
}

/// `k(X, X) V` one row of the Gram matrix at a time.
fn streamed_gram_times(x: &InputSet, p: &KernelParams, v: &Mat) -> Mat {
    let (n, d, cols) = (x.len(), x.dim(), v.ncols());
    let scaled = x.scaled_rows(&p.lengthscales);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &scaled[i * d..(i + 1) * d];
            let mut acc = vec![0.0; cols];
            for j in 0..n {
                let xj = &scaled[j * d..(j + 1) * d];
                let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                let kij = p.signal_variance * (-0.5 * r2).exp();
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kij * v[(j, c)];
                }
            }
            acc
        })
        .collect();
    Mat::from_fn(n, cols, |i, c| rows[i][c])
}

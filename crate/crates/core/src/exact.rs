//! Exact GP regression with a zero prior mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_diag, kernel_matrix, InputSet, KernelParams};
use crate::linalg::{chol_psd, symmetrize, CholFactor, JitterPolicy, Mat, Vector};

/// Largest training set the exact solver accepts by default.
pub const DEFAULT_MAX_EXACT_N: usize = 20_000;

/// Mean vector and covariance matrix of a Gaussian over a finite set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vector,
    pub cov: Mat,
}

impl GaussianPosterior {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Pointwise variances, clamped at zero.
    pub fn variances(&self) -> Vector {
        self.cov.diagonal().map(|v| v.max(0.0))
    }

    pub fn std_devs(&self) -> Vector {
        self.variances().map(f64::sqrt)
    }
}

/// Factorized exact posterior: `alpha = (K + σ²I)^{-1} y`.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub train_inputs: InputSet,
    pub alpha: Vector,
    pub chol: CholFactor,
    pub params: KernelParams,
}

fn check_targets(x: &InputSet, y: &Vector) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} targets",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn noisy_gram(x: &InputSet, p: &KernelParams) -> Result<Mat> {
    let mut k = kernel_matrix(x, x, p)?;
    for i in 0..k.nrows() {
        k[(i, i)] += p.noise_variance;
    }
    Ok(k)
}

pub fn fit_exact(x: &InputSet, y: &Vector, p: &KernelParams) -> Result<ExactPosterior> {
    fit_exact_capped(x, y, p, DEFAULT_MAX_EXACT_N)
}

pub fn fit_exact_capped(x: &InputSet, y: &Vector, p: &KernelParams, max_n: usize) -> Result<ExactPosterior> {
    check_targets(x, y)?;
    if x.len() > max_n {
        return Err(Error::InvalidInput(format!(
            "exact GP limited to N <= {max_n}, got {}",
            x.len()
        )));
    }
    let chol = chol_psd(&noisy_gram(x, p)?, &JitterPolicy::default())?;
    let alpha = chol.solve_vec(y);
    Ok(ExactPosterior {
        train_inputs: x.clone(),
        alpha,
        chol,
        params: p.clone(),
    })
}

pub fn predict_exact(post: &ExactPosterior, xstar: &InputSet) -> Result<GaussianPosterior> {
    let p = &post.params;
    let ks = kernel_matrix(&post.train_inputs, xstar, p)?;
    let mean = ks.transpose() * &post.alpha;
    let v = post.chol.solve_lower(&ks);
    let cov = kernel_matrix(xstar, xstar, p)? - v.transpose() * &v;
    Ok(GaussianPosterior {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Posterior variances only, without forming the test covariance.
pub fn predict_exact_diag(post: &ExactPosterior, xstar: &InputSet) -> Result<(Vector, Vector)> {
    let p = &post.params;
    let ks = kernel_matrix(&post.train_inputs, xstar, p)?;
    let mean = ks.transpose() * &post.alpha;
    let v = post.chol.solve_lower(&ks);
    let prior = kernel_diag(xstar, p)?;
    let var = Vector::from_fn(xstar.len(), |j, _| prior[j] - v.column(j).norm_squared());
    Ok((mean, var))
}

/// `log N(y | 0, K + σ²I)`.
pub fn log_marginal_likelihood(x: &InputSet, y: &Vector, p: &KernelParams) -> Result<f64> {
    let post = fit_exact(x, y, p)?;
    Ok(log_marginal_from(&post, y))
}

pub(crate) fn log_marginal_from(post: &ExactPosterior, y: &Vector) -> f64 {
    let n = y.len() as f64;
    -0.5 * y.dot(&post.alpha) - 0.5 * post.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

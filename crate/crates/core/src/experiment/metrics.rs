//! Error metrics of an approximate posterior against the exact one.

use serde::{Deserialize, Serialize};

use crate::divergences::{kl_gaussian, GaussianNd};
use crate::error::{Error, Result};
use crate::exact::GaussianPosterior;
use crate::linalg::{symmetrize, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub pred_rmse: f64,
    pub kl_to_exact: f64,
}

/// Relative diagonal loadings tried, in order, before declaring a test
/// covariance singular. The same loading is applied to both Gaussians.
const KL_JITTER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

fn rms(v: &Vector) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.norm_squared() / v.len() as f64).sqrt()
}

fn loaded(g: &GaussianPosterior, jitter: f64) -> Result<GaussianNd> {
    let n = g.len();
    GaussianNd::new(g.mean.clone(), symmetrize(&g.cov) + Mat::identity(n, n) * jitter)
}

/// `KL(approx ‖ exact)` with the smallest common diagonal loading under
/// which both covariances factor.
pub fn kl_to_exact(approx: &GaussianPosterior, exact: &GaussianPosterior) -> Result<f64> {
    if approx.len() != exact.len() {
        return Err(Error::DimensionMismatch(format!(
            "approximation over {} points, exact over {}",
            approx.len(),
            exact.len()
        )));
    }
    let n = exact.len();
    if n == 0 {
        return Ok(0.0);
    }
    let scale = exact.cov.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    for rel in KL_JITTER {
        let j = rel * scale;
        if let (Ok(a), Ok(b)) = (loaded(approx, j), loaded(exact, j)) {
            return Ok(kl_gaussian(&a, &b)?.max(0.0));
        }
    }
    Err(Error::SingularCovariance)
}

/// RMSE of means, of standard deviations and of means against held-out
/// targets, given pointwise moments.
pub fn pointwise_rmse(
    approx_mean: &Vector,
    approx_var: &Vector,
    exact_mean: &Vector,
    exact_var: &Vector,
    y_test: &Vector,
) -> Result<(f64, f64, f64)> {
    let n = exact_mean.len();
    if [approx_mean.len(), approx_var.len(), exact_var.len(), y_test.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::DimensionMismatch(format!(
            "metric inputs disagree in length: {} {} {} {} {}",
            approx_mean.len(),
            approx_var.len(),
            n,
            exact_var.len(),
            y_test.len()
        )));
    }
    let sd = |v: &Vector| v.map(|x| x.max(0.0).sqrt());
    Ok((
        rms(&(approx_mean - exact_mean)),
        rms(&(sd(approx_var) - sd(exact_var))),
        rms(&(approx_mean - y_test)),
    ))
}

/// Metrics on the joint Gaussian over the same test locations.
pub fn compute_metrics(approx: &GaussianPosterior, exact: &GaussianPosterior, y_test: &Vector) -> Result<Metrics> {
    let (mean_rmse, std_rmse, pred_rmse) = pointwise_rmse(
        &approx.mean,
        &approx.cov.diagonal(),
        &exact.mean,
        &exact.cov.diagonal(),
        y_test,
    )?;
    Ok(Metrics {
        mean_rmse,
        std_rmse,
        pred_rmse,
        kl_to_exact: kl_to_exact(approx, exact)?,
    })
}

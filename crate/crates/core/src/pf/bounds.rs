//! Turning a pF value into pointwise guarantees on the posterior mean and
//! variance, and a Monte-Carlo estimate of the divergence taken under the
//! exact posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::auxiliary::{AuxKind, AuxiliaryDistribution};
use crate::error::{Error, Result};
use crate::exact::{fit_exact, log_marginal_likelihood, predict_exact};
use crate::kernel::{kernel_matrix, InputSet, KernelParams};
use crate::linalg::{chol_psd, JitterPolicy, Vector};
use crate::sparse::{build_nystrom, InducingSet};

fn require_subset(aux: &AuxiliaryDistribution) -> Result<()> {
    if aux.kind != AuxKind::SubsetOfData {
        return Err(Error::AuxKindUnsupported);
    }
    Ok(())
}

/// Log of the bound on `sup dπ/dν` for a subset-of-data auxiliary:
/// `log Z_D̂ − ((N − M')/2) log(2πσ²) − log Z_D`. Always `≥ 0` up to round-off.
pub fn log_density_ratio_bound(x: &InputSet, y: &Vector, aux: &AuxiliaryDistribution, p: &KernelParams) -> Result<f64> {
    require_subset(aux)?;
    subset_log_ratio(x, y, aux, p)
}

fn subset_log_ratio(x: &InputSet, y: &Vector, aux: &AuxiliaryDistribution, p: &KernelParams) -> Result<f64> {
    let n = x.len() as f64;
    let m = aux.indices.len() as f64;
    let log_z_hat = log_marginal_likelihood(&aux.aux_points, &aux.aux_targets, p)?;
    let log_z = log_marginal_likelihood(x, y, p)?;
    let two_pi_s2 = 2.0 * std::f64::consts::PI * p.noise_variance;
    Ok(log_z_hat - 0.5 * (n - m) * two_pi_s2.ln() - log_z)
}

fn check_pf(pf_value: f64) -> Result<()> {
    if pf_value < 0.0 || !pf_value.is_finite() {
        return Err(Error::NegativeEps(pf_value));
    }
    Ok(())
}

/// `ε = sqrt(sup dπ/dν) · pF`, with `pf_value` the unscaled divergence.
pub fn eps_bound(x: &InputSet, y: &Vector, aux: &AuxiliaryDistribution, p: &KernelParams, pf_value: f64) -> Result<f64> {
    check_pf(pf_value)?;
    let log_ratio = log_density_ratio_bound(x, y, aux, p)?;
    Ok((0.5 * log_ratio).exp() * pf_value)
}

/// `ε` for either auxiliary kind, borrowing the subset-of-data ratio bound
/// of the same auxiliary points. The flag is `true` only for the subset
/// kind; with the SoR kind the value is a heuristic, not a guarantee.
pub fn eps_bound_any_aux(
    x: &InputSet,
    y: &Vector,
    aux: &AuxiliaryDistribution,
    p: &KernelParams,
    pf_value: f64,
) -> Result<(f64, bool)> {
    check_pf(pf_value)?;
    let log_ratio = subset_log_ratio(x, y, aux, p)?;
    Ok(((0.5 * log_ratio).exp() * pf_value, aux.kind == AuxKind::SubsetOfData))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseBounds {
    pub mean_bound: Vector,
    pub std_bound: Vector,
    pub var_bound: Vector,
}

/// Bounds on `|μ̃ − μ|`, `|√k̃ − √k|` and `|k̃ − k|` at each test point, given
/// prior variances `k(x, x)` and `k̲(x, x) = min(k̃(x, x), k_exact(x, x))`.
pub fn pointwise_bounds(eps: f64, k_diag: &Vector, k_under: &Vector) -> Result<PointwiseBounds> {
    if eps < 0.0 || eps.is_nan() {
        return Err(Error::NegativeEps(eps));
    }
    if k_diag.len() != k_under.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} prior variances but {} lower variances",
            k_diag.len(),
            k_under.len()
        )));
    }
    let root = k_diag.map(|v| v.max(0.0).sqrt());
    let mean_bound = &root * eps;
    let std_bound = &root * (6f64.sqrt() * eps);
    let var_bound = Vector::from_fn(k_diag.len(), |i, _| {
        3.0 * root[i] * k_under[i].max(0.0).sqrt() * eps + 6.0 * k_diag[i].max(0.0) * eps * eps
    });
    Ok(PointwiseBounds {
        mean_bound,
        std_bound,
        var_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEstimate {
    /// `σ⁴`-scaled squared divergence, comparable with the dense full value.
    pub value: f64,
    pub std_error: f64,
    pub effective_sample_size: f64,
}

/// Self-normalized importance-sampling estimate of the divergence taken under
/// the exact posterior, using the (subset-of-data) auxiliary restricted to
/// `X ∪ X̃` as proposal.
///
/// For a draw `f` the integrand is `cᵀ k(Z, Z) c` with
/// `c_X = f_X − y` and `c_X̃ = −Q̄ᵀ(f_X − y) + Σ̃ Uᵀ(f_X − Q̄ f_X̃)`.
/// Inducing inputs that coincide with training inputs share their function
/// value, so `X̃ = X` gives exactly zero.
pub fn eps_importance_estimate(
    x: &InputSet,
    y: &Vector,
    xt: &InducingSet,
    aux: &AuxiliaryDistribution,
    p: &KernelParams,
    n_samples: usize,
    seed: u64,
) -> Result<ImportanceEstimate> {
    require_subset(aux)?;
    let n = x.len();
    if n > aux.validation_cap {
        return Err(Error::ValidationModeRequired {
            n,
            cap: aux.validation_cap,
        });
    }
    if n_samples < 2 {
        return Err(Error::InvalidInput("importance sampling needs at least 2 samples".into()));
    }

    // Union of training and inducing inputs without duplicates.
    let xm = x.matrix();
    let tm = xt.inputs().matrix();
    let mut extra = Vec::new();
    let mut map = Vec::with_capacity(xt.len());
    for j in 0..xt.len() {
        let hit = (0..n).find(|&i| (xm.row(i) - tm.row(j)).norm() < 1e-12);
        map.push(match hit {
            Some(i) => i,
            None => {
                extra.push(j);
                n + extra.len() - 1
            }
        });
    }
    let z = if extra.is_empty() {
        x.clone()
    } else {
        x.stack(&xt.inputs().select(&extra)?)?
    };
    let nz = z.len();

    let exact = predict_exact(&fit_exact(x, y, p)?, &z)?;
    let eta_chol = chol_psd(&exact.cov, &JitterPolicy::default())?;
    let nu_mean = aux.mu_at(&z)?;
    let nu_chol = chol_psd(&crate::linalg::symmetrize(&aux.cross(&z, &z)?), &JitterPolicy::default())?;
    let nu_l = nu_chol.lower();
    let log_det_gap = 0.5 * (nu_chol.log_det() - eta_chol.log_det());

    let k_zz = kernel_matrix(&z, &z, p)?;
    let cache = build_nystrom(x, xt, p)?;
    let qbar = &cache.qbar;
    let st_ut = cache.sigma_tilde_dense() * cache.k_xm.transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_w = Vec::with_capacity(n_samples);
    let mut h = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let eps = Vector::from_fn(nz, |_, _| StandardNormal.sample(&mut rng));
        let f = &nu_mean + &nu_l * &eps;
        let r = eta_chol.solve_lower_vec(&(&f - &exact.mean));
        log_w.push(0.5 * eps.norm_squared() - 0.5 * r.norm_squared() + log_det_gap);

        let fx = f.rows(0, n).into_owned();
        let ft = Vector::from_iterator(map.len(), map.iter().map(|&i| f[i]));
        let a = &fx - y;
        let b = &fx - qbar * &ft;
        let ct = -(qbar.transpose() * &a) + &st_ut * &b;
        let mut c = Vector::zeros(nz);
        c.rows_mut(0, n).copy_from(&a);
        for (j, &i) in map.iter().enumerate() {
            c[i] += ct[j];
        }
        h.push(c.dot(&(&k_zz * &c)));
    }

    let max_lw = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max_lw).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let value = w.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>() / sw;
    let var = w.iter().zip(&h).map(|(wi, hi)| wi * wi * (hi - value).powi(2)).sum::<f64>() / (sw * sw);
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(ImportanceEstimate {
        value,
        std_error: var.sqrt(),
        effective_sample_size: sw * sw / sw2,
    })
}

//! Inducing-point machinery: Nyström factors, DTC and SoR predictions, the
//! subsample baseline and the VFE evidence lower bound.
//!
//! Notation used throughout: `U = k(X, X̃)` (N×M), `W = k(X̃, X̃)` (M×M, with
//! whatever jitter its factorization needed), `s = 1/σ²` and
//! `A = W + s·UᵀU`, so that `Σ̃ = A⁻¹`. Nothing here forms an N×N matrix.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{fit_exact, predict_exact, predict_exact_diag, GaussianPosterior};
use crate::kernel::{accumulate_grad_wrt_columns, accumulate_grad_wrt_self, kernel_matrix, InputSet, KernelParams};
use crate::linalg::{chol_psd, symmetrize, trace_of_product, CholFactor, JitterPolicy, Mat, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inducing inputs `X̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    points: InputSet,
}

impl InducingSet {
    /// Rejects rows closer than `1e-8` to one another.
    pub fn new(points: InputSet) -> Result<Self> {
        let x = points.matrix();
        for i in 0..points.len() {
            for j in 0..i {
                let dist = (x.row(i) - x.row(j)).norm();
                if dist < 1e-8 {
                    return Err(Error::InvalidInput(format!(
                        "inducing points {j} and {i} coincide (distance {dist:.2e})"
                    )));
                }
            }
        }
        Ok(Self { points })
    }

    /// Skips the duplicate check. Optimizers use this since iterates may
    /// collide transiently; the jitter ladder keeps the algebra finite.
    pub fn new_unchecked(points: InputSet) -> Self {
        Self { points }
    }

    pub fn inputs(&self) -> &InputSet {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }
}

/// Everything the sparse methods need about `(X, X̃, θ)`.
#[derive(Debug, Clone)]
pub struct NystromCache {
    pub x: InputSet,
    pub inducing: InducingSet,
    pub params: KernelParams,
    /// `U = k(X, X̃)`.
    pub k_xm: Mat,
    /// `W = k(X̃, X̃)` without jitter; diagonal jitter lives in `chol_mm`.
    pub k_mm: Mat,
    pub chol_mm: CholFactor,
    /// `Q̄ = U W⁻¹`.
    pub qbar: Mat,
    /// `UᵀU`.
    pub utu: Mat,
    /// Factor of `A = W + UᵀU/σ²`, i.e. of `Σ̃⁻¹`.
    pub sigma_tilde: CholFactor,
}

impl NystromCache {
    pub fn n(&self) -> usize {
        self.k_xm.nrows()
    }

    pub fn m(&self) -> usize {
        self.k_xm.ncols()
    }

    pub fn inv_noise(&self) -> f64 {
        1.0 / self.params.noise_variance
    }

    /// `W` with the jitter that was actually factorized.
    pub fn k_mm_jittered(&self) -> Mat {
        let mut w = self.k_mm.clone();
        for i in 0..w.nrows() {
            w[(i, i)] += self.chol_mm.jitter_used();
        }
        w
    }

    /// `Σ̃ = A⁻¹` as a dense M×M matrix.
    pub fn sigma_tilde_dense(&self) -> Mat {
        self.sigma_tilde.inverse()
    }
}

pub fn build_nystrom(x: &InputSet, xt: &InducingSet, p: &KernelParams) -> Result<NystromCache> {
    if xt.is_empty() {
        return Err(Error::InvalidInput("at least one inducing point is required".into()));
    }
    if xt.len() > x.len() {
        log::warn!("{} inducing points exceed the {} training points", xt.len(), x.len());
    }
    let k_xm = kernel_matrix(x, xt.inputs(), p)?;
    let k_mm = kernel_matrix(xt.inputs(), xt.inputs(), p)?;
    let chol_mm = chol_psd(&k_mm, &JitterPolicy::default())?;
    let qbar = chol_mm.solve_mat(&k_xm.transpose()).transpose();
    let utu = symmetrize(&(k_xm.transpose() * &k_xm));
    let s = 1.0 / p.noise_variance;
    let mut a = &utu * s + &k_mm;
    for i in 0..a.nrows() {
        a[(i, i)] += chol_mm.jitter_used();
    }
    let sigma_tilde = chol_psd(&symmetrize(&a), &JitterPolicy::default())?;
    Ok(NystromCache {
        x: x.clone(),
        inducing: xt.clone(),
        params: p.clone(),
        k_xm,
        k_mm,
        chol_mm,
        qbar,
        utu,
        sigma_tilde,
    })
}

fn check_targets(cache: &NystromCache, y: &Vector) -> Result<()> {
    if y.len() != cache.n() {
        return Err(Error::DimensionMismatch(format!(
            "cache built on {} points but {} targets given",
            cache.n(),
            y.len()
        )));
    }
    Ok(())
}

/// `β = Σ̃ Uᵀ y`, shared by the DTC/SoR mean and the ELBO.
fn weights(cache: &NystromCache, y: &Vector) -> Vector {
    cache.sigma_tilde.solve_vec(&(cache.k_xm.transpose() * y))
}

struct SparseParts {
    mean: Vector,
    /// `L_W⁻¹ k(X̃, X*)`.
    vw: Mat,
    /// `L_A⁻¹ k(X̃, X*)`.
    va: Mat,
}

fn sparse_parts(cache: &NystromCache, y: &Vector, xstar: &InputSet) -> Result<SparseParts> {
    check_targets(cache, y)?;
    let kms = kernel_matrix(cache.inducing.inputs(), xstar, &cache.params)?;
    let mean = kms.transpose() * weights(cache, y) * cache.inv_noise();
    Ok(SparseParts {
        mean,
        vw: cache.chol_mm.solve_lower(&kms),
        va: cache.sigma_tilde.solve_lower(&kms),
    })
}

/// DTC predictive: mean `σ⁻² k_*M Σ̃ Uᵀy`, covariance `k − Q + k_*M Σ̃ k_M*`.
pub fn dtc_predict(cache: &NystromCache, y: &Vector, xstar: &InputSet) -> Result<GaussianPosterior> {
    let parts = sparse_parts(cache, y, xstar)?;
    let prior = kernel_matrix(xstar, xstar, &cache.params)?;
    let cov = prior - parts.vw.transpose() * &parts.vw + parts.va.transpose() * &parts.va;
    Ok(GaussianPosterior {
        mean: parts.mean,
        cov: symmetrize(&cov),
    })
}

/// SoR predictive: the DTC mean with covariance `k_*M Σ̃ k_M*`.
pub fn sor_predict(cache: &NystromCache, y: &Vector, xstar: &InputSet) -> Result<GaussianPosterior> {
    let parts = sparse_parts(cache, y, xstar)?;
    Ok(GaussianPosterior {
        mean: parts.mean,
        cov: symmetrize(&(parts.va.transpose() * &parts.va)),
    })
}

/// DTC mean and pointwise variance.
pub fn dtc_predict_diag(cache: &NystromCache, y: &Vector, xstar: &InputSet) -> Result<(Vector, Vector)> {
    let parts = sparse_parts(cache, y, xstar)?;
    let sv = cache.params.signal_variance;
    let var = Vector::from_fn(xstar.len(), |j, _| {
        sv - parts.vw.column(j).norm_squared() + parts.va.column(j).norm_squared()
    });
    Ok((parts.mean, var))
}

/// SoR mean and pointwise variance.
pub fn sor_predict_diag(cache: &NystromCache, y: &Vector, xstar: &InputSet) -> Result<(Vector, Vector)> {
    let parts = sparse_parts(cache, y, xstar)?;
    let var = Vector::from_fn(xstar.len(), |j, _| parts.va.column(j).norm_squared());
    Ok((parts.mean, var))
}

fn subset(x: &InputSet, y: &Vector, indices: &[usize]) -> Result<(InputSet, Vector)> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("subset must contain at least one index".into()));
    }
    if y.len() != x.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    let mut seen = vec![false; x.len()];
    for &i in indices {
        if i >= x.len() {
            return Err(Error::IndexOutOfRange { index: i, len: x.len() });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidInput(format!("index {i} appears twice in the subset")));
        }
    }
    let ys = Vector::from_iterator(indices.len(), indices.iter().map(|&i| y[i]));
    Ok((x.select(indices)?, ys))
}

/// Exact GP conditioned on `X[indices]` only.
pub fn subsample_predict(
    x: &InputSet,
    y: &Vector,
    indices: &[usize],
    xstar: &InputSet,
    p: &KernelParams,
) -> Result<GaussianPosterior> {
    let (xs, ys) = subset(x, y, indices)?;
    predict_exact(&fit_exact(&xs, &ys, p)?, xstar)
}

pub fn subsample_predict_diag(
    x: &InputSet,
    y: &Vector,
    indices: &[usize],
    xstar: &InputSet,
    p: &KernelParams,
) -> Result<(Vector, Vector)> {
    let (xs, ys) = subset(x, y, indices)?;
    predict_exact_diag(&fit_exact(&xs, &ys, p)?, xstar)
}

/// `log N(y | 0, Q + σ²I) − tr(K − Q)/(2σ²)` in `O(NM²)`.
pub fn vfe_elbo(x: &InputSet, y: &Vector, xt: &InducingSet, p: &KernelParams) -> Result<f64> {
    vfe_elbo_cached(&build_nystrom(x, xt, p)?, y)
}

pub fn vfe_elbo_cached(cache: &NystromCache, y: &Vector) -> Result<f64> {
    collapsed_value(cache, y, true)
}

/// `log N(y | 0, Q + σ²I)`, the evidence of the DTC/SoR likelihood.
pub fn sor_log_evidence(cache: &NystromCache, y: &Vector) -> Result<f64> {
    collapsed_value(cache, y, false)
}

fn collapsed_value(cache: &NystromCache, y: &Vector, with_trace: bool) -> Result<f64> {
    check_targets(cache, y)?;
    let s = cache.inv_noise();
    let n = cache.n() as f64;
    let c = cache.k_xm.transpose() * y;
    let beta = cache.sigma_tilde.solve_vec(&c);
    let log_det = n * cache.params.noise_variance.ln() + cache.sigma_tilde.log_det() - cache.chol_mm.log_det();
    let quad = s * y.norm_squared() - s * s * c.dot(&beta);
    let evidence = -0.5 * (log_det + quad + n * LN_2PI);
    if !with_trace {
        return Ok(evidence);
    }
    let tr_q = trace_of_product(&cache.chol_mm.inverse(), &cache.utu);
    let tr_k = n * cache.params.signal_variance;
    Ok(evidence - 0.5 * s * (tr_k - tr_q))
}

/// ELBO and its gradient with respect to the inducing inputs (M×d).
pub fn vfe_elbo_with_gradient(cache: &NystromCache, y: &Vector) -> Result<(f64, Mat)> {
    collapsed_with_gradient(cache, y, true)
}

/// DTC/SoR evidence and its gradient with respect to the inducing inputs.
pub fn sor_log_evidence_with_gradient(cache: &NystromCache, y: &Vector) -> Result<(f64, Mat)> {
    collapsed_with_gradient(cache, y, false)
}

fn collapsed_with_gradient(cache: &NystromCache, y: &Vector, with_trace: bool) -> Result<(f64, Mat)> {
    let value = collapsed_value(cache, y, with_trace)?;
    let s = cache.inv_noise();
    let u = &cache.k_xm;
    let w_inv = cache.chol_mm.inverse();
    let a_inv = cache.sigma_tilde.inverse();
    let beta = &a_inv * (u.transpose() * y);
    let bbt = &beta * beta.transpose();

    // Evidence adjoints; the trace term adds `s·U W⁻¹` and `−½ s W⁻¹UᵀUW⁻¹`.
    let mut g = -&a_inv * s - &bbt * (s * s * s);
    let mut w_bar = (&w_inv - &a_inv - &bbt * (s * s)) * 0.5;
    if with_trace {
        g += &w_inv * s;
        w_bar -= (&w_inv * &cache.utu * &w_inv) * (0.5 * s);
    }
    let u_bar = u * g + (y * beta.transpose()) * (s * s);

    let mut grad = Mat::zeros(cache.m(), cache.inducing.dim());
    accumulate_grad_wrt_columns(&cache.x, cache.inducing.inputs(), u, &u_bar, &cache.params, &mut grad);
    accumulate_grad_wrt_self(cache.inducing.inputs(), &cache.k_mm, &w_bar, &cache.params, &mut grad);
    Ok((value, grad))
}

/// Settings for the VFE hyperparameter pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub m_pilot: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            m_pilot: 200,
            max_iters: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotFit {
    pub params: KernelParams,
    pub elbo_initial: f64,
    pub elbo_final: f64,
    pub inducing_indices: Vec<usize>,
}

struct NegElbo<'a> {
    x: &'a InputSet,
    y: &'a Vector,
    xt: &'a InducingSet,
    noise_floor: f64,
}

impl NegElbo<'_> {
    fn params(&self, v: &[f64]) -> Result<KernelParams> {
        let mut p = KernelParams::from_log_vec(v)?;
        p.noise_variance = p.noise_variance.max(self.noise_floor);
        Ok(p)
    }

    fn eval(&self, v: &[f64]) -> f64 {
        if v.iter().any(|t| !t.is_finite() || t.abs() > 15.0) {
            return f64::MAX;
        }
        match self.params(v).and_then(|p| vfe_elbo(self.x, self.y, self.xt, &p)) {
            Ok(e) if e.is_finite() => -e,
            _ => f64::MAX,
        }
    }
}

impl CostFunction for NegElbo<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, v: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(v))
    }
}

/// Fits SE-ARD hyperparameters by maximizing the ELBO with the inducing
/// inputs frozen at a seeded random subset of the data. Nelder–Mead runs in
/// log space; `σ²` is floored at `1e-6·var(y)`.
pub fn fit_hyperparams_pilot(x: &InputSet, y: &Vector, cfg: &PilotConfig) -> Result<PilotFit> {
    if y.len() != x.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if cfg.m_pilot == 0 || cfg.m_pilot > x.len() {
        return Err(Error::InvalidInput(format!(
            "pilot needs 1 <= M <= N, got M = {} and N = {}",
            cfg.m_pilot,
            x.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = rand::seq::index::sample(&mut rng, x.len(), cfg.m_pilot).into_vec();
    idx.sort_unstable();
    let xt = InducingSet::new_unchecked(x.select(&idx)?);

    let n = y.len() as f64;
    let mean = y.mean();
    let var_y = (y.map(|v| (v - mean) * (v - mean)).sum() / n).max(1e-12);
    let problem = NegElbo {
        x,
        y,
        xt: &xt,
        noise_floor: 1e-6 * var_y,
    };
    let init = KernelParams::isotropic(x.dim(), 1.0, var_y, 0.1 * var_y)?.to_log_vec();
    let initial_cost = problem.eval(&init);
    if initial_cost == f64::MAX {
        return Err(Error::OptimizerDiverged("ELBO is not finite at the initial hyperparameters".into()));
    }

    let mut simplex = vec![init.clone()];
    for i in 0..init.len() {
        let mut v = init.clone();
        v[i] += 1.0;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-7)
        .map_err(|e| Error::OptimizerDiverged(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(cfg.max_iters))
        .run()
        .map_err(|e| Error::OptimizerDiverged(e.to_string()))?;
    let state = res.state();
    let best = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::OptimizerDiverged("no parameters returned".into()))?;
    let best_cost = state.get_best_cost();
    let problem = NegElbo {
        x,
        y,
        xt: &xt,
        noise_floor: 1e-6 * var_y,
    };
    let (params, final_cost) = if best_cost <= initial_cost {
        (problem.params(&best)?, best_cost)
    } else {
        (problem.params(&init)?, initial_cost)
    };
    if !final_cost.is_finite() || final_cost == f64::MAX {
        return Err(Error::OptimizerDiverged("ELBO became non-finite".into()));
    }
    Ok(PilotFit {
        params,
        elbo_initial: -initial_cost,
        elbo_final: -final_cost,
        inducing_indices: idx,
    })
}

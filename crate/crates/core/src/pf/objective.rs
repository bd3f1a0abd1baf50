//! The pF-DTC objective, its dense reference value and its gradient with
//! respect to the inducing inputs.
//!
//! All values are on the `σ⁴`-scaled squared scale: the divergence itself is
//! `sqrt(full) / σ²` (see [`pf_value_from_full`]). With `B = UΣ̃`,
//! `R = BᵀQ̄`, `d = μ̂(X) − y`, `e = μ̂(X) − Q̄μ̂(X̃)`, `D̂ = K̂(X̃, X̃)` and
//! `Ĉ = K̂(X̃, X)` the inducing-dependent part is
//!
//! ```text
//! I   = −tr(W⁻¹UᵀK̂U) − dᵀQd
//! IIa = tr(W BᵀK̂B) + tr(D̂ RᵀWR)
//! IIb = −2 tr(W R Ĉ B)
//! III = eᵀBWBᵀe
//! ```
//!
//! and the remaining constant is `tr(K̂K) + dᵀKd`.

use serde::{Deserialize, Serialize};

use super::auxiliary::AuxiliaryDistribution;
use crate::error::{Error, Result};
use crate::kernel::{accumulate_grad_wrt_columns, accumulate_grad_wrt_self, kernel_matrix, InputSet, KernelParams};
use crate::linalg::{chol_psd, trace_of_product, JitterPolicy, Mat, Vector};
use crate::sparse::{build_nystrom, InducingSet, NystromCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfTerms {
    pub term_i: f64,
    pub term_iia: f64,
    pub term_iib: f64,
    pub term_iii: f64,
    pub relative_objective: f64,
}

/// `sqrt(full) / σ²`, clamping round-off negatives to zero.
pub fn pf_value_from_full(full: f64, noise_variance: f64) -> f64 {
    full.max(0.0).sqrt() / noise_variance
}

struct Forward {
    terms: PfTerms,
    w: Mat,
    w_inv: Mat,
    sigma: Mat,
    b: Mat,
    hu: Mat,
    hb: Mat,
    d: Vector,
    u_vec: Vector,
    mu_m: Vector,
    e: Vector,
    r: Mat,
    g: Vector,
    v: Mat,
    p_mat: Mat,
    d_hat: Mat,
    c_hat: Mat,
}

fn check_compatible(cache: &NystromCache, y: &Vector, aux: &AuxiliaryDistribution) -> Result<()> {
    if y.len() != cache.n() || aux.mu_x.len() != cache.n() {
        return Err(Error::DimensionMismatch(format!(
            "cache has {} points, targets {}, auxiliary {}",
            cache.n(),
            y.len(),
            aux.mu_x.len()
        )));
    }
    if aux.params != cache.params {
        return Err(Error::InvalidInput(
            "auxiliary distribution and cache use different kernel parameters".into(),
        ));
    }
    Ok(())
}

fn forward(cache: &NystromCache, y: &Vector, aux: &AuxiliaryDistribution) -> Result<Forward> {
    check_compatible(cache, y, aux)?;
    let u = &cache.k_xm;
    let qbar = &cache.qbar;
    let w = cache.k_mm_jittered();
    let w_inv = cache.chol_mm.inverse();
    let sigma = cache.sigma_tilde_dense();
    let b = u * &sigma;
    let hu = aux.k_hat_times(u)?;
    let hb = &hu * &sigma;
    let d = &aux.mu_x - y;

    let v = kernel_matrix(cache.inducing.inputs(), &aux.aux_points, &cache.params)?;
    let p_mat = aux.f_chol.inverse() * aux.sign();
    let vp = &v * &p_mat;
    let mu_m = &v * &aux.w;
    let c = aux.scale();
    let d_hat = &cache.k_mm * c + &vp * v.transpose();
    let c_hat = u.transpose() * c + &vp * aux.k_xa.transpose();

    let e = &aux.mu_x - qbar * &mu_m;
    let r = b.transpose() * qbar;
    let u_vec = u.transpose() * &d;
    let g = b.transpose() * &e;

    let wr = &w * &r;
    let term_i = -trace_of_product(&w_inv, &(u.transpose() * &hu)) - u_vec.dot(&(&w_inv * &u_vec));
    let term_iia = trace_of_product(&w, &(b.transpose() * &hb)) + trace_of_product(&d_hat, &(r.transpose() * &wr));
    let term_iib = -2.0 * trace_of_product(&wr, &(&c_hat * &b));
    let term_iii = g.dot(&(&w * &g));
    let relative_objective = term_i + term_iia + term_iib + term_iii;
    if !relative_objective.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(Forward {
        terms: PfTerms {
            term_i,
            term_iia,
            term_iib,
            term_iii,
            relative_objective,
        },
        w,
        w_inv,
        sigma,
        b,
        hu,
        hb,
        d,
        u_vec,
        mu_m,
        e,
        r,
        g,
        v,
        p_mat,
        d_hat,
        c_hat,
    })
}

/// Inducing-dependent part of the objective in `O(NM² + NMM')`.
pub fn pf_dtc_objective(cache: &NystromCache, y: &Vector, aux: &AuxiliaryDistribution) -> Result<PfTerms> {
    Ok(forward(cache, y, aux)?.terms)
}

/// Objective and its gradient with respect to the inducing inputs (M×d).
///
/// Diagonal jitter added while factorizing `W` or `A` is treated as a
/// constant, so the gradient is that of the regularized objective.
pub fn pf_dtc_objective_with_gradient(
    cache: &NystromCache,
    y: &Vector,
    aux: &AuxiliaryDistribution,
) -> Result<(PfTerms, Mat)> {
    let f = forward(cache, y, aux)?;
    let s = cache.inv_noise();
    let u = &cache.k_xm;
    let qbar = &cache.qbar;
    let c = aux.scale();
    let wr = &f.w * &f.r;
    let cb = &f.c_hat * &f.b;

    // Term I.
    let mut u_bar = &f.hu * &f.w_inv * -2.0;
    let mut winv_bar = -(u.transpose() * &f.hu);
    let wu = &f.w_inv * &f.u_vec;
    u_bar -= &f.d * wu.transpose() * 2.0;
    winv_bar -= &f.u_vec * f.u_vec.transpose();

    // Term IIa.
    let mut w_bar = f.b.transpose() * &f.hb;
    let mut b_bar = &f.hb * &f.w * 2.0;
    let d_bar = f.r.transpose() * &wr;
    let mut r_bar = &wr * &f.d_hat * 2.0;
    w_bar += &f.r * &f.d_hat * f.r.transpose();

    // Term IIb.
    w_bar -= cb.transpose() * f.r.transpose() * 2.0;
    r_bar -= &f.w * cb.transpose() * 2.0;
    let c_bar = wr.transpose() * f.b.transpose() * -2.0;
    b_bar -= f.c_hat.transpose() * wr.transpose() * 2.0;

    // Term III.
    w_bar += &f.g * f.g.transpose();
    let g_bar = &f.w * &f.g * 2.0;

    // Back through g = Bᵀe, e = μ̂_X − Q̄μ̂_M and R = BᵀQ̄.
    b_bar += &f.e * g_bar.transpose();
    let e_bar = &f.b * &g_bar;
    let mut qbar_bar = -(&e_bar * f.mu_m.transpose());
    let m_bar = -(qbar.transpose() * &e_bar);
    b_bar += qbar * r_bar.transpose();
    qbar_bar += &f.b * &r_bar;

    // Q̄ = UW⁻¹, B = UΣ̃, Σ̃ = A⁻¹, A = W + sUᵀU.
    u_bar += &qbar_bar * &f.w_inv;
    winv_bar += u.transpose() * &qbar_bar;
    u_bar += &b_bar * &f.sigma;
    let sigma_bar = u.transpose() * &b_bar;
    let a_bar = -(&f.sigma * sigma_bar * &f.sigma);
    w_bar += &a_bar;
    u_bar += u * (&a_bar + a_bar.transpose()) * s;
    w_bar -= &f.w_inv * &winv_bar * &f.w_inv;

    // Auxiliary blocks: Ĉ = cUᵀ + VPk(X̂,X), D̂ = cW + VPVᵀ, μ̂_M = Vw.
    u_bar += c_bar.transpose() * c;
    w_bar += &d_bar * c;
    let v_bar =
        &c_bar * &aux.k_xa * &f.p_mat + (&d_bar + d_bar.transpose()) * &f.v * &f.p_mat + &m_bar * aux.w.transpose();

    let xt = cache.inducing.inputs();
    let mut grad = Mat::zeros(cache.m(), xt.dim());
    accumulate_grad_wrt_columns(&cache.x, xt, u, &u_bar, &cache.params, &mut grad);
    accumulate_grad_wrt_self(xt, &cache.k_mm, &w_bar, &cache.params, &mut grad);
    accumulate_grad_wrt_columns(
        &aux.aux_points,
        xt,
        &f.v.transpose(),
        &v_bar.transpose(),
        &cache.params,
        &mut grad,
    );
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    Ok((f.terms, grad))
}

fn check_cap(n: usize, aux: &AuxiliaryDistribution) -> Result<()> {
    if n > aux.validation_cap {
        return Err(Error::ValidationModeRequired {
            n,
            cap: aux.validation_cap,
        });
    }
    Ok(())
}

/// The inducing-independent constant `tr(K̂K) + dᵀKd`; dense, validation only.
pub fn pf_constant_term(x: &InputSet, y: &Vector, aux: &AuxiliaryDistribution, p: &KernelParams) -> Result<f64> {
    check_cap(x.len(), aux)?;
    let k = kernel_matrix(x, x, p)?;
    let d = &aux.mu_x - y;
    Ok(trace_of_product(&aux.dense_k_hat()?, &k) + d.dot(&(&k * &d)))
}

/// Complete `σ⁴`-scaled squared divergence, evaluated densely with
/// `S = Q(I − (Q + σ²I)⁻¹Q)²`. Independent of the factored code path and
/// intended as a reference for small `N`.
pub fn pf_dtc_objective_full(
    x: &InputSet,
    y: &Vector,
    xt: &InducingSet,
    aux: &AuxiliaryDistribution,
    p: &KernelParams,
) -> Result<f64> {
    let n = x.len();
    check_cap(n, aux)?;
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} inputs but {} targets", y.len())));
    }
    let xi = xt.inputs();
    let u = kernel_matrix(x, xi, p)?;
    let w_chol = chol_psd(&kernel_matrix(xi, xi, p)?, &JitterPolicy::default())?;
    let qbar = w_chol.solve_mat(&u.transpose()).transpose();
    let q = &qbar * u.transpose();
    let k = kernel_matrix(x, x, p)?;
    let k_hat = aux.dense_k_hat()?;

    let mut noisy = q.clone();
    for i in 0..n {
        noisy[(i, i)] += p.noise_variance;
    }
    let noisy_chol = chol_psd(&crate::linalg::symmetrize(&noisy), &JitterPolicy::default())?;
    let inner = Mat::identity(n, n) - noisy_chol.solve_mat(&q);
    let s_mat = &q * &inner * &inner;

    let d = &aux.mu_x - y;
    let d_hat = aux.cross(xi, xi)?;
    let c_hat = aux.cross(xi, x)?;
    let e = &aux.mu_x - &qbar * aux.mu_at(xi)?;

    let first = trace_of_product(&(&k_hat + &d * d.transpose()), &(&k - &q));
    let second = trace_of_product(&k_hat, &s_mat);
    let third = trace_of_product(&d_hat, &(qbar.transpose() * &s_mat * &qbar));
    let fourth = -2.0 * trace_of_product(&c_hat, &(&s_mat * &qbar));
    let fifth = e.dot(&(&s_mat * &e));
    Ok(first + second + third + fourth + fifth)
}

/// Objective wrapper over inducing-input matrices, for optimizers.
#[derive(Debug, Clone)]
pub struct PfObjective<'a> {
    pub x: &'a InputSet,
    pub y: &'a Vector,
    pub aux: &'a AuxiliaryDistribution,
    pub params: &'a KernelParams,
}

impl PfObjective<'_> {
    fn cache(&self, xt: &Mat) -> Result<NystromCache> {
        let inducing = InducingSet::new_unchecked(InputSet::new(xt.clone())?);
        build_nystrom(self.x, &inducing, self.params)
    }

    pub fn value(&self, xt: &Mat) -> Result<f64> {
        Ok(pf_dtc_objective(&self.cache(xt)?, self.y, self.aux)?.relative_objective)
    }

    pub fn value_and_gradient(&self, xt: &Mat) -> Result<(f64, Mat)> {
        let (terms, g) = pf_dtc_objective_with_gradient(&self.cache(xt)?, self.y, self.aux)?;
        Ok((terms.relative_objective, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pf::auxiliary::{build_aux_sor, build_aux_subset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        x: InputSet,
        y: Vector,
        p: KernelParams,
    }

    fn instance(seed: u64, n: usize, d: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = InputSet::new(Mat::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))).unwrap();
        let y = Vector::from_fn(n, |i, _| (x.matrix()[(i, 0)]).sin() + rng.random_range(-0.3..0.3));
        let ls = (0..d).map(|_| rng.random_range(0.7..1.4)).collect();
        let p = KernelParams::new(ls, rng.random_range(0.6..1.5), rng.random_range(0.05..0.3)).unwrap();
        Instance { x, y, p }
    }

    fn inducing(seed: u64, m: usize, d: usize) -> InducingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InducingSet::new(InputSet::new(Mat::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0))).unwrap()).unwrap()
    }

    fn auxes(inst: &Instance, idx: &[usize]) -> Vec<AuxiliaryDistribution> {
        vec![
            build_aux_subset(&inst.x, &inst.y, idx, &inst.p).unwrap(),
            build_aux_sor(&inst.x, &inst.y, idx, &inst.p).unwrap(),
        ]
    }

    #[test]
    fn factored_s_matches_main_text_form() {
        let inst = instance(1, 14, 2);
        let xt = inducing(2, 4, 2);
        let cache = build_nystrom(&inst.x, &xt, &inst.p).unwrap();
        let b = &cache.k_xm * cache.sigma_tilde_dense();
        let factored = &b * cache.k_mm_jittered() * b.transpose();
        let q = &cache.qbar * cache.k_xm.transpose();
        let n = 14;
        let noisy = &q + Mat::identity(n, n) * inst.p.noise_variance;
        let inner = Mat::identity(n, n) - noisy.try_inverse().unwrap() * &q;
        let main = &q * &inner * &inner;
        assert!((factored - main).amax() < 1e-10);
    }

    #[test]
    fn relative_plus_constant_equals_full() {
        let inst = instance(3, 20, 2);
        let xt = inducing(4, 4, 2);
        let cache = build_nystrom(&inst.x, &xt, &inst.p).unwrap();
        for aux in auxes(&inst, &[0, 3, 8, 15]) {
            let rel = pf_dtc_objective(&cache, &inst.y, &aux).unwrap().relative_objective;
            let c = pf_constant_term(&inst.x, &inst.y, &aux, &inst.p).unwrap();
            let full = pf_dtc_objective_full(&inst.x, &inst.y, &xt, &aux, &inst.p).unwrap();
            assert!((rel + c - full).abs() <= 1e-8 * (1.0 + full.abs()), "{rel} + {c} vs {full}");
            assert!(full >= -1e-10);
        }
    }

    #[test]
    fn zero_at_exactness() {
        let inst = instance(5, 25, 2);
        let xt = InducingSet::new(inst.x.clone()).unwrap();
        for aux in auxes(&inst, &[1, 2, 10, 20]) {
            let full = pf_dtc_objective_full(&inst.x, &inst.y, &xt, &aux, &inst.p).unwrap();
            assert!(full.abs() < 1e-8, "{full}");
        }
    }

    #[test]
    fn single_datum_exact_configuration_is_zero() {
        let x = InputSet::from_scalars(&[0.0]).unwrap();
        let y = Vector::from_vec(vec![1.0]);
        let p = KernelParams::isotropic(1, 1.0, 1.0, 1.0).unwrap();
        let aux = build_aux_subset(&x, &y, &[0], &p).unwrap();
        let xt = InducingSet::new(x.clone()).unwrap();
        let full = pf_dtc_objective_full(&x, &y, &xt, &aux, &p).unwrap();
        assert!(full.abs() < 1e-14);
    }

    #[test]
    fn term_sign_invariants() {
        for seed in 0..10 {
            let inst = instance(10 + seed, 30, 2);
            let xt = inducing(50 + seed, 5, 2);
            let cache = build_nystrom(&inst.x, &xt, &inst.p).unwrap();
            for aux in auxes(&inst, &[0, 4, 9, 13, 22]) {
                let t = pf_dtc_objective(&cache, &inst.y, &aux).unwrap();
                assert!(t.term_iii >= -1e-10);
                assert!(t.term_iia + t.term_iib >= -1e-8 * (t.term_iia.abs() + 1.0));
            }
        }
    }

    #[test]
    fn perturbing_away_from_data_increases_value() {
        let inst = instance(6, 10, 1);
        let aux = build_aux_subset(&inst.x, &inst.y, &[0, 5], &inst.p).unwrap();
        let base = inst.x.matrix().clone();
        let at = |shift: f64| {
            let mut m = base.clone();
            m[(3, 0)] += shift;
            let xt = InducingSet::new_unchecked(InputSet::new(m).unwrap());
            pf_dtc_objective_full(&inst.x, &inst.y, &xt, &aux, &inst.p).unwrap()
        };
        let zero = at(0.0);
        let mut prev = zero;
        for shift in [0.05, 0.2, 0.5] {
            let v = at(shift);
            assert!(v > zero);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    fn fd_gradient(obj: &PfObjective, xt: &Mat, h: f64) -> Mat {
        let mut g = Mat::zeros(xt.nrows(), xt.ncols());
        for i in 0..xt.nrows() {
            for k in 0..xt.ncols() {
                let mut plus = xt.clone();
                let mut minus = xt.clone();
                plus[(i, k)] += h;
                minus[(i, k)] -= h;
                g[(i, k)] = (obj.value(&plus).unwrap() - obj.value(&minus).unwrap()) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let inst = instance(100 + seed, 15, 2);
            let xt = inducing(200 + seed, 3, 2);
            for aux in auxes(&inst, &[0, 6, 11]) {
                let obj = PfObjective {
                    x: &inst.x,
                    y: &inst.y,
                    aux: &aux,
                    params: &inst.p,
                };
                let (_, g) = obj.value_and_gradient(xt.inputs().matrix()).unwrap();
                let fd = fd_gradient(&obj, xt.inputs().matrix(), 1e-5);
                let scale = fd.amax().max(1e-8);
                assert!((&g - &fd).amax() / scale < 1e-5, "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_exactness() {
        let inst = instance(7, 8, 2);
        for aux in auxes(&inst, &[0, 3]) {
            let obj = PfObjective {
                x: &inst.x,
                y: &inst.y,
                aux: &aux,
                params: &inst.p,
            };
            let (_, g) = obj.value_and_gradient(inst.x.matrix()).unwrap();
            assert!(g.amax() < 1e-5, "{g}");
        }
    }

    #[test]
    fn duplicated_inducing_points_stay_finite() {
        let inst = instance(8, 12, 2);
        let aux = build_aux_sor(&inst.x, &inst.y, &[0, 5], &inst.p).unwrap();
        let obj = PfObjective {
            x: &inst.x,
            y: &inst.y,
            aux: &aux,
            params: &inst.p,
        };
        let mut xt = Mat::zeros(3, 2);
        xt.row_mut(0).copy_from(&inst.x.matrix().row(1));
        xt.row_mut(1).copy_from(&inst.x.matrix().row(1));
        xt.row_mut(2).copy_from(&inst.x.matrix().row(4));
        match obj.value_and_gradient(&xt) {
            Ok((v, g)) => {
                assert!(v.is_finite());
                assert!(g.iter().all(|x| x.is_finite()));
            }
            Err(e) => assert!(matches!(e, Error::JitterCapExceeded { .. } | Error::NonFiniteObjective)),
        }
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let inst = instance(9, 10, 1);
        let other = instance(9, 11, 1);
        let aux = build_aux_sor(&other.x, &other.y, &[0], &other.p).unwrap();
        let cache = build_nystrom(&inst.x, &inducing(1, 2, 1), &inst.p).unwrap();
        assert!(pf_dtc_objective(&cache, &inst.y, &aux).is_err());
    }

    #[test]
    fn pf_value_scaling() {
        assert_eq!(pf_value_from_full(4.0, 0.5), 4.0);
        assert_eq!(pf_value_from_full(-1e-15, 0.5), 0.0);
    }
}

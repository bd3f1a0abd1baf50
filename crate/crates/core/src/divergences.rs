//! Closed-form divergences between finite-dimensional Gaussians, used to
//! check the chain KL / Fisher / Wasserstein relationships numerically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_psd, sqrtm_psd, sym_eigenvalues, symmetrize, CholFactor, JitterPolicy, Mat, Vector};

/// `N(mean, cov)` with a covariance that factorizes without jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNd {
    mean: Vector,
    cov: Mat,
}

impl GaussianNd {
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        match chol_psd(&cov, &JitterPolicy::strict()) {
            Ok(_) => Ok(Self { mean, cov }),
            Err(Error::NotSymmetric { asymmetry, tolerance }) => Err(Error::NotSymmetric { asymmetry, tolerance }),
            Err(_) => Err(Error::SingularCovariance),
        }
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(Vector::from_element(1, mean), Mat::from_element(1, 1, variance))
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn chol(&self) -> CholFactor {
        chol_psd(&self.cov, &JitterPolicy::strict()).expect("validated at construction")
    }
}

fn same_dim(a: &GaussianNd, b: &GaussianNd) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Gaussians of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `KL(a ‖ b)`.
pub fn kl_gaussian(a: &GaussianNd, b: &GaussianNd) -> Result<f64> {
    same_dim(a, b)?;
    let lb = b.chol();
    let la = a.chol();
    let d = a.dim() as f64;
    let tr = lb.solve_mat(&a.cov).trace();
    let diff = &b.mean - &a.mean;
    let maha = lb.solve_lower_vec(&diff).norm_squared();
    Ok(0.5 * (tr - d + lb.log_det() - la.log_det() + maha))
}

/// Returns `η = N(μ, s²)` with `KL(N(μ̃, σ̃²) ‖ η) = δ`, where
/// `s² = e^{2δ} σ̃²` and `μ = μ̃ + σ̃ sqrt(e^{2δ} − 1)`.
pub fn prop1_construct(delta: f64, mu_tilde: f64, s_tilde2: f64) -> Result<GaussianNd> {
    if delta <= 0.0 || delta.is_nan() {
        return Err(Error::NonPositiveDelta(delta));
    }
    if s_tilde2 <= 0.0 || !s_tilde2.is_finite() {
        return Err(Error::InvalidInput(format!("variance must be positive, got {s_tilde2}")));
    }
    let s2 = (2.0 * delta).exp() * s_tilde2;
    let mu = mu_tilde + s_tilde2.sqrt() * (2.0 * delta).exp_m1().sqrt();
    GaussianNd::univariate(mu, s2)
}

/// Gelbrich 2-Wasserstein distance.
pub fn w2_gaussian(a: &GaussianNd, b: &GaussianNd) -> Result<f64> {
    same_dim(a, b)?;
    let ra = sqrtm_psd(&a.cov)?;
    let cross = sqrtm_psd(&symmetrize(&(&ra * &b.cov * &ra)))?;
    let bures = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(((&a.mean - &b.mean).norm_squared() + bures).max(0.0).sqrt())
}

/// `(E_{θ∼ν} ‖∇log a(θ) − ∇log b(θ)‖²)^{1/2}` from the linear scores.
pub fn fisher_distance_gaussian(a: &GaussianNd, b: &GaussianNd, nu: &GaussianNd) -> Result<f64> {
    same_dim(a, b)?;
    same_dim(a, nu)?;
    let pa = a.chol().inverse();
    let pb = b.chol().inverse();
    let p = &pb - &pa;
    let q = &pa * &a.mean - &pb * &b.mean;
    let spread = (&p * &nu.cov * p.transpose()).trace();
    let offset = (&p * &nu.mean + q).norm_squared();
    Ok((spread + offset).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop2Check {
    pub mean_gap: f64,
    pub std_gap: f64,
    pub w2: f64,
}

/// Moment gaps versus W2 for univariate Gaussians.
pub fn prop2_check(a: &GaussianNd, b: &GaussianNd) -> Result<Prop2Check> {
    same_dim(a, b)?;
    if a.dim() != 1 {
        return Err(Error::DimensionMismatch("moment check is univariate".into()));
    }
    Ok(Prop2Check {
        mean_gap: (a.mean[0] - b.mean[0]).abs(),
        std_gap: (a.cov[(0, 0)].sqrt() - b.cov[(0, 0)].sqrt()).abs(),
        w2: w2_gaussian(a, b)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop3Check {
    /// `W2(a, b)`.
    pub lhs: f64,
    /// `λ_max(Σ_b) · sup(da/dν)^{1/2} · F_ν(a, b)`.
    pub rhs: f64,
    /// Same as `rhs` but with the constant `1/λ_min(Σ_b)`. Not a valid bound
    /// in general; reported to document where it fails.
    pub rhs_min_eig: f64,
    pub sup_density_ratio: f64,
    pub fisher: f64,
}

/// Fisher-to-Wasserstein bound with `ν = N(μ_a, c Σ_a)`, for which
/// `sup da/dν = c^{d/2}`.
///
/// The constant is the inverse strong log-concavity of `b`, namely
/// `λ_max(Σ_b)`, which is what the Langevin coupling argument delivers.
pub fn prop3_bound_check(a: &GaussianNd, b: &GaussianNd, c_inflate: f64) -> Result<Prop3Check> {
    if c_inflate <= 1.0 || c_inflate.is_nan() {
        return Err(Error::InflateNotAboveOne(c_inflate));
    }
    same_dim(a, b)?;
    let nu = GaussianNd::new(a.mean.clone(), &a.cov * c_inflate)?;
    let sup = c_inflate.powf(a.dim() as f64 / 2.0);
    let fisher = fisher_distance_gaussian(a, b, &nu)?;
    let eig = sym_eigenvalues(&b.cov);
    let (lo, hi) = (eig[0], eig[eig.len() - 1]);
    Ok(Prop3Check {
        lhs: w2_gaussian(a, b)?,
        rhs: hi * sup.sqrt() * fisher,
        rhs_min_eig: sup.sqrt() * fisher / lo,
        sup_density_ratio: sup,
        fisher,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example1 {
    pub w2: f64,
    pub fisher: f64,
    /// `NaN` when `t = t̃`.
    pub fisher_over_w2: f64,
    pub pf: f64,
}

/// Single observation at `x = 0` under the unit SE kernel, posteriors
/// differing only in the observed value (`t` versus `t̃`). `induced_k00` is
/// `⟨k_0, k_0⟩` in the chosen RKHS; the RKHS kernel is the model kernel, so
/// `r(0, 0) = 1`.
///
/// The pF value goes through the preconditioned scores
/// `C ∇ℓ(f) = −σ⁻² · σ²/(1 + σ²) · (f(0) − t) k_0` rather than the W2 formula.
pub fn example1_closed_forms(t: f64, t_tilde: f64, sigma2: f64, induced_k00: f64) -> Result<Example1> {
    if sigma2 <= 0.0 || induced_k00 <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "need σ² > 0 and k'(0,0) > 0, got {sigma2} and {induced_k00}"
        )));
    }
    let r00 = 1.0;
    let gap = (t - t_tilde).abs();
    let w2 = induced_k00.sqrt() * gap / (1.0 + sigma2);
    let shrink = sigma2 / (1.0 + sigma2);
    let pf = gap / sigma2 * shrink * induced_k00.sqrt();
    let fisher = gap / sigma2 * f64::sqrt(r00);
    Ok(Example1 {
        w2,
        fisher,
        fisher_over_w2: fisher / w2,
        pf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianNd {
        let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let cov = symmetrize(&(&a * a.transpose() + Mat::identity(d, d) * 0.2));
        GaussianNd::new(Vector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)), cov).unwrap()
    }

    #[test]
    fn rejects_singular_and_mismatched() {
        assert!(matches!(
            GaussianNd::new(Vector::zeros(2), Mat::zeros(2, 2)),
            Err(Error::SingularCovariance)
        ));
        assert!(GaussianNd::new(Vector::zeros(3), Mat::identity(2, 2)).is_err());
        let a = GaussianNd::univariate(0.0, 1.0).unwrap();
        let b = GaussianNd::new(Vector::zeros(2), Mat::identity(2, 2)).unwrap();
        assert!(kl_gaussian(&a, &b).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = GaussianNd::univariate(0.0, 1.0).unwrap();
        let b = GaussianNd::univariate(1.0, 1.0).unwrap();
        assert_relative_eq!(kl_gaussian(&a, &b).unwrap(), 0.5, epsilon = 1e-15);
        assert!(kl_gaussian(&a, &a).unwrap().abs() < 1e-12);
        let c = GaussianNd::univariate(0.3, 2.0).unwrap();
        let by_hand = 0.5 * (1.0 / 2.0 - 1.0 + 2f64.ln() + 0.09 / 2.0);
        assert_relative_eq!(kl_gaussian(&a, &c).unwrap(), by_hand, epsilon = 1e-15);
    }

    #[test]
    fn kl_small_mean_far_construction() {
        let tilde = GaussianNd::univariate(0.0, 1.0).unwrap();
        let eta = prop1_construct(5.0, 0.0, 1.0).unwrap();
        assert!((kl_gaussian(&tilde, &eta).unwrap() - 5.0).abs() < 1e-10);
        assert!((eta.mean()[0] - 148.409_79).abs() < 1e-3);
        assert_relative_eq!(eta.mean()[0], (10f64.exp() - 1.0).sqrt(), max_relative = 1e-14);

        let eta = prop1_construct(1.0, 0.7, 0.3).unwrap();
        let tilde = GaussianNd::univariate(0.7, 0.3).unwrap();
        assert!((kl_gaussian(&tilde, &eta).unwrap() - 1.0).abs() < 1e-10);

        let eta = prop1_construct(1e-8, 0.7, 0.3).unwrap();
        assert!((eta.mean()[0] - 0.7).abs() < 1e-4);
        assert!((eta.cov()[(0, 0)] - 0.3).abs() < 1e-7);

        assert!(matches!(prop1_construct(0.0, 0.0, 1.0), Err(Error::NonPositiveDelta(_))));
        assert!(prop1_construct(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = GaussianNd::univariate(0.0, 1.0).unwrap();
        let b = GaussianNd::univariate(1.0, 4.0).unwrap();
        assert_relative_eq!(w2_gaussian(&a, &b).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert!(w2_gaussian(&a, &a).unwrap() < 1e-7);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_gaussian(&mut rng, 3);
        let shifted = GaussianNd::new(g.mean() + Vector::from_vec(vec![1.0, -2.0, 0.5]), g.cov().clone()).unwrap();
        assert_relative_eq!(w2_gaussian(&g, &shifted).unwrap(), 5.25f64.sqrt(), epsilon = 1e-7);
    }

    #[test]
    fn w2_commuting_covariances_closed_form() {
        let a = GaussianNd::new(Vector::zeros(2), Mat::from_diagonal(&Vector::from_vec(vec![1.0, 9.0]))).unwrap();
        let b = GaussianNd::new(
            Vector::from_vec(vec![1.0, 1.0]),
            Mat::from_diagonal(&Vector::from_vec(vec![4.0, 1.0])),
        )
        .unwrap();
        let expect = (2.0 + 1.0 + 4.0f64).sqrt();
        assert_relative_eq!(w2_gaussian(&a, &b).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn fisher_examples() {
        let a = GaussianNd::univariate(0.0, 1.0).unwrap();
        let b = GaussianNd::univariate(-1.7, 1.0).unwrap();
        for nu in [a.clone(), GaussianNd::univariate(3.0, 0.2).unwrap()] {
            assert_relative_eq!(fisher_distance_gaussian(&a, &b, &nu).unwrap(), 1.7, epsilon = 1e-14);
            assert_eq!(fisher_distance_gaussian(&a, &a, &nu).unwrap(), 0.0);
        }
    }

    #[test]
    fn fisher_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_gaussian(&mut rng, 3);
        let b = random_gaussian(&mut rng, 3);
        let nu = random_gaussian(&mut rng, 3);
        let closed = fisher_distance_gaussian(&a, &b, &nu).unwrap();
        let pa = a.cov().clone().try_inverse().unwrap();
        let pb = b.cov().clone().try_inverse().unwrap();
        let l = nu.cov().clone().cholesky().unwrap().l();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = Vector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let th = nu.mean() + &l * z;
            let diff = -(&pa * (&th - a.mean())) + &pb * (&th - b.mean());
            acc += diff.norm_squared();
        }
        let mc = (acc / n as f64).sqrt();
        assert!((mc - closed).abs() < 0.01 * closed, "{mc} vs {closed}");
    }

    #[test]
    fn fisher_bound_counterexample_for_min_eigen_constant() {
        let a = GaussianNd::univariate(0.0, 1.0).unwrap();
        let b = GaussianNd::univariate(0.0, 4.0).unwrap();
        let chk = prop3_bound_check(&a, &b, 2.0).unwrap();
        assert_relative_eq!(chk.lhs, 1.0, epsilon = 1e-12);
        assert!(chk.rhs_min_eig < chk.lhs);
        assert!(chk.lhs <= chk.rhs);
        assert!(matches!(prop3_bound_check(&a, &b, 1.0), Err(Error::InflateNotAboveOne(_))));
    }

    #[test]
    fn fisher_bound_ratio_grows_with_tiny_target_variance() {
        let a = GaussianNd::univariate(0.0, 1.0).unwrap();
        let mut last_ratio = 0.0;
        for &v in &[1e-1, 1e-2, 1e-3, 1e-4] {
            let b = GaussianNd::univariate(0.5, v).unwrap();
            let chk = prop3_bound_check(&a, &b, 2.0).unwrap();
            let ratio = chk.sup_density_ratio.sqrt() * chk.fisher / chk.lhs;
            assert!(ratio > last_ratio);
            assert!(chk.lhs <= chk.rhs + 1e-12);
            last_ratio = ratio;
        }
        assert!(last_ratio > 1e3);
    }

    #[test]
    fn single_observation_identities() {
        for &t in &[-1.0, 0.5, 2.0] {
            for &tt in &[-0.3, 0.5, 1.7] {
                for &s2 in &[0.01, 0.3, 2.0] {
                    let e = example1_closed_forms(t, tt, s2, 0.8).unwrap();
                    if t == tt {
                        assert_eq!(e.w2, 0.0);
                        assert_eq!(e.pf, 0.0);
                        assert_eq!(e.fisher, 0.0);
                    } else {
                        assert!((e.pf - e.w2).abs() <= 1e-10 * e.w2);
                    }
                }
            }
        }
        let ratios: Vec<f64> = [1.0, 0.1, 0.01]
            .iter()
            .map(|&s2| example1_closed_forms(1.0, 0.0, s2, 1.0).unwrap().fisher_over_w2)
            .collect();
        assert_relative_eq!(ratios[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(ratios[1], 11.0, epsilon = 1e-10);
        assert_relative_eq!(ratios[2], 101.0, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_nonnegative(seed in 0u64..100_000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_gaussian(&mut rng, d);
            let b = random_gaussian(&mut rng, d);
            prop_assert!(kl_gaussian(&a, &b).unwrap() >= -1e-12);
            prop_assert!(kl_gaussian(&a, &a).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn w2_moment_bounds(m1 in -5.0..5.0f64, m2 in -5.0..5.0f64, v1 in 0.01..10.0f64, v2 in 0.01..10.0f64) {
            let a = GaussianNd::univariate(m1, v1).unwrap();
            let b = GaussianNd::univariate(m2, v2).unwrap();
            let c = prop2_check(&a, &b).unwrap();
            prop_assert!(c.mean_gap <= c.w2 * (1.0 + 1e-12) + 1e-12);
            prop_assert!(c.std_gap <= 2.0 * c.w2 * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn fisher_bound_holds(seed in 0u64..100_000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_gaussian(&mut rng, d);
            let b = random_gaussian(&mut rng, d);
            let c = prop3_bound_check(&a, &b, 2.0).unwrap();
            prop_assert!(c.lhs <= c.rhs * (1.0 + 1e-9) + 1e-9);
        }

        #[test]
        fn w2_symmetric(seed in 0u64..100_000, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_gaussian(&mut rng, d);
            let b = random_gaussian(&mut rng, d);
            let ab = w2_gaussian(&a, &b).unwrap();
            let ba = w2_gaussian(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-7 * (1.0 + ab));
        }
    }
}

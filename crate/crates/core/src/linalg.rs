//! Dense linear algebra for symmetric positive (semi)definite matrices.
//!
//! Every kernel-matrix inversion in the crate goes through [`chol_psd`], which
//! retries with a geometrically growing diagonal jitter when the plain
//! factorization fails. The jitter that was finally used is recorded on the
//! factor so callers can reason about the matrix that was actually inverted.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Jitter ladder, expressed relative to the mean diagonal of the matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub start: f64,
    pub cap: f64,
    pub factor: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            start: 1e-10,
            cap: 1e-4,
            factor: 10.0,
        }
    }
}

impl JitterPolicy {
    /// No jitter at all: fail if the plain factorization fails.
    pub fn strict() -> Self {
        Self {
            start: 0.0,
            cap: 0.0,
            factor: 10.0,
        }
    }
}

/// Lower Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl CholFactor {
    pub fn lower(&self) -> Mat {
        self.chol.l()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `log det(A + jitter I)`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    /// `(A + jitter I)^{-1} B`; shapes are the caller's responsibility.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        self.chol.solve(b)
    }

    /// `L^{-1} B`.
    pub fn solve_lower(&self, b: &Mat) -> Mat {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn solve_lower_vec(&self, b: &Vector) -> Vector {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn inverse(&self) -> Mat {
        symmetrize(&self.chol.inverse())
    }
}

fn mean_diag(a: &Mat) -> f64 {
    let n = a.nrows().max(1);
    a.diagonal().iter().sum::<f64>() / n as f64
}

fn check_square(a: &Mat) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

fn check_symmetric(a: &Mat, rel_tol: f64) -> Result<()> {
    check_square(a)?;
    let n = a.nrows();
    let mut asym = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    let tolerance = rel_tol * a.norm();
    if asym > tolerance {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tolerance,
        });
    }
    Ok(())
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Cholesky factorization with a jitter ladder.
///
/// The plain factorization is tried first; on failure the jitter starts at
/// `policy.start * mean(diag(A))` and grows by `policy.factor` until it
/// exceeds `policy.cap * mean(diag(A))`.
pub fn chol_psd(a: &Mat, policy: &JitterPolicy) -> Result<CholFactor> {
    check_symmetric(a, 1e-12)?;
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(CholFactor {
            chol,
            jitter_used: 0.0,
        });
    }
    let scale = mean_diag(a).abs().max(f64::MIN_POSITIVE);
    let mut rel = policy.start;
    let mut last = 0.0;
    while rel > 0.0 && rel <= policy.cap * (1.0 + 1e-9) {
        let jitter = rel * scale;
        last = jitter;
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(CholFactor {
                chol,
                jitter_used: jitter,
            });
        }
        rel *= policy.factor;
    }
    Err(Error::JitterCapExceeded { jitter: last })
}

/// Solves `(A + jitter I) X = B` with two triangular solves.
pub fn solve_psd(f: &CholFactor, b: &Mat) -> Result<Mat> {
    if f.dim() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "factor is {0}x{0} but right-hand side has {1} rows",
            f.dim(),
            b.nrows()
        )));
    }
    Ok(f.chol.solve(b))
}

/// `tr(A B)` as the sum of elementwise products of `A` and `Bᵀ`.
pub fn trace_product(a: &Mat, b: &Mat) -> Result<f64> {
    if a.nrows() != b.ncols() || a.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "trace_product needs n×m and m×n, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(trace_of_product(a, b))
}

/// Unchecked `tr(A B)`; callers guarantee conforming shapes.
pub(crate) fn trace_of_product(a: &Mat, b: &Mat) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues are
/// clamped to zero.
pub fn sqrtm_psd(a: &Mat) -> Result<Mat> {
    check_symmetric(a, 1e-10)?;
    let eig = SymmetricEigen::new(symmetrize(a));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let scaled = v * Mat::from_diagonal(&roots);
    Ok(symmetrize(&(scaled * v.transpose())))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.total_cmp(y));
    vals
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_needs_no_jitter() {
        let f = chol_psd(&Mat::identity(3, 3), &JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        assert_relative_eq!(f.lower(), Mat::identity(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn two_by_two_factor() {
        let a = Mat::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
        let l = f.lower();
        assert_relative_eq!(l[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(l[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(l[(0, 1)], 0.0);
        assert_relative_eq!(&l * l.transpose(), a, epsilon = 1e-12);
    }

    #[test]
    fn rank_one_gets_jitter() {
        let a = Mat::from_element(2, 2, 1.0);
        let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
        assert!(f.jitter_used() > 0.0);
        let l = f.lower();
        let expect = &a + Mat::identity(2, 2) * f.jitter_used();
        assert_relative_eq!(&l * l.transpose(), expect, epsilon = 1e-12);
        for i in 0..2 {
            assert!(l[(i, i)] > 0.0);
        }
    }

    #[test]
    fn indefinite_matrix_exceeds_cap() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            chol_psd(&a, &JitterPolicy::default()),
            Err(Error::JitterCapExceeded { .. })
        ));
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            chol_psd(&a, &JitterPolicy::default()),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(matches!(sqrtm_psd(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_mat(&mut rng, 3, 2);
        let f = chol_psd(&Mat::identity(3, 3), &JitterPolicy::default()).unwrap();
        assert_relative_eq!(solve_psd(&f, &b).unwrap(), b, epsilon = 1e-15);

        let a = Mat::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
        let x = solve_psd(&f, &Mat::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        assert_relative_eq!(x[(0, 0)], 3.0 / 8.0, epsilon = 1e-14);
        assert_relative_eq!(x[(1, 0)], -0.25, epsilon = 1e-14);
        assert_relative_eq!(&a * &x, Mat::from_column_slice(2, 1, &[1.0, 0.0]), epsilon = 1e-14);

        let d = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 5.0]));
        let f = chol_psd(&d, &JitterPolicy::default()).unwrap();
        let inv = solve_psd(&f, &Mat::identity(2, 2)).unwrap();
        assert_relative_eq!(inv, Mat::from_diagonal(&Vector::from_vec(vec![0.5, 0.2])), epsilon = 1e-15);

        assert!(matches!(
            solve_psd(&f, &Mat::zeros(3, 1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn trace_product_examples() {
        let i2 = Mat::identity(2, 2);
        assert_eq!(trace_product(&i2, &i2).unwrap(), 2.0);
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(trace_product(&a, &b).unwrap(), (&a * &b).trace());
        assert_eq!(trace_product(&a, &b).unwrap(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_mat(&mut rng, 4, 3);
        assert_eq!(trace_product(&a, &Mat::zeros(3, 4)).unwrap(), 0.0);
        assert!(trace_product(&a, &Mat::zeros(4, 3)).is_err());
    }

    #[test]
    fn sqrtm_examples() {
        let d = Mat::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        assert_relative_eq!(
            sqrtm_psd(&d).unwrap(),
            Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0])),
            epsilon = 1e-14
        );
        assert_relative_eq!(sqrtm_psd(&Mat::identity(3, 3)).unwrap(), Mat::identity(3, 3), epsilon = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_mat(&mut rng, 3, 3);
        let a = w.transpose() * &w;
        let s = sqrtm_psd(&a).unwrap();
        assert!((&s * &s - &a).norm() / a.norm() < 1e-8);
    }

    fn random_spd(seed: u64, n: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_mat(&mut rng, n, n);
        symmetrize(&(w.transpose() * &w + Mat::identity(n, n) * (0.1 * n as f64)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn solve_round_trip(seed in 0u64..10_000, n in 1usize..50) {
            let a = random_spd(seed, n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x0 = random_mat(&mut rng, n, 2);
            let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
            let x = solve_psd(&f, &(&a * &x0)).unwrap();
            prop_assert!((&x - &x0).norm() / x0.norm() < 1e-8);
            let l = f.lower();
            prop_assert!((&l * l.transpose() - &a).norm() / a.norm() < 1e-10);
        }

        #[test]
        fn trace_matches_naive_on_integers(seed in 0u64..10_000, n in 1usize..8, m in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_fn(n, m, |_, _| rng.random_range(-5i32..6) as f64);
            let b = Mat::from_fn(m, n, |_, _| rng.random_range(-5i32..6) as f64);
            prop_assert_eq!(trace_product(&a, &b).unwrap(), (&a * &b).trace());
        }

        #[test]
        fn sqrtm_is_symmetric_psd(seed in 0u64..10_000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_mat(&mut rng, n, n);
            let a = symmetrize(&(w.transpose() * &w));
            let s = sqrtm_psd(&a).unwrap();
            prop_assert!((&s - s.transpose()).amax() <= 1e-12 * a.norm().max(1.0));
            let min_eig = sym_eigenvalues(&s)[0];
            prop_assert!(min_eig >= -1e-10 * a.norm().max(1.0));
        }
    }
}

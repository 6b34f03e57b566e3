//! Matrix functions: exponential, SPD square root, pseudo-inverse and
//! zero-order-hold discretization.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{NumError, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
const SYM_TOL: f64 = 1e-9;

pub fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(NumError::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite(what))
    }
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = max_abs(m).max(1.0);
    (m - m.transpose()).iter().all(|v| v.abs() <= SYM_TOL * scale)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// `exp(M)` by scaling and squaring with a degree-13 Padé approximant.
pub fn matrix_exponential(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(m, "matrix_exponential input")?;
    check_finite(m, "matrix_exponential input")?;
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    Ok(m.exp())
}

/// Unique symmetric positive definite `S` with `S·S = M`.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(m, "spd_sqrt input")?;
    check_finite(m, "spd_sqrt input")?;
    if !is_symmetric(m) {
        return Err(NumError::NotSpd("input is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l <= 1e-14 * scale) {
        return Err(NumError::NotSpd(format!("eigenvalue {bad:e}")));
    }
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(symmetrize(&s))
}

/// Moore–Penrose pseudo-inverse via the SVD, with the usual
/// `max(rows, cols)·eps·σ_max` rank cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(m, "pseudo_inverse input")?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * smax;
    svd.pseudo_inverse(cutoff)
        .map_err(|e| NumError::Singular(e.to_string()))
}

/// Exact sampling of `ẋ = A x + B u` under a zero-order hold of length `dt`.
///
/// Uses the augmented exponential `exp([[A, B], [0, 0]]·dt) = [[Ad, Bd], [0, I]]`.
pub fn zoh_discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = check_square(a, "A")?;
    if b.nrows() != n {
        return Err(NumError::Dimension(format!(
            "B has {} rows, A is {n}x{n}",
            b.nrows()
        )));
    }
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = matrix_exponential(&aug)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Spectral radius (largest eigenvalue modulus) of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = matrix_exponential(&DMatrix::zeros(3, 3)).unwrap();
        assert!((e - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn exp_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::dvector![0.3, -1.7]);
        let e = matrix_exponential(&m).unwrap();
        assert!((e[(0, 0)] - 0.3_f64.exp()).abs() <= 1e-12 * 0.3_f64.exp());
        assert!((e[(1, 1)] - (-1.7_f64).exp()).abs() <= 1e-12 * (-1.7_f64).exp());
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn exp_of_nilpotent() {
        let m = nalgebra::dmatrix![0.0, 1.0; 0.0, 0.0];
        let e = matrix_exponential(&m).unwrap();
        let want = nalgebra::dmatrix![1.0, 1.0; 0.0, 1.0];
        assert!((e - want).amax() < 1e-15);
    }

    #[test]
    fn exp_rejects_rectangular() {
        assert!(matrix_exponential(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let s = spd_sqrt(&DMatrix::identity(3, 3)).unwrap();
        assert!((s - DMatrix::identity(3, 3)).amax() < 1e-15);
        let s = spd_sqrt(&DMatrix::from_diagonal(&nalgebra::dvector![4.0, 9.0])).unwrap();
        assert!((s - DMatrix::from_diagonal(&nalgebra::dvector![2.0, 3.0])).amax() < 1e-14);
    }

    #[test]
    fn sqrt_of_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 4);
            let m = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            let s = spd_sqrt(&m).unwrap();
            assert!((&s * &s - &m).amax() <= 1e-10);
            assert!((&s - s.transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let m = nalgebra::dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(matches!(spd_sqrt(&m), Err(NumError::NotSpd(_))));
        let m = nalgebra::dmatrix![1.0, 2.0; 0.0, 1.0];
        assert!(spd_sqrt(&m).is_err());
    }

    #[test]
    fn pinv_small_cases() {
        let p = pseudo_inverse(&DMatrix::identity(3, 3)).unwrap();
        assert!((p - DMatrix::identity(3, 3)).amax() < 1e-15);
        let p = pseudo_inverse(&nalgebra::dmatrix![2.0]).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pinv_penrose_identities_on_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 5, 2);
        let b = random_matrix(&mut rng, 2, 4);
        let m = a * b;
        let p = pseudo_inverse(&m).unwrap();
        assert!((&m * &p * &m - &m).amax() <= 1e-10);
        assert!((&p * &m * &p - &p).amax() <= 1e-10);
        let mp = &m * &p;
        let pm = &p * &m;
        assert!((&mp - mp.transpose()).amax() <= 1e-10);
        assert!((&pm - pm.transpose()).amax() <= 1e-10);
    }

    #[test]
    fn zoh_of_scalar_integrator() {
        let a = nalgebra::dmatrix![0.0];
        let b = nalgebra::dmatrix![1.0];
        let (ad, bd) = zoh_discretize(&a, &b, 0.5).unwrap();
        assert!((ad[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((bd[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_of_scalar_decay() {
        let (ad, bd) = zoh_discretize(&nalgebra::dmatrix![-2.0], &nalgebra::dmatrix![3.0], 0.1).unwrap();
        let e = (-0.2_f64).exp();
        assert!((ad[(0, 0)] - e).abs() < 1e-14);
        assert!((bd[(0, 0)] - 3.0 * (1.0 - e) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let m = nalgebra::dmatrix![0.0, -0.5; 0.5, 0.0];
        assert!((spectral_radius(&m) - 0.5).abs() < 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn exp_times_exp_of_negative_is_identity(entries in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let m = DMatrix::from_row_slice(4, 4, &entries);
            let e = matrix_exponential(&m).unwrap();
            let f = matrix_exponential(&(-&m)).unwrap();
            proptest::prop_assert!((e * f - DMatrix::identity(4, 4)).amax() <= 1e-9);
        }
    }
}

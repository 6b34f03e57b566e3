//! Discrete-time algebraic Riccati equation.

use nalgebra::DMatrix;

use crate::linalg::{check_finite, check_square, max_abs, spectral_radius, symmetrize};
use crate::{NumError, Result};

const MAX_DOUBLING_STEPS: usize = 100;
const MAX_REFINE_STEPS: usize = 50;

/// Stabilizing DARE solution and the associated LQR gain (`u = K x`).
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Induced ∞-norm of the Riccati residual at `p`.
    pub residual: f64,
}

/// One application of the Riccati map
/// `A'PA − A'PB(R + B'PB)⁻¹B'PA + Q`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let chol = s
        .cholesky()
        .ok_or_else(|| NumError::NotSpd("R + B'PB".into()))?;
    let gain = chol.solve(&(pb.transpose() * a));
    let next = a.transpose() * &pa - a.transpose() * &pb * gain + q;
    Ok(symmetrize(&next))
}

fn induced_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖P − (A'PA − A'PB(R + B'PB)⁻¹B'PA + Q)‖∞` (induced ∞-norm).
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let next = riccati_map(a, b, q, r, p)?;
    Ok(induced_inf_norm(&(p - next)))
}

/// Solves the DARE with the structure-preserving doubling algorithm, then
/// polishes with a few fixed-point Riccati steps.
///
/// Requires `(A, B)` stabilizable, `Q ⪰ 0` and `R ≻ 0`. Fails when the
/// doubling iteration does not converge or the resulting gain is not
/// stabilizing.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution> {
    let n = check_square(a, "A")?;
    let m = check_square(r, "R")?;
    if b.nrows() != n || b.ncols() != m || q.nrows() != n || q.ncols() != n {
        return Err(NumError::Dimension(format!(
            "DARE expects A {n}x{n}, B {n}x{m}, Q {n}x{n}, R {m}x{m}; got B {}x{}, Q {}x{}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    for (mat, what) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        check_finite(mat, what)?;
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| NumError::NotSpd("R".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);

    // SDA: A_k → 0, G_k → controllability-type Gramian, H_k → P.
    let mut ak = a.clone();
    let mut gk = symmetrize(&(b * r_chol.solve(&b.transpose())));
    let mut hk = symmetrize(q);
    let mut converged = false;
    for _ in 0..MAX_DOUBLING_STEPS {
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let w_inv_a = lu
            .solve(&ak)
            .ok_or_else(|| NumError::Singular("I + G H in doubling step".into()))?;
        let w_inv_g = lu
            .solve(&gk)
            .ok_or_else(|| NumError::Singular("I + G H in doubling step".into()))?;
        let a_next = &ak * &w_inv_a;
        let g_next = symmetrize(&(&gk + &ak * w_inv_g * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_inv_a));
        if !h_next.iter().all(|v| v.is_finite()) {
            return Err(NumError::NoConvergence {
                what: "DARE doubling",
                iterations: MAX_DOUBLING_STEPS,
            });
        }
        let delta = max_abs(&(&h_next - &hk));
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= 1e-15 * max_abs(&hk).max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumError::NoConvergence {
            what: "DARE doubling",
            iterations: MAX_DOUBLING_STEPS,
        });
    }

    let mut p = hk;
    let mut residual = dare_residual(a, b, q, r, &p)?;
    for _ in 0..MAX_REFINE_STEPS {
        let next = riccati_map(a, b, q, r, &p)?;
        let next_res = dare_residual(a, b, q, r, &next)?;
        if next_res >= residual {
            break;
        }
        p = next;
        residual = next_res;
    }

    let s = r + b.transpose() * &p * b;
    let k = -s
        .cholesky()
        .ok_or_else(|| NumError::NotSpd("R + B'PB".into()))?
        .solve(&(b.transpose() * &p * a));
    if spectral_radius(&(a + b * &k)) >= 1.0 {
        return Err(NumError::NoConvergence {
            what: "DARE (gain is not stabilizing)",
            iterations: MAX_DOUBLING_STEPS,
        });
    }
    Ok(DareSolution { p, k, residual })
}

//! Maximal positively invariant sets of linear closed loops.

use nalgebra::DMatrix;
use numkit::{dare_solve, Polyhedron};

use crate::mpc::LinearMpcProblem;
use crate::{Error, Result};

const SUPPORT_TOL: f64 = 1e-9;

/// Largest subset of `constraints` that `x⁺ = a_cl x` never leaves.
///
/// Adds the rows of `C a_clᵏ` for k = 1, 2, … until a whole block is
/// redundant, then prunes redundant rows. Errors after `max_iter` blocks.
pub fn max_positive_invariant(a_cl: &DMatrix<f64>, constraints: &Polyhedron, max_iter: usize) -> Result<Polyhedron> {
    let n = constraints.dim();
    if a_cl.nrows() != n || a_cl.ncols() != n {
        return Err(Error::Dimension("closed-loop matrix does not match the constraint set".into()));
    }
    let mut set = constraints.remove_redundant(SUPPORT_TOL)?;
    let base = set.clone();
    let mut power = a_cl.clone();
    for _ in 0..max_iter {
        let rows = &base.a * &power;
        let mut added = Vec::new();
        for r in 0..rows.nrows() {
            let dir = rows.row(r).transpose();
            let redundant = match set.support(&dir)? {
                Some(v) => v <= base.b[r] + SUPPORT_TOL * (1.0 + base.b[r].abs()),
                None => false,
            };
            if !redundant {
                added.push(r);
            }
        }
        if added.is_empty() {
            return Ok(set.remove_redundant(SUPPORT_TOL)?);
        }
        let extra = Polyhedron::new(
            DMatrix::from_fn(added.len(), n, |i, j| rows[(added[i], j)]),
            nalgebra::DVector::from_iterator(added.len(), added.iter().map(|&r| base.b[r])),
        )?;
        set = set.intersect(&extra)?;
        power = a_cl * &power;
    }
    Err(Error::Num(numkit::NumError::NoConvergence {
        what: "invariant set iteration",
        iterations: max_iter,
    }))
}

/// Maximal positively invariant set of the LQR closed loop `A + BK` inside
/// the state box and `{x : Kx ∈ U}`, in the problem's deviation coordinates.
pub fn terminal_invariant_set(prob: &LinearMpcProblem) -> Result<Polyhedron> {
    terminal_invariant_set_with(prob, 100)
}

pub fn terminal_invariant_set_with(prob: &LinearMpcProblem, max_iter: usize) -> Result<Polyhedron> {
    let lqr = dare_solve(&prob.a, &prob.b, &prob.q, &prob.r)?;
    let a_cl = &prob.a + &prob.b * &lqr.k;
    let mut set: Option<Polyhedron> = prob.state_box.as_ref().map(|sb| sb.to_polyhedron());
    if let Some(us) = &prob.input_set {
        let through_k = Polyhedron::new(&us.a * &lqr.k, us.b.clone())?;
        set = Some(match set {
            Some(s) => s.intersect(&through_k)?,
            None => through_k,
        });
    }
    let set = set.ok_or_else(|| Error::InvalidProblem("terminal set needs state or input constraints".into()))?;
    if set.is_empty()? {
        return Err(Error::InvalidProblem("terminal constraint set is empty".into()));
    }
    max_positive_invariant(&a_cl, &set, max_iter)
}

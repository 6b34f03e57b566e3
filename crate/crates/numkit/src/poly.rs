//! H-representation polyhedra `{x : Ax ≤ b}`.

use nalgebra::{DMatrix, DVector};

use crate::lp::{lp_feasible, lp_solve, LpOutcome};
use crate::{NumError, Result};

/// `{x : a x ≤ b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polyhedron {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(NumError::Dimension(format!(
                "polyhedron has {} rows but {} offsets",
                a.nrows(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    /// Axis-aligned box `lower ≤ x ≤ upper`, rows ordered upper bounds first.
    pub fn from_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = lower.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(i, i)] = 1.0;
            b[i] = upper[i];
            a[(n + i, i)] = -1.0;
            b[n + i] = -lower[i];
        }
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_halfspaces(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.a.nrows()).all(|i| self.a.row(i).dot(&x.transpose()) <= self.b[i] + tol * (1.0 + self.b[i].abs()))
    }

    /// Largest constraint violation `max_i (a_i x − b_i)`, or −∞ without rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (0..self.a.nrows())
            .map(|i| self.a.row(i).dot(&x.transpose()) - self.b[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(!lp_feasible(&self.a, &self.b)?)
    }

    pub fn intersect(&self, other: &Polyhedron) -> Result<Polyhedron> {
        if self.dim() != other.dim() {
            return Err(NumError::Dimension("intersecting polyhedra of different dimension".into()));
        }
        let mut a = DMatrix::zeros(self.a.nrows() + other.a.nrows(), self.dim());
        a.rows_mut(0, self.a.nrows()).copy_from(&self.a);
        a.rows_mut(self.a.nrows(), other.a.nrows()).copy_from(&other.a);
        let b = DVector::from_iterator(a.nrows(), self.b.iter().chain(other.b.iter()).copied());
        Polyhedron::new(a, b)
    }

    /// Chebyshev ball: center and radius of the largest inscribed ball, with
    /// the radius capped at `cap` so unbounded sets stay well posed.
    /// `None` when the set is empty.
    pub fn chebyshev(&self, cap: f64) -> Result<Option<(DVector<f64>, f64)>> {
        let n = self.dim();
        let rows = self.a.nrows();
        let mut a = DMatrix::zeros(rows + 1, n + 1);
        let mut b = DVector::zeros(rows + 1);
        for i in 0..rows {
            for j in 0..n {
                a[(i, j)] = self.a[(i, j)];
            }
            a[(i, n)] = self.a.row(i).norm();
            b[i] = self.b[i];
        }
        a[(rows, n)] = 1.0;
        b[rows] = cap;
        let mut c = DVector::zeros(n + 1);
        c[n] = -1.0;
        match lp_solve(&c, &a, &b)? {
            // A negative optimal radius certifies emptiness.
            LpOutcome::Optimal { x, .. } if x[n] < -1e-12 => Ok(None),
            LpOutcome::Optimal { x, .. } => Ok(Some((x.rows(0, n).into_owned(), x[n].max(0.0)))),
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => unreachable!("radius is capped"),
        }
    }

    /// Whether the set has an interior ball of radius greater than `slack`.
    pub fn has_interior(&self, slack: f64) -> Result<bool> {
        Ok(matches!(self.chebyshev(1.0)?, Some((_, r)) if r > slack))
    }

    /// Drops halfspaces implied by the others. Rows are scaled to unit norm;
    /// zero rows are dropped (they never cut when the set is nonempty).
    pub fn remove_redundant(&self, tol: f64) -> Result<Polyhedron> {
        let n = self.dim();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..self.a.nrows() {
            let nrm = self.a.row(i).norm();
            if nrm > 0.0 {
                rows.push((self.a.row(i).transpose() / nrm, self.b[i] / nrm));
            }
        }
        let mut keep = vec![true; rows.len()];
        for i in 0..rows.len() {
            // maximize a_i x over the other kept rows plus a_i x ≤ b_i + 1
            let others: Vec<usize> = (0..rows.len()).filter(|&j| j != i && keep[j]).collect();
            let mut a = DMatrix::zeros(others.len() + 1, n);
            let mut b = DVector::zeros(others.len() + 1);
            for (r, &j) in others.iter().enumerate() {
                a.row_mut(r).copy_from(&rows[j].0.transpose());
                b[r] = rows[j].1;
            }
            a.row_mut(others.len()).copy_from(&rows[i].0.transpose());
            b[others.len()] = rows[i].1 + 1.0;
            let c = -&rows[i].0;
            match lp_solve(&c, &a, &b)? {
                LpOutcome::Optimal { value, .. } => {
                    if -value <= rows[i].1 + tol {
                        keep[i] = false;
                    }
                }
                // Empty set: everything is redundant except a certificate;
                // keep rows untouched.
                LpOutcome::Infeasible => return Ok(self.clone()),
                LpOutcome::Unbounded => unreachable!("row i is capped"),
            }
        }
        let kept: Vec<usize> = (0..rows.len()).filter(|&i| keep[i]).collect();
        let a = DMatrix::from_fn(kept.len(), n, |r, c| rows[kept[r]].0[c]);
        let b = DVector::from_fn(kept.len(), |r, _| rows[kept[r]].1);
        Polyhedron::new(a, b)
    }

    /// Maximum of `c'x` over the set (`None` if empty, `+∞` if unbounded).
    pub fn support(&self, c: &DVector<f64>) -> Result<Option<f64>> {
        Ok(match lp_solve(&(-c), &self.a, &self.b)? {
            LpOutcome::Optimal { value, .. } => Some(-value),
            LpOutcome::Unbounded => Some(f64::INFINITY),
            LpOutcome::Infeasible => None,
        })
    }
}

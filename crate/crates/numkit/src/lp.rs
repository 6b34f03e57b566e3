//! Small dense linear programs `min c'x  s.t.  Gx ≤ h` with free `x`.
//!
//! The solver runs a two-phase tableau simplex (Bland's rule) on the dual
//! standard form `min h'y  s.t.  G'y = −c, y ≥ 0`. That tableau has only
//! `dim(x)` rows, so polyhedra with hundreds of halfspaces in a handful of
//! dimensions stay cheap. The primal optimum is read off the simplex
//! multipliers.

use nalgebra::{DMatrix, DVector};

use crate::{NumError, Result};

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn optimal(&self) -> Option<(&DVector<f64>, f64)> {
        match self {
            LpOutcome::Optimal { x, value } => Some((x, *value)),
            _ => None,
        }
    }
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `(rows) × (cols + 1)`, last column is the right-hand side.
    t: Vec<f64>,
    basis: Vec<usize>,
}

enum SimplexEnd {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.cols + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let p = self.t[pr * w + pc];
        for j in 0..w {
            self.t[pr * w + j] /= p;
        }
        for i in 0..self.rows {
            if i == pr {
                continue;
            }
            let f = self.t[i * w + pc];
            if f != 0.0 {
                for j in 0..w {
                    self.t[i * w + j] -= f * self.t[pr * w + j];
                }
            }
        }
        self.basis[pr] = pc;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj -= cb * self.at(i, j);
                }
            }
        }
        d
    }

    fn objective(&self, cost: &[f64]) -> f64 {
        (0..self.rows).map(|i| cost[self.basis[i]] * self.rhs(i)).sum()
    }

    /// Minimizes `cost` over the current basis; only columns `< allowed` may enter.
    fn run(&mut self, cost: &[f64], allowed: usize, cap: usize, iters: &mut usize) -> Result<SimplexEnd> {
        let scale = cost.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        loop {
            *iters += 1;
            if *iters > cap {
                return Err(NumError::NoConvergence {
                    what: "simplex",
                    iterations: cap,
                });
            }
            let d = self.reduced_costs(cost);
            let Some(enter) = (0..allowed).find(|&j| d[j] < -COST_TOL * scale) else {
                return Ok(SimplexEnd::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, enter);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14 * lr.abs().max(1.0)
                                || (ratio <= lr + 1e-14 * lr.abs().max(1.0)
                                    && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return Ok(SimplexEnd::Unbounded),
                Some((li, _)) => self.pivot(li, enter),
            }
        }
    }
}

/// Unit-norm rows; `None` when a zero row proves the set empty.
fn normalize(g: &DMatrix<f64>, h: &DVector<f64>, tol: f64) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let mut keep = Vec::new();
    for i in 0..g.nrows() {
        let nrm = g.row(i).norm();
        if nrm == 0.0 {
            if h[i] < -tol * (1.0 + h[i].abs()) {
                return None;
            }
        } else {
            keep.push((i, nrm));
        }
    }
    let gn = DMatrix::from_fn(keep.len(), g.ncols(), |r, c| g[(keep[r].0, c)] / keep[r].1);
    let hn = DVector::from_fn(keep.len(), |r, _| h[keep[r].0] / keep[r].1);
    Some((gn, hn))
}

fn check_dims(c: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<()> {
    if g.ncols() != c.len() || g.nrows() != h.len() {
        return Err(NumError::Dimension(format!(
            "LP expects G {}x{} to match c {} and h {}",
            g.nrows(),
            g.ncols(),
            c.len(),
            h.len()
        )));
    }
    if !g.iter().chain(h.iter()).chain(c.iter()).all(|v| v.is_finite()) {
        return Err(NumError::NonFinite("LP data"));
    }
    Ok(())
}

enum DualResult {
    Optimal(DVector<f64>),
    DualInfeasible,
    DualUnbounded,
}

fn solve_dual_form(c: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<DualResult> {
    let n = c.len();
    let m = g.nrows();
    let cols = m + n;
    let mut t = vec![0.0; n * (cols + 1)];
    let mut sign = vec![1.0; n];
    for i in 0..n {
        let b = -c[i];
        sign[i] = if b < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            t[i * (cols + 1) + j] = sign[i] * g[(j, i)];
        }
        t[i * (cols + 1) + m + i] = 1.0;
        t[i * (cols + 1) + cols] = sign[i] * b;
    }
    let mut tab = Tableau {
        rows: n,
        cols,
        t,
        basis: (m..m + n).collect(),
    };
    let cap = 50 * (m + n) + 100;
    let mut iters = 0;

    let mut phase1 = vec![0.0; cols];
    phase1[m..].iter_mut().for_each(|v| *v = 1.0);
    tab.run(&phase1, m, cap, &mut iters)?;
    let b_scale = 1.0 + c.amax();
    if tab.objective(&phase1) > 1e-9 * b_scale {
        return Ok(DualResult::DualInfeasible);
    }
    // Drive zero-level artificials out of the basis where possible.
    for i in 0..n {
        if tab.basis[i] >= m {
            if let Some(j) = (0..m).find(|&j| tab.at(i, j).abs() > 1e-9) {
                tab.pivot(i, j);
            }
        }
    }

    let mut phase2 = vec![0.0; cols];
    phase2[..m].copy_from_slice(h.as_slice());
    match tab.run(&phase2, m, cap, &mut iters)? {
        SimplexEnd::Unbounded => Ok(DualResult::DualUnbounded),
        SimplexEnd::Optimal => {
            let d = tab.reduced_costs(&phase2);
            let x = DVector::from_fn(n, |i, _| -d[m + i] * sign[i]);
            Ok(DualResult::Optimal(x))
        }
    }
}

/// Whether `{x : Gx ≤ h}` is nonempty.
pub fn lp_feasible(g: &DMatrix<f64>, h: &DVector<f64>) -> Result<bool> {
    let c = DVector::zeros(g.ncols());
    check_dims(&c, g, h)?;
    let Some((gn, hn)) = normalize(g, h, 1e-9) else {
        return Ok(false);
    };
    Ok(match solve_dual_form(&c, &gn, &hn)? {
        DualResult::Optimal(_) => true,
        DualResult::DualUnbounded => false,
        DualResult::DualInfeasible => unreachable!("c = 0 makes y = 0 dual feasible"),
    })
}

/// Solves `min c'x  s.t.  Gx ≤ h`.
pub fn lp_solve(c: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<LpOutcome> {
    check_dims(c, g, h)?;
    let Some((gn, hn)) = normalize(g, h, 1e-9) else {
        return Ok(LpOutcome::Infeasible);
    };
    match solve_dual_form(c, &gn, &hn)? {
        DualResult::Optimal(x) => {
            let value = c.dot(&x);
            Ok(LpOutcome::Optimal { x, value })
        }
        DualResult::DualUnbounded => Ok(LpOutcome::Infeasible),
        DualResult::DualInfeasible => {
            if lp_feasible(g, h)? {
                Ok(LpOutcome::Unbounded)
            } else {
                Ok(LpOutcome::Infeasible)
            }
        }
    }
}

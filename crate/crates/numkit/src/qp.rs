//! Dense active-set quadratic programming.
//!
//! Two entry points share the same conventions:
//!
//! * [`solve_qp`]: `min ½u'Hu + q'u  s.t.  Gu ≤ h`, solved with the
//!   Goldfarb–Idnani dual active-set method (no phase 1, infeasibility is
//!   detected on the way).
//! * [`solve_nonneg_qp`]: `min z'Mz + c'z  s.t.  z ≥ 0`, solved with a primal
//!   active-set method on coordinate bounds. [`NonnegQp`] is the
//!   allocation-free workspace behind it, used in training hot loops.
//!
//! Both return the exact active set at the optimum, which the backward pass
//! and region enumeration rely on.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{check_finite, check_square};
use crate::{NumError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    /// One multiplier per inequality, zero for inactive rows.
    pub dual: DVector<f64>,
    /// Indices of the inequalities in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// KKT residual tolerance.
    pub tol: f64,
    /// Iteration cap; `None` means `50 · (number of inequalities)`, at least 50.
    pub max_iter: Option<usize>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: None,
        }
    }
}

impl QpOptions {
    fn cap(&self, rows: usize) -> usize {
        self.max_iter.unwrap_or_else(|| (50 * rows).max(50))
    }
}

/// KKT residuals of a candidate for `min ½u'Hu + q'u  s.t.  Gu ≤ h`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_infeasibility)
            .max(self.dual_infeasibility)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    primal: &DVector<f64>,
    dual: &DVector<f64>,
) -> KktResiduals {
    let stat = h * primal + q + g.transpose() * dual;
    let slack = b - g * primal;
    let mut out = KktResiduals {
        stationarity: stat.amax(),
        ..Default::default()
    };
    for i in 0..b.len() {
        out.primal_infeasibility = out.primal_infeasibility.max(-slack[i]);
        out.dual_infeasibility = out.dual_infeasibility.max(-dual[i]);
        out.complementarity = out.complementarity.max((dual[i] * slack[i]).abs());
    }
    out
}

/// Solves `min ½u'Hu + q'u  s.t.  Gu ≤ h` for SPD `H`.
///
/// Returns `Err` only for malformed input (dimensions, non-finite entries,
/// `H` not SPD). Infeasibility and the iteration cap are reported through
/// [`QpSolution::status`].
pub fn solve_qp(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution> {
    solve_qp_with(h, q, g, b, &QpOptions::default())
}

pub fn solve_qp_with(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let n = check_square(h, "H")?;
    let p = g.nrows();
    if q.len() != n || g.ncols() != n || b.len() != p {
        return Err(NumError::Dimension(format!(
            "QP expects H {n}x{n}, q {n}, G px{n}, h p; got q {}, G {}x{}, h {}",
            q.len(),
            g.nrows(),
            g.ncols(),
            b.len()
        )));
    }
    check_finite(h, "H")?;
    check_finite(g, "G")?;
    if !q.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(NumError::NonFinite("q or h"));
    }
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| NumError::NotSpd("QP Hessian".into()))?;

    // Unit-norm rows; zero rows are constant constraints.
    let mut norms = vec![0.0; p];
    let mut rows = g.clone();
    let mut rhs = b.clone();
    let mut always_inactive = vec![false; p];
    for i in 0..p {
        let nrm = g.row(i).norm();
        norms[i] = nrm;
        if nrm == 0.0 {
            if b[i] < -opts.tol * (1.0 + b[i].abs()) {
                return Ok(QpSolution {
                    primal: -chol.solve(q),
                    dual: DVector::zeros(p),
                    active_set: Vec::new(),
                    status: QpStatus::Infeasible,
                    iterations: 0,
                });
            }
            always_inactive[i] = true;
        } else {
            rows.row_mut(i).scale_mut(1.0 / nrm);
            rhs[i] /= nrm;
        }
    }

    let mut x = -chol.solve(q);
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let cap = opts.cap(p);
    let mut iterations = 0;
    let feas_tol = |i: usize| opts.tol * (1.0 + rhs[i].abs());

    let status = 'outer: loop {
        // Most violated constraint (largest positive Gx − h).
        let mut pick = None;
        let mut worst = 0.0;
        for i in 0..p {
            if always_inactive[i] || active.contains(&i) {
                continue;
            }
            let viol = rows.row(i).dot(&x.transpose()) - rhs[i];
            if viol > feas_tol(i) && viol > worst {
                worst = viol;
                pick = Some(i);
            }
        }
        let Some(cp) = pick else {
            break QpStatus::Solved;
        };
        let np: DVector<f64> = -rows.row(cp).transpose();
        let bp = -rhs[cp];
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > cap {
                break 'outer QpStatus::MaxIter;
            }
            let k = active.len();
            let hn = chol.solve(&np);
            let (z, r) = if k == 0 {
                (hn.clone(), DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(n, k, |row, j| -rows[(active[j], row)]);
                let hnm = chol.solve(&nmat);
                let s = nmat.transpose() * &hnm;
                let schol = s.cholesky().ok_or_else(|| {
                    NumError::Singular("active constraint normals became dependent".into())
                })?;
                let r = schol.solve(&(nmat.transpose() * &hn));
                (&hn - &hnm * &r, r)
            };
            let zn = z.dot(&np);
            let full_step_possible = zn > 1e-12 * np.dot(&hn).max(f64::MIN_POSITIVE);

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for j in 0..k {
                if r[j] > 1e-14 {
                    let t = mult[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let sp = np.dot(&x) - bp;
            let t2 = if full_step_possible {
                (-sp / zn).max(0.0)
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            if t2.is_infinite() {
                for j in 0..k {
                    mult[j] -= t1 * r[j];
                }
                up += t1;
                let j = drop.expect("finite t1 has an index");
                active.remove(j);
                mult.remove(j);
                continue;
            }
            let t = t1.min(t2);
            x += &z * t;
            for j in 0..k {
                mult[j] -= t * r[j];
            }
            up += t;
            if t2 <= t1 {
                active.push(cp);
                mult.push(up);
                break;
            }
            let j = drop.expect("finite t1 has an index");
            active.remove(j);
            mult.remove(j);
        }
    };

    let mut dual = DVector::zeros(p);
    if status == QpStatus::Solved {
        for (idx, &i) in active.iter().enumerate() {
            dual[i] = mult[idx].max(0.0) / norms[i];
        }
    }
    let mut active_set = active;
    active_set.sort_unstable();
    let mut status = status;
    if status == QpStatus::Solved {
        let res = kkt_residuals(h, q, g, b, &x, &dual);
        let scale = 1.0 + q.amax() + b.amax();
        if res.max() > opts.tol * scale * 1e3 {
            status = QpStatus::MaxIter;
        }
    }
    Ok(QpSolution {
        primal: x,
        dual,
        active_set,
        status,
        iterations,
    })
}

/// Reusable workspace for `min z'Mz + c'z  s.t.  z ≥ 0`.
///
/// `M` is passed row-major. After [`NonnegQp::solve`], `z`, `lambda` and
/// `free` hold the optimum, the multipliers (`λ = 2Mz + c`) and the
/// complement of the working set.
#[derive(Debug, Clone, Default)]
pub struct NonnegQp {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub free: Vec<bool>,
    pub iterations: usize,
    idx: Vec<usize>,
    sub: Vec<f64>,
    rhs: Vec<f64>,
    cand: Vec<f64>,
}

impl NonnegQp {
    pub fn new(n: usize) -> Self {
        let mut ws = Self::default();
        ws.resize(n);
        ws
    }

    fn resize(&mut self, n: usize) {
        if self.z.len() != n {
            self.z = vec![0.0; n];
            self.lambda = vec![0.0; n];
            self.free = vec![false; n];
            self.idx = Vec::with_capacity(n);
            self.sub = vec![0.0; n * n];
            self.rhs = vec![0.0; n];
            self.cand = vec![0.0; n];
        }
    }

    /// Solves the equality subproblem on the free set into `cand`.
    fn solve_free(&mut self, m: &[f64], c: &[f64], n: usize) -> Result<()> {
        self.idx.clear();
        self.idx.extend((0..n).filter(|&i| self.free[i]));
        let k = self.idx.len();
        for (a, &i) in self.idx.iter().enumerate() {
            for (b, &j) in self.idx.iter().enumerate() {
                self.sub[a * k + b] = 2.0 * m[i * n + j];
            }
            self.rhs[a] = -c[i];
        }
        cholesky_solve_in_place(&mut self.sub[..k * k], &mut self.rhs[..k], k)?;
        self.cand.iter_mut().for_each(|v| *v = 0.0);
        for (a, &i) in self.idx.iter().enumerate() {
            self.cand[i] = self.rhs[a];
        }
        Ok(())
    }

    pub fn solve(&mut self, m: &[f64], c: &[f64], tol: f64, cap: usize) -> Result<QpStatus> {
        let n = c.len();
        if m.len() != n * n {
            return Err(NumError::Dimension(format!(
                "nonneg QP: M has {} entries for n = {n}",
                m.len()
            )));
        }
        self.resize(n);
        self.z.iter_mut().for_each(|v| *v = 0.0);
        self.free.iter_mut().for_each(|v| *v = false);
        self.iterations = 0;
        let scale = c.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let dual_tol = tol * scale;
        let mut last_released = None;

        loop {
            self.iterations += 1;
            if self.iterations > cap {
                self.update_multipliers(m, c, n);
                return Ok(QpStatus::MaxIter);
            }
            self.solve_free(m, c, n)?;
            // Largest feasible step from z towards the subproblem optimum.
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..n {
                if self.free[i] && self.cand[i] <= 0.0 {
                    let denom = self.z[i] - self.cand[i];
                    let a = if denom > 0.0 { self.z[i] / denom } else { 0.0 };
                    if a < alpha {
                        alpha = a;
                        blocking = Some(i);
                    }
                }
            }
            if let Some(bi) = blocking {
                if alpha == 0.0 && last_released == Some(bi) {
                    // The released bound is only weakly active: its multiplier
                    // was negative by rounding. Keep it in the working set.
                    self.free[bi] = false;
                    self.update_multipliers(m, c, n);
                    self.lambda[bi] = self.lambda[bi].max(0.0);
                    return Ok(QpStatus::Solved);
                }
                last_released = None;
                for i in 0..n {
                    if self.free[i] {
                        self.z[i] += alpha * (self.cand[i] - self.z[i]);
                    }
                }
                self.z[bi] = 0.0;
                self.free[bi] = false;
                // Other coordinates that reached zero join the working set too.
                for i in 0..n {
                    if self.free[i] && self.z[i] <= 0.0 {
                        self.z[i] = 0.0;
                        self.free[i] = false;
                    }
                }
                continue;
            }
            self.z.copy_from_slice(&self.cand);
            self.update_multipliers(m, c, n);
            let mut release = None;
            let mut most_negative = -dual_tol;
            for i in 0..n {
                if !self.free[i] && self.lambda[i] < most_negative {
                    most_negative = self.lambda[i];
                    release = Some(i);
                }
            }
            last_released = release;
            match release {
                Some(i) => self.free[i] = true,
                None => return Ok(QpStatus::Solved),
            }
        }
    }

    fn update_multipliers(&mut self, m: &[f64], c: &[f64], n: usize) {
        for i in 0..n {
            if self.free[i] {
                self.lambda[i] = 0.0;
            } else {
                let mut acc = c[i];
                for j in 0..n {
                    acc += 2.0 * m[i * n + j] * self.z[j];
                }
                self.lambda[i] = acc;
            }
        }
    }
}

/// In-place Cholesky factorization and solve of a small row-major SPD system.
pub fn cholesky_solve_in_place(a: &mut [f64], b: &mut [f64], k: usize) -> Result<()> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(NumError::NotSpd("reduced nonneg-QP Hessian".into()));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= a[i * k + p] * b[p];
        }
        b[i] = s / a[i * k + i];
    }
    for i in (0..k).rev() {
        let mut s = b[i];
        for p in (i + 1)..k {
            s -= a[p * k + i] * b[p];
        }
        b[i] = s / a[i * k + i];
    }
    Ok(())
}

/// Solves `min z'Mz + c'z  s.t.  z ≥ 0` for SPD `M`.
///
/// The feasible set contains the origin, so the status is never
/// `Infeasible`.
pub fn solve_nonneg_qp(m: &DMatrix<f64>, c: &DVector<f64>) -> Result<QpSolution> {
    solve_nonneg_qp_with(m, c, &QpOptions::default())
}

pub fn solve_nonneg_qp_with(
    m: &DMatrix<f64>,
    c: &DVector<f64>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let n = check_square(m, "M")?;
    if c.len() != n {
        return Err(NumError::Dimension(format!(
            "nonneg QP: M is {n}x{n}, c has {}",
            c.len()
        )));
    }
    check_finite(m, "M")?;
    let row_major: Vec<f64> = m.transpose().as_slice().to_vec();
    let mut ws = NonnegQp::new(n);
    let status = ws.solve(&row_major, c.as_slice(), opts.tol, opts.cap(n))?;
    Ok(QpSolution {
        primal: DVector::from_column_slice(&ws.z),
        dual: DVector::from_column_slice(&ws.lambda),
        active_set: (0..n).filter(|&i| !ws.free[i]).collect(),
        status,
        iterations: ws.iterations,
    })
}

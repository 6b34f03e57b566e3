//! Linear-quadratic MPC: problem data, condensing into a dense parametric QP,
//! its dual, and the implicit (oracle) controller.

use nalgebra::{DMatrix, DVector};
use numkit::linalg::{is_symmetric, min_eigenvalue, symmetrize};
use numkit::qp::{solve_qp, QpSolution, QpStatus};
use numkit::Polyhedron;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::serde_util::{mat, opt_poly, vector};
use crate::{Error, Result};

/// Axis-aligned box `lower ≤ x ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    #[serde(with = "vector")]
    pub lower: DVector<f64>,
    #[serde(with = "vector")]
    pub upper: DVector<f64>,
}

impl StateBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidProblem("box needs lower < upper componentwise".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn shifted(&self, offset: &DVector<f64>) -> StateBox {
        StateBox {
            lower: &self.lower + offset,
            upper: &self.upper + offset,
        }
    }

    pub fn to_polyhedron(&self) -> Polyhedron {
        Polyhedron::from_box(&self.lower, &self.upper)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| rng.gen_range(self.lower[i]..self.upper[i]))
    }
}

fn empty_vec() -> DVector<f64> {
    DVector::zeros(0)
}

/// Horizon-`H` linear-quadratic MPC in deviation coordinates around
/// `(x_ref, u_ref)`:
///
/// ```text
/// min  Σ_{k<H} x_k'Q x_k + u_k'R u_k + x_H'P x_H
/// s.t. x_{k+1} = A x_k + B u_k,  x_k ∈ X,  u_k ∈ U,  x_H ∈ X_H
/// ```
///
/// `x_ref`/`u_ref` only translate physical coordinates; empty means zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMpcProblem {
    #[serde(with = "mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "mat")]
    pub b: DMatrix<f64>,
    #[serde(with = "mat")]
    pub q: DMatrix<f64>,
    #[serde(with = "mat")]
    pub r: DMatrix<f64>,
    #[serde(with = "mat")]
    pub p: DMatrix<f64>,
    pub horizon: usize,
    #[serde(default)]
    pub state_box: Option<StateBox>,
    #[serde(default, with = "opt_poly")]
    pub input_set: Option<Polyhedron>,
    #[serde(default, with = "opt_poly")]
    pub terminal_set: Option<Polyhedron>,
    #[serde(default = "empty_vec", with = "vector")]
    pub x_ref: DVector<f64>,
    #[serde(default = "empty_vec", with = "vector")]
    pub u_ref: DVector<f64>,
}

impl LinearMpcProblem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn x_ref(&self) -> DVector<f64> {
        if self.x_ref.is_empty() {
            DVector::zeros(self.n())
        } else {
            self.x_ref.clone()
        }
    }

    pub fn u_ref(&self) -> DVector<f64> {
        if self.u_ref.is_empty() {
            DVector::zeros(self.m())
        } else {
            self.u_ref.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        let shape = |mat: &DMatrix<f64>, r: usize, c: usize, what: &str| -> Result<()> {
            if mat.nrows() != r || mat.ncols() != c {
                return Err(Error::Dimension(format!(
                    "{what} is {}x{}, expected {r}x{c}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if !mat.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidProblem(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        shape(&self.a, n, n, "A")?;
        shape(&self.b, n, m, "B")?;
        shape(&self.q, n, n, "Q")?;
        shape(&self.r, m, m, "R")?;
        shape(&self.p, n, n, "P")?;
        if n == 0 || m == 0 {
            return Err(Error::InvalidProblem("empty state or input dimension".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidProblem("horizon must be at least 1".into()));
        }
        for (mat, what) in [(&self.q, "Q"), (&self.p, "P")] {
            if !is_symmetric(mat) || min_eigenvalue(mat) < -1e-10 * mat.amax().max(1.0) {
                return Err(Error::InvalidProblem(format!("{what} must be symmetric PSD")));
            }
        }
        if !is_symmetric(&self.r) || min_eigenvalue(&self.r) <= 0.0 {
            return Err(Error::InvalidProblem("R must be symmetric PD".into()));
        }
        if !self.x_ref.is_empty() && self.x_ref.len() != n {
            return Err(Error::Dimension("x_ref length".into()));
        }
        if !self.u_ref.is_empty() && self.u_ref.len() != m {
            return Err(Error::Dimension("u_ref length".into()));
        }
        if let Some(sb) = &self.state_box {
            if sb.dim() != n {
                return Err(Error::Dimension("state box dimension".into()));
            }
            StateBox::new(sb.lower.clone(), sb.upper.clone())?;
        }
        for (poly, what, dim) in [
            (&self.input_set, "input set", m),
            (&self.terminal_set, "terminal set", n),
        ] {
            if let Some(p) = poly {
                if p.dim() != dim {
                    return Err(Error::Dimension(format!("{what} has dimension {}", p.dim())));
                }
                if p.is_empty()? {
                    return Err(Error::InvalidProblem(format!("{what} is empty")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("problem serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Dense parametric QP in the initial state `x`:
///
/// ```text
/// min_U  U'ΛU + x'ΓU   s.t.  ΦU ≤ Ωx + ω
/// ```
///
/// Rows are stacked as input constraints (k ascending), state-box
/// constraints at k = 1..H−1 (upper bounds then lower bounds per step),
/// then terminal constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedQp {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Λ, `Hm × Hm`, SPD.
    #[serde(with = "mat")]
    pub hessian: DMatrix<f64>,
    /// Γ, `n × Hm`.
    #[serde(with = "mat")]
    pub cross: DMatrix<f64>,
    /// Φ, `p × Hm`.
    #[serde(with = "mat")]
    pub ineq_matrix: DMatrix<f64>,
    /// Ω, `p × n`.
    #[serde(with = "mat")]
    pub ineq_state: DMatrix<f64>,
    /// ω, `p`.
    #[serde(with = "vector")]
    pub ineq_offset: DVector<f64>,
    #[serde(with = "vector")]
    pub x_ref: DVector<f64>,
    #[serde(with = "vector")]
    pub u_ref: DVector<f64>,
    /// State box on the initial state (deviation coordinates).
    pub state_box: Option<StateBox>,
    /// Input polyhedron (deviation coordinates), kept for the projection layer.
    #[serde(with = "opt_poly")]
    pub input_set: Option<Polyhedron>,
    pub problem_hash: String,
}

/// Eliminates the states from the MPC problem.
pub fn condense(prob: &LinearMpcProblem) -> Result<CondensedQp> {
    prob.validate()?;
    let n = prob.n();
    let m = prob.m();
    let h = prob.horizon;
    let nu = h * m;

    // Prediction x_k = T_k x0 + S_k U for k = 1..H.
    let mut powers = Vec::with_capacity(h + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for k in 1..=h {
        powers.push(&prob.a * &powers[k - 1]);
    }
    let mut t = DMatrix::zeros(h * n, n);
    let mut s = DMatrix::zeros(h * n, nu);
    for k in 1..=h {
        t.view_mut(((k - 1) * n, 0), (n, n)).copy_from(&powers[k]);
        for j in 0..k {
            let blk = &powers[k - 1 - j] * &prob.b;
            s.view_mut(((k - 1) * n, j * m), (n, m)).copy_from(&blk);
        }
    }
    let mut qbar = DMatrix::zeros(h * n, h * n);
    for k in 0..h {
        let w = if k + 1 == h { &prob.p } else { &prob.q };
        qbar.view_mut((k * n, k * n), (n, n)).copy_from(w);
    }
    let mut rbar = DMatrix::zeros(nu, nu);
    for k in 0..h {
        rbar.view_mut((k * m, k * m), (m, m)).copy_from(&prob.r);
    }
    let hessian = symmetrize(&(s.transpose() * &qbar * &s + rbar));
    let cross = (t.transpose() * &qbar * &s) * 2.0;
    if hessian.clone().cholesky().is_none() {
        return Err(Error::InvalidProblem("condensed Hessian is not positive definite".into()));
    }

    let mut phi_rows: Vec<DVector<f64>> = Vec::new();
    let mut omega_rows: Vec<DVector<f64>> = Vec::new();
    let mut offsets: Vec<f64> = Vec::new();
    if let Some(us) = &prob.input_set {
        for k in 0..h {
            for r in 0..us.num_halfspaces() {
                let mut row = DVector::zeros(nu);
                for j in 0..m {
                    row[k * m + j] = us.a[(r, j)];
                }
                phi_rows.push(row);
                omega_rows.push(DVector::zeros(n));
                offsets.push(us.b[r]);
            }
        }
    }
    if let Some(sb) = &prob.state_box {
        for k in 1..h {
            let sk = s.rows((k - 1) * n, n);
            let tk = t.rows((k - 1) * n, n);
            for i in 0..n {
                phi_rows.push(sk.row(i).transpose());
                omega_rows.push(-tk.row(i).transpose());
                offsets.push(sb.upper[i]);
            }
            for i in 0..n {
                phi_rows.push(-sk.row(i).transpose());
                omega_rows.push(tk.row(i).transpose());
                offsets.push(-sb.lower[i]);
            }
        }
    }
    if let Some(ts) = &prob.terminal_set {
        let sh = s.rows((h - 1) * n, n);
        let th = t.rows((h - 1) * n, n);
        let phi_t = &ts.a * sh;
        let omega_t = -(&ts.a * th);
        for r in 0..ts.num_halfspaces() {
            phi_rows.push(phi_t.row(r).transpose());
            omega_rows.push(omega_t.row(r).transpose());
            offsets.push(ts.b[r]);
        }
    }
    let p = offsets.len();
    let ineq_matrix = DMatrix::from_fn(p, nu, |i, j| phi_rows[i][j]);
    let ineq_state = DMatrix::from_fn(p, n, |i, j| omega_rows[i][j]);

    Ok(CondensedQp {
        n,
        m,
        horizon: h,
        hessian,
        cross,
        ineq_matrix,
        ineq_state,
        ineq_offset: DVector::from_vec(offsets),
        x_ref: prob.x_ref(),
        u_ref: prob.u_ref(),
        state_box: prob.state_box.clone(),
        input_set: prob.input_set.clone(),
        problem_hash: prob.hash(),
    })
}

impl CondensedQp {
    pub fn num_decisions(&self) -> usize {
        self.horizon * self.m
    }

    pub fn num_constraints(&self) -> usize {
        self.ineq_offset.len()
    }

    /// Right-hand side `Ωx + ω`.
    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.ineq_state * x + &self.ineq_offset
    }

    /// Objective `U'ΛU + x'ΓU`.
    pub fn objective(&self, u: &DVector<f64>, x: &DVector<f64>) -> f64 {
        u.dot(&(&self.hessian * u)) + (x.transpose() * &self.cross * u)[(0, 0)]
    }

    /// Solves the condensed QP at deviation state `x`.
    pub fn solve(&self, x: &DVector<f64>) -> Result<QpSolution> {
        if x.len() != self.n {
            return Err(Error::Dimension(format!("state has {} entries, expected {}", x.len(), self.n)));
        }
        let h = &self.hessian * 2.0;
        let q = self.cross.transpose() * x;
        Ok(solve_qp(&h, &q, &self.ineq_matrix, &self.rhs(x))?)
    }

    /// First move of the MPC law at deviation state `x`; `None` when the
    /// state is outside the feasible set.
    pub fn oracle_control(&self, x: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        if let Some(sb) = &self.state_box {
            if !sb.contains(x, 1e-12) {
                return Ok(None);
            }
        }
        let sol = self.solve(x)?;
        match sol.status {
            QpStatus::Solved => Ok(Some(sol.primal.rows(0, self.m).into_owned())),
            QpStatus::Infeasible => Ok(None),
            QpStatus::MaxIter => Err(Error::SolverStalled(format!(
                "condensed MPC QP after {} iterations",
                sol.iterations
            ))),
        }
    }

    /// [`Self::oracle_control`] in physical coordinates.
    pub fn oracle_control_physical(&self, x: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        Ok(self
            .oracle_control(&(x - &self.x_ref))?
            .map(|u| u + &self.u_ref))
    }
}

/// `U* = −½Λ⁻¹(Φ'λ + Γ'x)`.
pub fn recover_primal(c: &CondensedQp, dual: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = c
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidProblem("condensed Hessian is singular".into()))?;
    let rhs = c.ineq_matrix.transpose() * dual + c.cross.transpose() * x;
    Ok(chol.solve(&rhs) * -0.5)
}

/// Dual of the condensed QP:
///
/// ```text
/// min_{λ ≥ 0}  λ'M_d λ + c(x)'λ + x'K_c x,    c(x) = C x + ω
/// ```
///
/// with `M_d = ¼ΦΛ⁻¹Φ'`, `C = Ω + ½ΦΛ⁻¹Γ'` and `K_c = ¼ΓΛ⁻¹Γ'`. The
/// primal optimum equals minus the dual optimum.
#[derive(Debug, Clone)]
pub struct DualQp {
    pub hessian: DMatrix<f64>,
    pub lin_state: DMatrix<f64>,
    pub lin_offset: DVector<f64>,
    pub const_quad: DMatrix<f64>,
    /// Pairs of constraints that can never be active together (opposite
    /// parallel rows enclosing a slab of positive width).
    pub exclusive_pairs: Vec<(usize, usize)>,
    u_from_dual: DMatrix<f64>,
    u_from_state: DMatrix<f64>,
    phi: DMatrix<f64>,
    omega: DMatrix<f64>,
    offset: DVector<f64>,
    state_box: Option<StateBox>,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda: DVector<f64>,
    pub primal: DVector<f64>,
    /// Dual objective including the constant term.
    pub value: f64,
}

pub fn assemble_dual(c: &CondensedQp) -> Result<DualQp> {
    let chol = c
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidProblem("condensed Hessian is singular".into()))?;
    let linv_phit = chol.solve(&c.ineq_matrix.transpose());
    let linv_gamt = chol.solve(&c.cross.transpose());
    let hessian = symmetrize(&(&c.ineq_matrix * &linv_phit * 0.25));
    let lin_state = &c.ineq_state + &c.ineq_matrix * &linv_gamt * 0.5;
    let const_quad = symmetrize(&(&c.cross * &linv_gamt * 0.25));
    Ok(DualQp {
        exclusive_pairs: exclusive_pairs(&c.ineq_matrix, &c.ineq_state, &c.ineq_offset),
        hessian,
        lin_state,
        lin_offset: c.ineq_offset.clone(),
        const_quad,
        u_from_dual: linv_phit * -0.5,
        u_from_state: linv_gamt * -0.5,
        phi: c.ineq_matrix.clone(),
        omega: c.ineq_state.clone(),
        offset: c.ineq_offset.clone(),
        state_box: c.state_box.clone(),
    })
}

const PAIR_TOL: f64 = 1e-9;

fn exclusive_pairs(phi: &DMatrix<f64>, omega: &DMatrix<f64>, offset: &DVector<f64>) -> Vec<(usize, usize)> {
    let p = phi.nrows();
    let norms: Vec<f64> = (0..p).map(|i| phi.row(i).norm()).collect();
    let mut taken = vec![false; p];
    let mut pairs = Vec::new();
    for i in 0..p {
        if taken[i] || norms[i] <= PAIR_TOL {
            continue;
        }
        for j in i + 1..p {
            if taken[j] || norms[j] <= PAIR_TOL {
                continue;
            }
            let alpha = norms[i] / norms[j];
            let dir = (phi.row(i) + phi.row(j) * alpha).amax();
            let state = (omega.row(i) + omega.row(j) * alpha).amax();
            let scale = 1.0 + omega.row(i).amax();
            let width = offset[i] + alpha * offset[j];
            if dir <= PAIR_TOL * norms[i] && state <= PAIR_TOL * scale && width > PAIR_TOL * (1.0 + offset[i].abs()) {
                taken[i] = true;
                taken[j] = true;
                pairs.push((i, j));
                break;
            }
        }
    }
    pairs
}

impl DualQp {
    pub fn num_constraints(&self) -> usize {
        self.lin_offset.len()
    }

    /// `c(x) = C x + ω`.
    pub fn linear_term(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.lin_state * x + &self.lin_offset
    }

    pub fn constant(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.const_quad * x))
    }

    pub fn objective(&self, lambda: &DVector<f64>, x: &DVector<f64>) -> f64 {
        lambda.dot(&(&self.hessian * lambda)) + self.linear_term(x).dot(lambda) + self.constant(x)
    }

    /// `M_d + δ·Σ w_ij (e_i e_j' + e_j e_i')` over the exclusive pairs, with
    /// `w_ij = √(M_ii M_jj)` and δ chosen to maximize the smallest
    /// eigenvalue. Every minimizer of the lifted dual is a minimizer of the
    /// original one, since `λ_i λ_j = 0` at any optimum of the latter.
    pub fn lifted_hessian(&self) -> Result<DMatrix<f64>> {
        let m = &self.hessian;
        let p = m.nrows();
        let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
        let mut e = DMatrix::zeros(p, p);
        for &(i, j) in &self.exclusive_pairs {
            let w = (m[(i, i)] * m[(j, j)]).sqrt();
            e[(i, j)] = w;
            e[(j, i)] = w;
        }
        let lmin = |d: f64| min_eigenvalue(&(m + &e * d));
        // λ_min(M + δE) is concave in δ.
        let (mut lo, mut hi) = (0.0, 2.0);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut a = hi - g * (hi - lo);
        let mut b = lo + g * (hi - lo);
        let (mut fa, mut fb) = (lmin(a), lmin(b));
        for _ in 0..80 {
            if fa < fb {
                lo = a;
                a = b;
                fa = fb;
                b = lo + g * (hi - lo);
                fb = lmin(b);
            } else {
                hi = b;
                b = a;
                fb = fa;
                a = hi - g * (hi - lo);
                fa = lmin(a);
            }
        }
        let delta = 0.5 * (lo + hi);
        let lifted = symmetrize(&(m + &e * delta));
        let floor = 1e-9 * scale;
        let achieved = min_eigenvalue(&lifted);
        if achieved <= floor {
            return Err(Error::Construction(format!(
                "dual Hessian ({p}x{p}, {} exclusive pairs) cannot be made positive definite: \
                 best smallest eigenvalue {achieved:.3e} at δ = {delta:.3e}",
                self.exclusive_pairs.len()
            )));
        }
        Ok(lifted)
    }

    /// `U* = −½Λ⁻¹(Φ'λ + Γ'x)`.
    pub fn primal_from_dual(&self, lambda: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.u_from_dual * lambda + &self.u_from_state * x
    }

    /// Solves the dual at `x`; `None` when the primal is infeasible.
    ///
    /// Uses the lifted Hessian when one exists, otherwise a proximal-point
    /// iteration on the (possibly singular) dual.
    pub fn solve(&self, x: &DVector<f64>) -> Result<Option<DualSolution>> {
        if let Some(sb) = &self.state_box {
            if !sb.contains(x, 1e-12) {
                return Ok(None);
            }
        }
        let rhs = &self.omega * x + &self.offset;
        if !numkit::lp_feasible(&self.phi, &rhs)? {
            return Ok(None);
        }
        let p = self.num_constraints();
        let c = self.linear_term(x);
        // Rows without decision dependence are inert: their multiplier is 0.
        let live: Vec<usize> = (0..p).filter(|&i| self.phi.row(i).amax() > PAIR_TOL).collect();
        let lambda = if p == 0 {
            DVector::zeros(0)
        } else if let Ok(lifted) = self.lifted_hessian() {
            let sol = numkit::solve_nonneg_qp(&lifted, &c)?;
            if sol.status != QpStatus::Solved {
                return Err(Error::SolverStalled("lifted dual QP".into()));
            }
            sol.primal
        } else {
            self.proximal_solve(&live, &c)?
        };
        let primal = self.primal_from_dual(&lambda, x);
        Ok(Some(DualSolution {
            value: self.objective(&lambda, x),
            lambda,
            primal,
        }))
    }

    fn proximal_solve(&self, live: &[usize], c: &DVector<f64>) -> Result<DVector<f64>> {
        let k = live.len();
        let p = self.num_constraints();
        let mut lambda = DVector::zeros(p);
        if k == 0 {
            return Ok(lambda);
        }
        let sub = DMatrix::from_fn(k, k, |a, b| self.hessian[(live[a], live[b])]);
        let rho = 1e-2 * sub.diagonal().amax().max(1e-12);
        let mut reg = sub.clone();
        for i in 0..k {
            reg[(i, i)] += rho;
        }
        let reg_rm: Vec<f64> = reg.transpose().as_slice().to_vec();
        let mut ws = numkit::NonnegQp::new(k);
        let mut cur = vec![0.0; k];
        let mut shifted = vec![0.0; k];
        for _ in 0..20_000 {
            for a in 0..k {
                shifted[a] = c[live[a]] - 2.0 * rho * cur[a];
            }
            if ws.solve(&reg_rm, &shifted, 1e-12, 50 * k.max(1))? != QpStatus::Solved {
                return Err(Error::SolverStalled("proximal dual step".into()));
            }
            let change = ws
                .z
                .iter()
                .zip(&cur)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let size = ws.z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            cur.copy_from_slice(&ws.z);
            if change <= 1e-14 * size {
                break;
            }
        }
        for (a, &i) in live.iter().enumerate() {
            lambda[i] = cur[a];
        }
        Ok(lambda)
    }
}

/// Reference solve of the uncondensed problem at deviation state `x0`, with
/// the predicted states kept as decision variables and the dynamics imposed
/// as equality constraints. Returns the first move, `None` if infeasible.
pub fn sparse_first_move(prob: &LinearMpcProblem, x0: &DVector<f64>) -> Result<Option<DVector<f64>>> {
    prob.validate()?;
    let (n, m, h) = (prob.n(), prob.m(), prob.horizon);
    if let Some(sb) = &prob.state_box {
        if !sb.contains(x0, 1e-12) {
            return Ok(None);
        }
    }
    let nv = h * m + h * n;
    let ui = |k: usize| k * m;
    let xi = |k: usize| h * m + (k - 1) * n; // k = 1..H
    let mut hess = DMatrix::zeros(nv, nv);
    for k in 0..h {
        hess.view_mut((ui(k), ui(k)), (m, m)).copy_from(&(&prob.r * 2.0));
    }
    for k in 1..=h {
        let w = if k == h { &prob.p } else { &prob.q };
        hess.view_mut((xi(k), xi(k)), (n, n)).copy_from(&(w * 2.0));
    }
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    // Dynamics x_k − A x_{k−1} − B u_{k−1} = 0 as two inequalities.
    for k in 1..=h {
        for i in 0..n {
            let mut row = DVector::zeros(nv);
            row[xi(k) + i] = 1.0;
            for j in 0..m {
                row[ui(k - 1) + j] = -prob.b[(i, j)];
            }
            let mut rhs = 0.0;
            if k == 1 {
                rhs = (prob.a.row(i) * x0)[(0, 0)];
            } else {
                for j in 0..n {
                    row[xi(k - 1) + j] = -prob.a[(i, j)];
                }
            }
            rows.push((-&row, -rhs));
            rows.push((row, rhs));
        }
    }
    if let Some(us) = &prob.input_set {
        for k in 0..h {
            for r in 0..us.num_halfspaces() {
                let mut row = DVector::zeros(nv);
                for j in 0..m {
                    row[ui(k) + j] = us.a[(r, j)];
                }
                rows.push((row, us.b[r]));
            }
        }
    }
    if let Some(sb) = &prob.state_box {
        for k in 1..h {
            for i in 0..n {
                let mut row = DVector::zeros(nv);
                row[xi(k) + i] = 1.0;
                rows.push((-&row, -sb.lower[i]));
                rows.push((row, sb.upper[i]));
            }
        }
    }
    if let Some(ts) = &prob.terminal_set {
        for r in 0..ts.num_halfspaces() {
            let mut row = DVector::zeros(nv);
            for j in 0..n {
                row[xi(h) + j] = ts.a[(r, j)];
            }
            rows.push((row, ts.b[r]));
        }
    }
    let g = DMatrix::from_fn(rows.len(), nv, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let sol = solve_qp(&hess, &DVector::zeros(nv), &g, &b)?;
    match sol.status {
        QpStatus::Solved => Ok(Some(sol.primal.rows(0, m).into_owned())),
        QpStatus::Infeasible => Ok(None),
        QpStatus::MaxIter => Err(Error::SolverStalled("sparse MPC QP".into())),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    /// x⁺ = x + u, H = 1, Q = R = P = 1, |u| ≤ 1.
    pub fn toy_problem() -> LinearMpcProblem {
        LinearMpcProblem {
            a: dmatrix![1.0],
            b: dmatrix![1.0],
            q: dmatrix![1.0],
            r: dmatrix![1.0],
            p: dmatrix![1.0],
            horizon: 1,
            state_box: None,
            input_set: Some(Polyhedron::new(dmatrix![1.0; -1.0], dvector![1.0, 1.0]).unwrap()),
            terminal_set: None,
            x_ref: DVector::zeros(0),
            u_ref: DVector::zeros(0),
        }
    }

    #[test]
    fn toy_condensed_matrices() {
        let c = condense(&toy_problem()).unwrap();
        assert_eq!(c.hessian, dmatrix![2.0]);
        assert_eq!(c.cross, dmatrix![2.0]);
        assert_eq!(c.ineq_matrix, dmatrix![1.0; -1.0]);
        assert_eq!(c.ineq_state, dmatrix![0.0; 0.0]);
        assert_eq!(c.ineq_offset, dvector![1.0, 1.0]);
    }

    #[test]
    fn input_energy_only() {
        let mut prob = toy_problem();
        prob.q = dmatrix![0.0];
        prob.p = dmatrix![0.0];
        prob.horizon = 3;
        let c = condense(&prob).unwrap();
        assert_eq!(c.hessian, DMatrix::identity(3, 3));
        assert!(c.cross.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn toy_oracle_values() {
        let c = condense(&toy_problem()).unwrap();
        assert_eq!(c.oracle_control(&dvector![0.0]).unwrap().unwrap()[0], 0.0);
        assert!((c.oracle_control(&dvector![1.0]).unwrap().unwrap()[0] + 0.5).abs() < 1e-12);
        assert!((c.oracle_control(&dvector![4.0]).unwrap().unwrap()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn recover_primal_examples() {
        let c = condense(&toy_problem()).unwrap();
        assert_eq!(recover_primal(&c, &dvector![0.0, 0.0], &dvector![0.0]).unwrap()[0], 0.0);
        let u = recover_primal(&c, &dvector![0.0, 0.0], &dvector![1.0]).unwrap();
        assert!((u[0] + 0.5).abs() < 1e-15);
        let sol = c.solve(&dvector![4.0]).unwrap();
        let u = recover_primal(&c, &sol.dual, &dvector![4.0]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn outside_state_box_is_infeasible() {
        let mut prob = toy_problem();
        prob.state_box = Some(StateBox::new(dvector![-2.0], dvector![2.0]).unwrap());
        prob.horizon = 2;
        let c = condense(&prob).unwrap();
        assert!(c.oracle_control(&dvector![3.0]).unwrap().is_none());
        assert!(c.oracle_control(&dvector![1.0]).unwrap().is_some());
    }

    #[test]
    fn validation_errors() {
        let mut prob = toy_problem();
        prob.r = dmatrix![0.0];
        assert!(matches!(condense(&prob), Err(Error::InvalidProblem(_))));
        let mut prob = toy_problem();
        prob.b = dmatrix![1.0, 2.0];
        assert!(matches!(condense(&prob), Err(Error::Dimension(_))));
        let mut prob = toy_problem();
        prob.input_set = Some(Polyhedron::new(dmatrix![1.0; -1.0], dvector![-1.0, -1.0]).unwrap());
        assert!(condense(&prob).is_err());
        let mut prob = toy_problem();
        prob.horizon = 0;
        assert!(condense(&prob).is_err());
    }

    #[test]
    fn problem_round_trips_through_json() {
        let prob = toy_problem();
        let text = serde_json::to_string(&prob).unwrap();
        let back: LinearMpcProblem = serde_json::from_str(&text).unwrap();
        assert_eq!(back, prob);
        assert_eq!(back.hash(), prob.hash());
    }

    pub fn double_integrator(horizon: usize) -> LinearMpcProblem {
        let a = dmatrix![1.0, 1.0; 0.0, 1.0];
        let b = dmatrix![0.5; 1.0];
        let q = DMatrix::identity(2, 2);
        let r = dmatrix![1.0];
        let p = numkit::dare_solve(&a, &b, &q, &r).unwrap().p;
        LinearMpcProblem {
            a,
            b,
            q,
            r,
            p,
            horizon,
            state_box: Some(StateBox::new(dvector![-5.0, -5.0], dvector![5.0, 5.0]).unwrap()),
            input_set: Some(Polyhedron::from_box(&dvector![-1.0], &dvector![1.0])),
            terminal_set: None,
            x_ref: DVector::zeros(0),
            u_ref: DVector::zeros(0),
        }
    }

    #[test]
    fn condensed_matches_sparse_on_double_integrator() {
        use rand::SeedableRng;
        let prob = double_integrator(2);
        let c = condense(&prob).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sb = prob.state_box.clone().unwrap();
        let mut checked = 0;
        while checked < 50 {
            let x = sb.sample(&mut rng);
            let dense = c.oracle_control(&x).unwrap();
            let sparse = sparse_first_move(&prob, &x).unwrap();
            assert_eq!(dense.is_some(), sparse.is_some(), "feasibility differs at {x}");
            if let (Some(d), Some(s)) = (dense, sparse) {
                assert!((d - s).amax() < 1e-7);
                checked += 1;
            }
        }
    }

    #[test]
    fn dual_on_toy() {
        let c = condense(&toy_problem()).unwrap();
        let d = assemble_dual(&c).unwrap();
        assert_eq!(d.exclusive_pairs, vec![(0, 1)]);
        let at0 = d.solve(&dvector![0.0]).unwrap().unwrap();
        assert!(at0.lambda.amax() < 1e-12);
        let at4 = d.solve(&dvector![4.0]).unwrap().unwrap();
        assert!(at4.lambda[1] > 1e-3 && at4.lambda[0].abs() < 1e-12);
        assert!((at4.primal[0] + 1.0).abs() < 1e-10);
        let u = recover_primal(&c, &at4.lambda, &dvector![4.0]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-10);
        // Strong duality: primal optimum 2 − 8 = −6.
        assert!((at4.value - 6.0).abs() < 1e-9);
    }

    #[test]
    fn dual_matches_primal_with_state_constraints() {
        use rand::SeedableRng;
        let mut prob = double_integrator(3);
        prob.state_box = Some(StateBox::new(dvector![-5.0, -2.0], dvector![5.0, 2.0]).unwrap());
        let c = condense(&prob).unwrap();
        let d = assemble_dual(&c).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        for _ in 0..400 {
            let x = prob.state_box.as_ref().unwrap().sample(&mut rng);
            let sol = c.solve(&x).unwrap();
            let dual = d.solve(&x).unwrap();
            if sol.status != QpStatus::Solved {
                assert!(dual.is_none());
                continue;
            }
            let dual = dual.unwrap();
            assert!((&dual.primal - &sol.primal).amax() < 1e-6, "x = {x}");
            assert!((dual.value + c.objective(&sol.primal, &x)).abs() < 1e-7 * (1.0 + dual.value.abs()));
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn lifted_hessian_is_pd_for_box_inputs() {
        let c = condense(&double_integrator(3)).unwrap();
        // Only the input rows remain once the state box is dropped.
        let mut prob = double_integrator(3);
        prob.state_box = None;
        let c2 = condense(&prob).unwrap();
        let d = assemble_dual(&c2).unwrap();
        assert_eq!(d.exclusive_pairs.len(), 3);
        assert!(min_eigenvalue(&d.lifted_hessian().unwrap()) > 0.0);
        assert!(c.num_constraints() > c2.num_constraints());
    }
}

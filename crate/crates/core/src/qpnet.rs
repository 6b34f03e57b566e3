//! The QP-layer network
//!
//! ```text
//! y₁ = F x + f
//! z* = argmin_{z ≥ 0} z'(εI + L'L)z + 2(L'y₁)'z
//! y₃ = G z* + g
//! û  = Π(y₃)
//! ```
//!
//! with forward evaluation, the KKT-based backward pass, and the exact
//! construction that reproduces a condensed MPC law.

use nalgebra::{DMatrix, DVector};
use numkit::linalg::spd_sqrt;
use numkit::qp::{cholesky_solve_in_place, solve_qp, QpStatus};
use numkit::{NonnegQp, Polyhedron};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::mpc::{assemble_dual, CondensedQp};
use crate::serde_util::{mat, vector};
use crate::{Error, Result};

pub const MODEL_SCHEMA: &str = "qpfit-model/1";

/// Optimality tolerance used for the pQP layer.
pub const PQP_TOL: f64 = 1e-12;

/// The output projection onto the input set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    None,
    /// Elementwise clamp.
    Box {
        #[serde(with = "vector")]
        lower: DVector<f64>,
        #[serde(with = "vector")]
        upper: DVector<f64>,
    },
    /// Euclidean projection onto `{u : a u ≤ b}`.
    Polyhedron {
        #[serde(with = "mat")]
        a: DMatrix<f64>,
        #[serde(with = "vector")]
        b: DVector<f64>,
    },
    /// `û = Ψ · clamp(y₃, lower, upper)`.
    PsiSaturation {
        #[serde(with = "mat")]
        psi: DMatrix<f64>,
        lower: f64,
        upper: f64,
    },
}

impl Projection {
    /// Box when every row bounds a single coordinate, polyhedron otherwise.
    pub fn from_polyhedron(p: &Polyhedron) -> Result<Projection> {
        let m = p.dim();
        let mut lower = DVector::from_element(m, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(m, f64::INFINITY);
        let mut is_box = true;
        for r in 0..p.num_halfspaces() {
            let nz: Vec<usize> = (0..m).filter(|&j| p.a[(r, j)] != 0.0).collect();
            if nz.len() != 1 {
                is_box = false;
                break;
            }
            let (j, a) = (nz[0], p.a[(r, nz[0])]);
            let bound = p.b[r] / a;
            if a > 0.0 {
                upper[j] = upper[j].min(bound);
            } else {
                lower[j] = lower[j].max(bound);
            }
        }
        let proj = if is_box {
            Projection::Box { lower, upper }
        } else {
            Projection::Polyhedron {
                a: p.a.clone(),
                b: p.b.clone(),
            }
        };
        proj.validate(m)?;
        Ok(proj)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            Projection::None => Ok(()),
            Projection::Box { lower, upper } => {
                if lower.len() != m || upper.len() != m {
                    return Err(Error::Projection(format!("box bounds must have length {m}")));
                }
                if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
                    return Err(Error::Projection("box has lower > upper".into()));
                }
                Ok(())
            }
            Projection::Polyhedron { a, b } => {
                if a.ncols() != m || a.nrows() != b.len() {
                    return Err(Error::Projection("polyhedron dimensions".into()));
                }
                if !numkit::lp_feasible(a, b)? {
                    return Err(Error::Projection("projection polyhedron is empty".into()));
                }
                Ok(())
            }
            Projection::PsiSaturation { psi, lower, upper } => {
                if psi.nrows() != m || psi.ncols() != m {
                    return Err(Error::Projection(format!("Ψ must be {m}x{m}")));
                }
                if !(lower < upper) {
                    return Err(Error::Projection("saturation needs lower < upper".into()));
                }
                Ok(())
            }
        }
    }

    /// Number of stored scalars.
    pub fn num_params(&self) -> usize {
        match self {
            Projection::None => 0,
            Projection::Box { lower, .. } => 2 * lower.len(),
            Projection::Polyhedron { a, .. } => a.nrows() * (a.ncols() + 1),
            Projection::PsiSaturation { psi, .. } => psi.len() + 2,
        }
    }

    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(y.len());
        self.project_into(y.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    pub fn project_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Projection::None => out.copy_from_slice(y),
            Projection::Box { lower, upper } => {
                for i in 0..y.len() {
                    out[i] = y[i].clamp(lower[i], upper[i]);
                }
            }
            Projection::Polyhedron { a, b } => {
                let sol = polyhedral_projection(a, b, y)?;
                out.copy_from_slice(sol.0.as_slice());
            }
            Projection::PsiSaturation { psi, lower, upper } => {
                let m = y.len();
                for i in 0..m {
                    out[i] = (0..m).map(|j| psi[(i, j)] * y[j].clamp(*lower, *upper)).sum();
                }
            }
        }
        Ok(())
    }

    /// `dℓ/dy₃` from `dℓ/dû`. Saturated components (including exact
    /// breakpoints) pass no gradient.
    pub fn backward_into(&self, y: &[f64], dout: &[f64], dy: &mut [f64]) -> Result<()> {
        match self {
            Projection::None => dy.copy_from_slice(dout),
            Projection::Box { lower, upper } => {
                for i in 0..y.len() {
                    dy[i] = if y[i] > lower[i] && y[i] < upper[i] { dout[i] } else { 0.0 };
                }
            }
            Projection::Polyhedron { a, b } => {
                let (_, active) = polyhedral_projection(a, b, y)?;
                let d = DVector::from_column_slice(dout);
                let res = if active.is_empty() {
                    d
                } else {
                    let aa = DMatrix::from_fn(active.len(), a.ncols(), |i, j| a[(active[i], j)]);
                    let gram = &aa * aa.transpose();
                    let coef = numkit::pseudo_inverse(&gram)? * (&aa * &d);
                    d - aa.transpose() * coef
                };
                dy.copy_from_slice(res.as_slice());
            }
            Projection::PsiSaturation { psi, lower, upper } => {
                let m = y.len();
                for j in 0..m {
                    dy[j] = if y[j] > *lower && y[j] < *upper {
                        (0..m).map(|i| psi[(i, j)] * dout[i]).sum()
                    } else {
                        0.0
                    };
                }
            }
        }
        Ok(())
    }

    /// Discrete state of the projection at `y`: which bounds or faces are
    /// active. Constant on each piece where the projection is affine.
    pub fn signature(&self, y: &[f64]) -> Result<Vec<i8>> {
        let clamp_sig = |v: f64, lo: f64, hi: f64| {
            if v <= lo {
                -1
            } else if v >= hi {
                1
            } else {
                0
            }
        };
        Ok(match self {
            Projection::None => Vec::new(),
            Projection::Box { lower, upper } => (0..y.len()).map(|i| clamp_sig(y[i], lower[i], upper[i])).collect(),
            Projection::PsiSaturation { lower, upper, .. } => y.iter().map(|&v| clamp_sig(v, *lower, *upper)).collect(),
            Projection::Polyhedron { a, b } => {
                let (_, active) = polyhedral_projection(a, b, y)?;
                let mut sig = vec![0; a.nrows()];
                for i in active {
                    sig[i] = 1;
                }
                sig
            }
        })
    }
}

fn polyhedral_projection(a: &DMatrix<f64>, b: &DVector<f64>, y: &[f64]) -> Result<(DVector<f64>, Vec<usize>)> {
    let m = y.len();
    let yv = DVector::from_column_slice(y);
    if a.nrows() > 0 && (a * &yv - b).max() <= 0.0 {
        return Ok((yv, Vec::new()));
    }
    let sol = solve_qp(&DMatrix::identity(m, m), &(-&yv), a, b)?;
    match sol.status {
        QpStatus::Solved => Ok((sol.primal, sol.active_set)),
        QpStatus::Infeasible => Err(Error::Projection("projection polyhedron is empty".into())),
        QpStatus::MaxIter => Err(Error::SolverStalled("polyhedral projection".into())),
    }
}

/// Weights of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpNetParams {
    pub n: usize,
    pub m: usize,
    pub n_z: usize,
    pub eps: f64,
    #[serde(rename = "F", with = "mat")]
    pub f_mat: DMatrix<f64>,
    #[serde(rename = "f", with = "vector")]
    pub f_vec: DVector<f64>,
    #[serde(rename = "L", with = "mat")]
    pub l: DMatrix<f64>,
    #[serde(rename = "G", with = "mat")]
    pub g_mat: DMatrix<f64>,
    #[serde(rename = "g", with = "vector")]
    pub g_vec: DVector<f64>,
    pub projection: Projection,
}

impl QpNetParams {
    /// F, G ~ U(±1/√n_z), f = g = 0, L = I + U(±0.1).
    pub fn random<R: Rng>(n: usize, m: usize, n_z: usize, eps: f64, projection: Projection, rng: &mut R) -> Self {
        let s = 1.0 / (n_z as f64).sqrt();
        let f_mat = DMatrix::from_fn(n_z, n, |_, _| rng.gen_range(-s..s));
        let l = DMatrix::from_fn(n_z, n_z, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.1..0.1));
        let g_mat = DMatrix::from_fn(m, n_z, |_, _| rng.gen_range(-s..s));
        QpNetParams {
            n,
            m,
            n_z,
            eps,
            f_mat,
            f_vec: DVector::zeros(n_z),
            l,
            g_mat,
            g_vec: DVector::zeros(m),
            projection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, nz) = (self.n, self.m, self.n_z);
        let checks = [
            (self.f_mat.shape() == (nz, n), "F"),
            (self.f_vec.len() == nz, "f"),
            (self.l.shape() == (nz, nz), "L"),
            (self.g_mat.shape() == (m, nz), "G"),
            (self.g_vec.len() == m, "g"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::Dimension(format!("parameter {what} has the wrong shape")));
            }
        }
        if n == 0 || m == 0 || nz == 0 {
            return Err(Error::Dimension("network dimensions must be positive".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidProblem("ε must be nonnegative".into()));
        }
        let finite = [&self.f_mat, &self.l, &self.g_mat].iter().all(|a| a.iter().all(|v| v.is_finite()))
            && self.f_vec.iter().chain(self.g_vec.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Num(numkit::NumError::NonFinite("network parameters")));
        }
        self.projection.validate(m)
    }

    /// `εI + L'L`.
    pub fn pqp_hessian(&self) -> DMatrix<f64> {
        let mut mm = self.l.transpose() * &self.l;
        for i in 0..self.n_z {
            mm[(i, i)] += self.eps;
        }
        mm
    }

    /// Number of scalars in F, f, L, G, g and the projection.
    pub fn num_params(&self) -> usize {
        self.f_mat.len() + self.f_vec.len() + self.l.len() + self.g_mat.len() + self.g_vec.len() + self.projection.num_params()
    }
}

/// On-disk model: parameters plus the dataset's label scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    #[serde(flatten)]
    pub params: QpNetParams,
    pub label_scale: Vec<f64>,
}

impl ModelFile {
    pub fn new(params: QpNetParams, label_scale: &DVector<f64>) -> Self {
        ModelFile {
            schema: MODEL_SCHEMA.into(),
            params,
            label_scale: label_scale.iter().copied().collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile = serde_json::from_str(text)?;
        if model.schema != MODEL_SCHEMA {
            return Err(Error::Format(format!("unsupported model schema {:?}", model.schema)));
        }
        model.params.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x: DVector<f64>,
    pub y1: DVector<f64>,
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    /// `true` where the bound `z_i ≥ 0` is treated as active, including
    /// weakly active bounds.
    pub active: Vec<bool>,
    pub y3: DVector<f64>,
    pub y4: DVector<f64>,
}

impl ForwardTrace {
    /// Largest violation of the pQP optimality conditions.
    pub fn kkt_residual(&self, p: &QpNetParams) -> f64 {
        let grad = p.pqp_hessian() * &self.z * 2.0 + p.l.transpose() * &self.y1 * 2.0;
        let mut r: f64 = 0.0;
        for i in 0..self.z.len() {
            r = r.max(-self.z[i]).max(-self.lambda[i]);
            r = r.max((self.z[i] * self.lambda[i]).abs());
            r = r.max((grad[i] - self.lambda[i]).abs());
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub f_mat: DMatrix<f64>,
    pub f_vec: DVector<f64>,
    pub l: DMatrix<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
}

impl ParamGradients {
    pub fn zeros(n: usize, m: usize, n_z: usize) -> Self {
        ParamGradients {
            f_mat: DMatrix::zeros(n_z, n),
            f_vec: DVector::zeros(n_z),
            l: DMatrix::zeros(n_z, n_z),
            g_mat: DMatrix::zeros(m, n_z),
            g_vec: DVector::zeros(m),
        }
    }

    pub fn fill_zero(&mut self) {
        self.f_mat.fill(0.0);
        self.f_vec.fill(0.0);
        self.l.fill(0.0);
        self.g_mat.fill(0.0);
        self.g_vec.fill(0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.f_mat *= s;
        self.f_vec *= s;
        self.l *= s;
        self.g_mat *= s;
        self.g_vec *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.f_mat.as_slice(), self.f_vec.as_slice(), self.l.as_slice(), self.g_mat.as_slice(), self.g_vec.as_slice()]
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Allocation-free forward/backward evaluation for repeated calls with the
/// same parameters. `εI + L'L` is formed once per [`Workspace::load`].
#[derive(Debug, Clone)]
pub struct Workspace {
    params: QpNetParams,
    mm: Vec<f64>,
    qp: NonnegQp,
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    c: Vec<f64>,
    pub y3: Vec<f64>,
    pub y4: Vec<f64>,
    dy3: Vec<f64>,
    dz: Vec<f64>,
    dy1: Vec<f64>,
    scratch: PqpScratch,
}

#[derive(Debug, Clone, Default)]
struct PqpScratch {
    idx: Vec<usize>,
    sub: Vec<f64>,
    v: Vec<f64>,
    lv: Vec<f64>,
    lz: Vec<f64>,
}

impl Workspace {
    pub fn new(p: &QpNetParams) -> Self {
        let (n, m, nz) = (p.n, p.m, p.n_z);
        let mut ws = Workspace {
            params: p.clone(),
            mm: vec![0.0; nz * nz],
            qp: NonnegQp::new(nz),
            x: vec![0.0; n],
            y1: vec![0.0; nz],
            c: vec![0.0; nz],
            y3: vec![0.0; m],
            y4: vec![0.0; m],
            dy3: vec![0.0; m],
            dz: vec![0.0; nz],
            dy1: vec![0.0; nz],
            scratch: PqpScratch {
                idx: Vec::with_capacity(nz),
                sub: vec![0.0; nz * nz],
                v: vec![0.0; nz],
                lv: vec![0.0; nz],
                lz: vec![0.0; nz],
            },
        };
        ws.load(p);
        ws
    }

    /// Replaces the parameters (dimensions must match).
    pub fn load(&mut self, p: &QpNetParams) {
        self.params.clone_from(p);
        let nz = p.n_z;
        let l = p.l.as_slice();
        for i in 0..nz {
            for j in 0..=i {
                let mut acc = if i == j { p.eps } else { 0.0 };
                for k in 0..nz {
                    acc += l[k + i * nz] * l[k + j * nz];
                }
                self.mm[i * nz + j] = acc;
                self.mm[j * nz + i] = acc;
            }
        }
    }

    pub fn params(&self) -> &QpNetParams {
        &self.params
    }

    pub fn z(&self) -> &[f64] {
        &self.qp.z
    }

    pub fn lambda(&self) -> &[f64] {
        &self.qp.lambda
    }

    /// Active bounds (see [`ForwardTrace::active`]).
    pub fn active(&self) -> Vec<bool> {
        (0..self.params.n_z).map(|i| !(self.qp.free[i] && self.qp.z[i] > 0.0)).collect()
    }

    pub fn forward(&mut self, x: &[f64]) -> Result<()> {
        let p = &self.params;
        let (n, m, nz) = (p.n, p.m, p.n_z);
        if x.len() != n {
            return Err(Error::Dimension(format!("input has {} entries, network expects {n}", x.len())));
        }
        self.x.copy_from_slice(x);
        let f = p.f_mat.as_slice();
        for i in 0..nz {
            let mut acc = p.f_vec[i];
            for j in 0..n {
                acc += f[i + j * nz] * x[j];
            }
            self.y1[i] = acc;
        }
        let l = p.l.as_slice();
        for i in 0..nz {
            let mut acc = 0.0;
            for k in 0..nz {
                acc += l[k + i * nz] * self.y1[k];
            }
            self.c[i] = 2.0 * acc;
        }
        match self.qp.solve(&self.mm, &self.c, PQP_TOL, (50 * nz).max(50))? {
            QpStatus::Solved => {}
            _ => return Err(Error::SolverStalled("pQP layer".into())),
        }
        let g = p.g_mat.as_slice();
        for i in 0..m {
            let mut acc = p.g_vec[i];
            for k in 0..nz {
                acc += g[i + k * m] * self.qp.z[k];
            }
            self.y3[i] = acc;
        }
        p.projection.project_into(&self.y3, &mut self.y4)
    }

    /// Adds the parameter gradient of the last forward call, for the output
    /// sensitivity `dl_dy4`, into `grads`.
    pub fn backward(&mut self, dl_dy4: &[f64], grads: &mut ParamGradients) -> Result<()> {
        let p = &self.params;
        let (n, m, nz) = (p.n, p.m, p.n_z);
        p.projection.backward_into(&self.y3, dl_dy4, &mut self.dy3)?;
        let g = p.g_mat.as_slice();
        let dg = grads.g_mat.as_mut_slice();
        for k in 0..nz {
            let zk = self.qp.z[k];
            let mut acc = 0.0;
            for i in 0..m {
                dg[i + k * m] += self.dy3[i] * zk;
                acc += g[i + k * m] * self.dy3[i];
            }
            self.dz[k] = acc;
        }
        for i in 0..m {
            grads.g_vec[i] += self.dy3[i];
        }
        let free: Vec<bool> = (0..nz).map(|i| self.qp.free[i] && self.qp.z[i] > 0.0).collect();
        pqp_backward_core(
            nz,
            &self.mm,
            p.l.as_slice(),
            &self.y1,
            &self.qp.z,
            &free,
            &self.dz,
            grads.l.as_mut_slice(),
            &mut self.dy1,
            &mut self.scratch,
        )?;
        let df = grads.f_mat.as_mut_slice();
        for j in 0..n {
            let xj = self.x[j];
            for i in 0..nz {
                df[i + j * nz] += self.dy1[i] * xj;
            }
        }
        for i in 0..nz {
            grads.f_vec[i] += self.dy1[i];
        }
        Ok(())
    }

    pub fn trace(&self) -> ForwardTrace {
        ForwardTrace {
            x: DVector::from_column_slice(&self.x),
            y1: DVector::from_column_slice(&self.y1),
            z: DVector::from_column_slice(&self.qp.z),
            lambda: DVector::from_column_slice(&self.qp.lambda),
            active: self.active(),
            y3: DVector::from_column_slice(&self.y3),
            y4: DVector::from_column_slice(&self.y4),
        }
    }
}

/// Implicit differentiation of the pQP optimality conditions on the free
/// set `F`: with `v = M_FF⁻¹ (dℓ/dz)_F` (zero off `F`),
/// `dℓ/dy₁ = −Lv` and `dℓ/dL = −[(Lz + y₁)v' + (Lv)z']`.
/// Accumulates into `dl` (column-major) and overwrites `dy1`.
#[allow(clippy::too_many_arguments)]
fn pqp_backward_core(
    nz: usize,
    mm: &[f64],
    l: &[f64],
    y1: &[f64],
    z: &[f64],
    free: &[bool],
    dz: &[f64],
    dl: &mut [f64],
    dy1: &mut [f64],
    s: &mut PqpScratch,
) -> Result<()> {
    s.idx.clear();
    s.idx.extend((0..nz).filter(|&i| free[i]));
    let k = s.idx.len();
    s.v.iter_mut().for_each(|v| *v = 0.0);
    if k == 0 {
        dy1.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let mut rhs = [0.0; 64];
    let mut heap;
    let rhs: &mut [f64] = if k <= 64 {
        &mut rhs[..k]
    } else {
        heap = vec![0.0; k];
        &mut heap
    };
    for (a, &i) in s.idx.iter().enumerate() {
        for (b, &j) in s.idx.iter().enumerate() {
            s.sub[a * k + b] = mm[i * nz + j];
        }
        rhs[a] = dz[i];
    }
    cholesky_solve_in_place(&mut s.sub[..k * k], rhs, k)
        .map_err(|_| Error::Num(numkit::NumError::Singular("reduced pQP system in the backward pass".into())))?;
    for (a, &i) in s.idx.iter().enumerate() {
        s.v[i] = rhs[a];
    }
    for i in 0..nz {
        let (mut lv, mut lz) = (0.0, 0.0);
        for &j in &s.idx {
            lv += l[i + j * nz] * s.v[j];
            lz += l[i + j * nz] * z[j];
        }
        s.lv[i] = lv;
        s.lz[i] = lz;
        dy1[i] = -lv;
    }
    for &j in &s.idx {
        for i in 0..nz {
            dl[i + j * nz] -= (s.lz[i] + y1[i]) * s.v[j] + s.lv[i] * z[j];
        }
    }
    Ok(())
}

pub fn forward(p: &QpNetParams, x: &DVector<f64>) -> Result<ForwardTrace> {
    let mut ws = Workspace::new(p);
    ws.forward(x.as_slice())?;
    Ok(ws.trace())
}

/// Gradients of the loss with respect to `L` and `y₁` given `dℓ/dz*`.
pub fn pqp_backward(trace: &ForwardTrace, p: &QpNetParams, dl_dz: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let nz = p.n_z;
    let mm = p.pqp_hessian();
    let mm_rm: Vec<f64> = mm.transpose().as_slice().to_vec();
    let free: Vec<bool> = trace.active.iter().map(|a| !a).collect();
    let mut dl = DMatrix::zeros(nz, nz);
    let mut dy1 = DVector::zeros(nz);
    let mut scratch = PqpScratch {
        idx: Vec::new(),
        sub: vec![0.0; nz * nz],
        v: vec![0.0; nz],
        lv: vec![0.0; nz],
        lz: vec![0.0; nz],
    };
    pqp_backward_core(
        nz,
        &mm_rm,
        p.l.as_slice(),
        trace.y1.as_slice(),
        trace.z.as_slice(),
        &free,
        dl_dz.as_slice(),
        dl.as_mut_slice(),
        dy1.as_mut_slice(),
        &mut scratch,
    )?;
    Ok((dl, dy1))
}

/// Parameter gradients for the output sensitivity `dℓ/dû`.
pub fn backward(trace: &ForwardTrace, p: &QpNetParams, dl_du: &DVector<f64>) -> Result<ParamGradients> {
    let mut dy3 = DVector::zeros(p.m);
    p.projection
        .backward_into(trace.y3.as_slice(), dl_du.as_slice(), dy3.as_mut_slice())?;
    let dz = p.g_mat.transpose() * &dy3;
    let (dl, dy1) = pqp_backward(trace, p, &dz)?;
    Ok(ParamGradients {
        f_mat: &dy1 * trace.x.transpose(),
        f_vec: dy1,
        l: dl,
        g_mat: &dy3 * trace.z.transpose(),
        g_vec: dy3,
    })
}

pub fn project(spec: &Projection, y3: &DVector<f64>) -> Result<DVector<f64>> {
    spec.project(y3)
}

/// Network whose output equals the first move of the MPC law for every
/// feasible state (physical coordinates in and out).
///
/// The decision vector is `z = [x⁺; x⁻; z̃]` with `x − x_ref = x⁺ − x⁻`
/// recovered by two identity pQP blocks, and `z̃` solving the dual of the
/// condensed QP. The dual Hessian is made positive definite by coupling
/// mutually exclusive constraint pairs (see
/// [`crate::mpc::DualQp::lifted_hessian`]); `L̃` is its square root.
pub fn construct_exact(c: &CondensedQp) -> Result<QpNetParams> {
    let dual = assemble_dual(c)?;
    let (n, m, p) = (c.n, c.m, c.num_constraints());
    let chol = c
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Construction("condensed Hessian is not positive definite".into()))?;
    let lt = if p == 0 {
        DMatrix::zeros(0, 0)
    } else {
        spd_sqrt(&dual.lifted_hessian()?)?
    };
    let lt_inv = if p == 0 {
        DMatrix::zeros(0, 0)
    } else {
        lt.clone()
            .try_inverse()
            .ok_or_else(|| Error::Construction("lifted dual factor is singular".into()))?
    };
    let nz = 2 * n + p;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut f_mat = DMatrix::zeros(nz, n);
    let mut f_vec = DVector::zeros(nz);
    f_mat.view_mut((0, 0), (n, n)).copy_from(&(-&eye));
    f_mat.view_mut((n, 0), (n, n)).copy_from(&eye);
    f_vec.rows_mut(0, n).copy_from(&c.x_ref);
    f_vec.rows_mut(n, n).copy_from(&(-&c.x_ref));
    if p > 0 {
        let half_inv = &lt_inv * 0.5;
        f_mat.view_mut((2 * n, 0), (p, n)).copy_from(&(&half_inv * &dual.lin_state));
        let off = &half_inv * (&dual.lin_offset - &dual.lin_state * &c.x_ref);
        f_vec.rows_mut(2 * n, p).copy_from(&off);
    }
    let mut l = DMatrix::zeros(nz, nz);
    l.view_mut((0, 0), (2 * n, 2 * n)).fill_with_identity();
    if p > 0 {
        l.view_mut((2 * n, 2 * n), (p, p)).copy_from(&lt);
    }
    let from_state = chol.solve(&c.cross.transpose()) * -0.5;
    let from_dual = chol.solve(&c.ineq_matrix.transpose()) * -0.5;
    let mut g_mat = DMatrix::zeros(m, nz);
    g_mat.view_mut((0, 0), (m, n)).copy_from(&from_state.rows(0, m));
    g_mat.view_mut((0, n), (m, n)).copy_from(&(-from_state.rows(0, m)));
    if p > 0 {
        g_mat.view_mut((0, 2 * n), (m, p)).copy_from(&from_dual.rows(0, m));
    }
    let projection = match &c.input_set {
        Some(us) => {
            let shifted = Polyhedron::new(us.a.clone(), &us.b + &us.a * &c.u_ref)?;
            Projection::from_polyhedron(&shifted)?
        }
        None => Projection::None,
    };
    let params = QpNetParams {
        n,
        m,
        n_z: nz,
        eps: 0.0,
        f_mat,
        f_vec,
        l,
        g_mat,
        g_vec: c.u_ref.clone(),
        projection,
    };
    params.validate()?;
    Ok(params)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose ±h perturbation changed the active set or projection
    /// piece.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_entry: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_entry = other.worst_entry.clone();
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_entry: None,
        }
    }
}

/// Relative error with an absolute floor for near-zero entries.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

pub const GRAD_FLOOR: f64 = 1e-6;

/// Active set of the pQP plus the projection signature.
type Signature = (Vec<bool>, Vec<i8>);

/// Compares [`backward`] against central differences of `ℓ = w'û` in every
/// entry of F, f, L, G, g.
pub fn finite_difference_check(p: &QpNetParams, x: &DVector<f64>, w: &DVector<f64>, h: f64) -> Result<GradCheckReport> {
    let base = forward(p, x)?;
    let grads = backward(&base, p, w)?;
    let base_sig = (base.active.clone(), p.projection.signature(base.y3.as_slice())?);
    let mut report = GradCheckReport::default();
    let mut probe = p.clone();
    let mut ws = Workspace::new(p);
    let eval = |q: &QpNetParams, ws: &mut Workspace| -> Result<(f64, Signature)> {
        ws.load(q);
        ws.forward(x.as_slice())?;
        let sig = (ws.active(), q.projection.signature(&ws.y3)?);
        Ok((ws.y4.iter().zip(w.iter()).map(|(a, b)| a * b).sum(), sig))
    };
    let blocks: [(&str, usize); 5] = [
        ("F", p.f_mat.len()),
        ("f", p.f_vec.len()),
        ("L", p.l.len()),
        ("G", p.g_mat.len()),
        ("g", p.g_vec.len()),
    ];
    for (name, len) in blocks {
        for k in 0..len {
            let orig = block_mut(&mut probe, name)[k];
            block_mut(&mut probe, name)[k] = orig + h;
            let (lp, sp) = eval(&probe, &mut ws)?;
            block_mut(&mut probe, name)[k] = orig - h;
            let (lm, sm) = eval(&probe, &mut ws)?;
            block_mut(&mut probe, name)[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let analytic = grad_block(&grads, name)[k];
            let err = relative_error(analytic, fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_entry = Some(format!("{name}[{k}]: analytic {analytic:e}, finite difference {fd:e}"));
            }
        }
    }
    Ok(report)
}

/// Settings of a randomized gradient-check suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckSuite {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub max_n: usize,
    pub max_m: usize,
    pub max_nz: usize,
}

impl Default for GradCheckSuite {
    fn default() -> Self {
        GradCheckSuite {
            instances: 200,
            seed: 0,
            step: 1e-5,
            max_n: 4,
            max_m: 3,
            max_nz: 8,
        }
    }
}

/// ε values cycled through the suite's instances.
pub const SUITE_EPS: [f64; 3] = [1e-4, 1e-2, 1.0];

fn random_projection<R: Rng>(m: usize, rng: &mut R) -> Projection {
    match rng.gen_range(0..4) {
        0 => Projection::None,
        1 => Projection::Box {
            lower: DVector::from_element(m, -1.5),
            upper: DVector::from_element(m, 1.5),
        },
        2 => Projection::PsiSaturation {
            psi: DMatrix::identity(m, m) + DMatrix::from_fn(m, m, |_, _| rng.gen_range(-0.3..0.3)),
            lower: -1.0,
            upper: 1.0,
        },
        _ => Projection::Polyhedron {
            a: DMatrix::from_fn(m + 1, m, |_, _| rng.gen_range(-1.0..1.0)),
            b: DVector::from_element(m + 1, 1.0),
        },
    }
}

/// Runs [`finite_difference_check`] on random networks with random
/// projections, inputs and loss weights.
pub fn run_gradcheck_suite(suite: &GradCheckSuite) -> Result<GradCheckReport> {
    if suite.max_n == 0 || suite.max_m == 0 || suite.max_nz == 0 || !(suite.step > 0.0) {
        return Err(Error::InvalidProblem("gradient-check dimensions and step must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(suite.seed);
    let mut total = GradCheckReport::default();
    for inst in 0..suite.instances {
        let n = rng.gen_range(1..=suite.max_n);
        let m = rng.gen_range(1..=suite.max_m);
        let nz = rng.gen_range(1..=suite.max_nz);
        let proj = random_projection(m, &mut rng);
        let p = QpNetParams::random(n, m, nz, SUITE_EPS[inst % SUITE_EPS.len()], proj, &mut rng);
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let w = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        total.merge(&finite_difference_check(&p, &x, &w, suite.step)?);
    }
    Ok(total)
}

fn block_mut<'a>(q: &'a mut QpNetParams, name: &str) -> &'a mut [f64] {
    match name {
        "F" => q.f_mat.as_mut_slice(),
        "f" => q.f_vec.as_mut_slice(),
        "L" => q.l.as_mut_slice(),
        "G" => q.g_mat.as_mut_slice(),
        _ => q.g_vec.as_mut_slice(),
    }
}

fn grad_block<'a>(g: &'a ParamGradients, name: &str) -> &'a [f64] {
    match name {
        "F" => g.f_mat.as_slice(),
        "f" => g.f_vec.as_slice(),
        "L" => g.l.as_slice(),
        "G" => g.g_mat.as_slice(),
        _ => g.g_vec.as_slice(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::condense;
    use crate::mpc::tests::{double_integrator, toy_problem};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clamp_net(eps: f64) -> QpNetParams {
        QpNetParams {
            n: 2,
            m: 2,
            n_z: 2,
            eps,
            f_mat: -DMatrix::identity(2, 2),
            f_vec: DVector::zeros(2),
            l: DMatrix::identity(2, 2),
            g_mat: DMatrix::identity(2, 2),
            g_vec: DVector::zeros(2),
            projection: Projection::Box {
                lower: dvector![-10.0, -10.0],
                upper: dvector![10.0, 10.0],
            },
        }
    }

    fn random_net(rng: &mut ChaCha8Rng, n: usize, m: usize, nz: usize, eps: f64, projection: Projection) -> QpNetParams {
        let mut p = QpNetParams::random(n, m, nz, eps, projection, rng);
        p.f_mat = DMatrix::from_fn(nz, n, |_, _| rng.gen_range(-1.0..1.0));
        p.f_vec = DVector::from_fn(nz, |_, _| rng.gen_range(-1.0..1.0));
        p.l = DMatrix::from_fn(nz, nz, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.5..0.5));
        p.g_vec = DVector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5));
        p
    }

    #[test]
    fn constant_output_when_weights_vanish() {
        let mut p = clamp_net(1e-4);
        p.f_mat.fill(0.0);
        p.g_mat.fill(0.0);
        p.g_vec = dvector![1.5, -2.0];
        let t = forward(&p, &dvector![3.0, -7.0]).unwrap();
        assert_eq!(t.z, dvector![0.0, 0.0]);
        assert_eq!(t.y4, dvector![1.5, -2.0]);
    }

    #[test]
    fn clamp_examples() {
        let p = clamp_net(0.0);
        let t = forward(&p, &dvector![1.0, 2.0]).unwrap();
        assert_eq!(t.y1, dvector![-1.0, -2.0]);
        assert!((t.z - dvector![1.0, 2.0]).amax() < 1e-12);
        assert!((t.y4 - dvector![1.0, 2.0]).amax() < 1e-12);
        let t = forward(&p, &dvector![-3.0, 5.0]).unwrap();
        assert!((t.z - dvector![0.0, 5.0]).amax() < 1e-12);
        assert!((&t.y4 - dvector![0.0, 5.0]).amax() < 1e-12);
        assert_eq!(t.active, vec![true, false]);
    }

    #[test]
    fn pqp_backward_regimes() {
        let p = clamp_net(0.0);
        let t = forward(&p, &dvector![1.0, 2.0]).unwrap();
        let dz = dvector![0.3, -0.7];
        let (_, dy1) = pqp_backward(&t, &p, &dz).unwrap();
        assert!((dy1 + &dz).amax() < 1e-12);
        let t = forward(&p, &dvector![-1.0, -2.0]).unwrap();
        let (dl, dy1) = pqp_backward(&t, &p, &dz).unwrap();
        assert_eq!(dy1.amax(), 0.0);
        assert_eq!(dl.amax(), 0.0);
    }

    #[test]
    fn pqp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (nz, h) = (4, 1e-5);
        let mut checked = 0;
        for _ in 0..30 {
            let l = DMatrix::from_fn(nz, nz, |_, _| rng.gen_range(-1.0..1.0));
            let y1 = DVector::from_fn(nz, |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(nz, |_, _| rng.gen_range(-1.0..1.0));
            // Identity first layer so that f plays the role of y₁.
            let p = QpNetParams {
                n: 1,
                m: nz,
                n_z: nz,
                eps: 1e-2,
                f_mat: DMatrix::zeros(nz, 1),
                f_vec: y1.clone(),
                l,
                g_mat: DMatrix::identity(nz, nz),
                g_vec: DVector::zeros(nz),
                projection: Projection::None,
            };
            let t = forward(&p, &dvector![0.0]).unwrap();
            let (dl, dy1) = pqp_backward(&t, &p, &w).unwrap();
            let loss = |q: &QpNetParams| forward(q, &dvector![0.0]).unwrap();
            for k in 0..nz {
                let mut a = p.clone();
                a.f_vec[k] += h;
                let mut b = p.clone();
                b.f_vec[k] -= h;
                let (ta, tb) = (loss(&a), loss(&b));
                if ta.active != t.active || tb.active != t.active {
                    continue;
                }
                let fd = (w.dot(&ta.z) - w.dot(&tb.z)) / (2.0 * h);
                assert!(relative_error(dy1[k], fd) < 1e-4, "{} vs {fd}", dy1[k]);
                checked += 1;
            }
            for k in 0..nz * nz {
                let mut a = p.clone();
                a.l.as_mut_slice()[k] += h;
                let mut b = p.clone();
                b.l.as_mut_slice()[k] -= h;
                let (ta, tb) = (loss(&a), loss(&b));
                if ta.active != t.active || tb.active != t.active {
                    continue;
                }
                let fd = (w.dot(&ta.z) - w.dot(&tb.z)) / (2.0 * h);
                assert!(relative_error(dl.as_slice()[k], fd) < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_net(&mut rng, 2, 1, 3, 1e-2, Projection::None);
        let t = forward(&p, &dvector![0.3, -0.2]).unwrap();
        let g = backward(&t, &p, &dvector![0.0]).unwrap();
        assert_eq!(g, ParamGradients::zeros(2, 1, 3));
    }

    #[test]
    fn saturated_output_blocks_gradient() {
        let mut p = clamp_net(1e-2);
        p.projection = Projection::Box {
            lower: dvector![-0.5, -10.0],
            upper: dvector![0.5, 10.0],
        };
        let t = forward(&p, &dvector![3.0, 2.0]).unwrap();
        assert_eq!(t.y4[0], 0.5);
        let g = backward(&t, &p, &dvector![1.0, 1.0]).unwrap();
        assert_eq!(g.g_vec[0], 0.0);
        assert!(g.g_mat.row(0).iter().all(|v| *v == 0.0));
        assert!(g.g_vec[1] != 0.0);
    }

    #[test]
    fn full_network_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut total = GradCheckReport::default();
        for proj in [
            Projection::None,
            Projection::Box {
                lower: dvector![-0.3],
                upper: dvector![0.3],
            },
        ] {
            for _ in 0..10 {
                let p = random_net(&mut rng, 2, 1, 3, 1e-2, proj.clone());
                let x = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let r = finite_difference_check(&p, &x, &dvector![1.0], 1e-5).unwrap();
                total.merge(&r);
            }
        }
        assert!(total.passes(1e-4), "{total:?}");
        assert!(total.checked > 200);
    }

    #[test]
    fn gradcheck_skips_active_set_crossings() {
        // z₀ = max(0, x₀) has its kink 1e-7 away; a ±1e-5 step in f₀ crosses it.
        let p = clamp_net(1e-4);
        let r = finite_difference_check(&p, &dvector![1e-7, 0.5], &dvector![1.0, 1.0], 1e-5).unwrap();
        assert!(r.skipped >= 1, "{r:?}");
        assert!(r.passes(1e-4), "{r:?}");
        let far = finite_difference_check(&p, &dvector![0.3, 0.5], &dvector![1.0, 1.0], 1e-5).unwrap();
        assert_eq!(far.skipped, 0);
    }

    #[test]
    fn psi_and_polyhedron_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let psi = dmatrix![2.0, -1.0, -1.0; -1.0, 2.0, -1.0; 1.0, 1.0, 1.0] / 3.0;
        let poly = Projection::Polyhedron {
            a: dmatrix![1.0, 1.0, 0.0; 0.0, 1.0, 1.0; -1.0, 0.0, 0.0],
            b: dvector![0.2, 0.2, 0.2],
        };
        let mut total = GradCheckReport::default();
        for proj in [
            Projection::PsiSaturation { psi, lower: -0.2, upper: 0.2 },
            poly,
        ] {
            for _ in 0..10 {
                let p = random_net(&mut rng, 3, 3, 4, 1e-4, proj.clone());
                let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let w = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                total.merge(&finite_difference_check(&p, &x, &w, 1e-5).unwrap());
            }
        }
        assert!(total.passes(1e-4), "{total:?}");
    }

    #[test]
    fn workspace_accumulates_like_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_net(&mut rng, 3, 2, 5, 1e-4, Projection::None);
        let mut ws = Workspace::new(&p);
        let mut acc = ParamGradients::zeros(3, 2, 5);
        let mut expect = ParamGradients::zeros(3, 2, 5);
        for _ in 0..5 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            ws.forward(x.as_slice()).unwrap();
            ws.backward(w.as_slice(), &mut acc).unwrap();
            let g = backward(&forward(&p, &x).unwrap(), &p, &w).unwrap();
            expect.f_mat += g.f_mat;
            expect.f_vec += g.f_vec;
            expect.l += g.l;
            expect.g_mat += g.g_mat;
            expect.g_vec += g.g_vec;
        }
        assert!((acc.l - expect.l).amax() < 1e-12);
        assert!((acc.f_mat - expect.f_mat).amax() < 1e-12);
        assert!((acc.g_mat - expect.g_mat).amax() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let boxed = Projection::Box {
            lower: dvector![0.0],
            upper: dvector![315.0],
        };
        assert_eq!(boxed.project(&dvector![100.0]).unwrap(), dvector![100.0]);
        assert_eq!(boxed.project(&dvector![400.0]).unwrap(), dvector![315.0]);
        let psi = dmatrix![2.0, -1.0, -1.0; -1.0, 2.0, -1.0; 1.0, 1.0, 1.0] / 3.0;
        let sat = Projection::PsiSaturation { psi, lower: 0.0, upper: 315.0 };
        let out = sat.project(&dvector![350.0, 350.0, 350.0]).unwrap();
        assert!((out - dvector![0.0, 0.0, 315.0]).amax() < 1e-12);
        let poly = Projection::Polyhedron {
            a: dmatrix![1.0, 1.0],
            b: dvector![1.0],
        };
        assert!((poly.project(&dvector![1.0, 1.0]).unwrap() - dvector![0.5, 0.5]).amax() < 1e-12);
        let empty = Projection::Polyhedron {
            a: dmatrix![1.0; -1.0],
            b: dvector![-1.0, -1.0],
        };
        assert!(empty.validate(1).is_err());
    }

    #[test]
    fn exact_toy_network() {
        let c = condense(&toy_problem()).unwrap();
        let p = construct_exact(&c).unwrap();
        assert_eq!(p.eps, 0.0);
        for (x, u) in [(0.0, 0.0), (1.0, -0.5), (4.0, -1.0), (-1.5, 0.75), (-3.0, 1.0)] {
            let t = forward(&p, &dvector![x]).unwrap();
            assert!((t.y4[0] - u).abs() < 1e-9, "x = {x}: {}", t.y4[0]);
        }
    }

    #[test]
    fn exact_double_integrator() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for h in [2, 3] {
            let mut prob = double_integrator(h);
            let sb = prob.state_box.take().unwrap();
            let c = condense(&prob).unwrap();
            let p = construct_exact(&c).unwrap();
            let mut checked = 0;
            while checked < 100 {
                let x = sb.sample(&mut rng);
                if let Some(u) = c.oracle_control(&x).unwrap() {
                    let t = forward(&p, &x).unwrap();
                    assert!((t.y4 - u).amax() < 1e-6);
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn exact_construction_reports_unliftable_duals() {
        // Two-sided state bounds add more exclusive pairs than decisions.
        let c = condense(&double_integrator(2)).unwrap();
        assert!(matches!(construct_exact(&c), Err(Error::Construction(_))));
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = DMatrix::identity(2, 2);
        let p = random_net(&mut rng, 3, 2, 4, 1e-4, Projection::PsiSaturation { psi, lower: 0.0, upper: 1.0 });
        let file = ModelFile::new(p, &dvector![1.0, 2.0]);
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"schema\":\"qpfit-model/1\""));
        assert!(text.contains("\"kind\":\"psi_saturation\""));
        assert_eq!(ModelFile::from_json(&text).unwrap(), file);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_satisfies_kkt(seed in 0u64..10_000, nz in 1usize..9, eps_idx in 0usize..3) {
            let eps = [1e-4, 1e-2, 1.0][eps_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let proj = Projection::Box { lower: dvector![-0.5, -0.5], upper: dvector![0.5, 0.5] };
            let p = random_net(&mut rng, 3, 2, nz, eps, proj);
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let t = forward(&p, &x).unwrap();
            prop_assert!(t.kkt_residual(&p) <= 1e-8);
            prop_assert!(t.y4.iter().all(|v| v.abs() <= 0.5));
        }

        #[test]
        fn affine_along_fixed_active_set(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_net(&mut rng, 2, 2, 4, 1e-2, Projection::None);
            let a = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let d = DVector::from_fn(2, |_, _| rng.gen_range(-1e-3..1e-3));
            let (t0, t1, t2) = (forward(&p, &a).unwrap(), forward(&p, &(&a + &d)).unwrap(), forward(&p, &(&a + &d * 2.0)).unwrap());
            if t0.active == t1.active && t1.active == t2.active {
                let second = &t2.y4 - &t1.y4 * 2.0 + &t0.y4;
                prop_assert!(second.amax() < 1e-10);
            }
        }
    }
}

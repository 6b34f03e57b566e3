//! Explicit piecewise-affine form of a trained network.
//!
//! For each candidate active set of the pQP layer the optimizer is affine
//! in `x`; its critical region is where the free coordinates stay
//! nonnegative and the active multipliers stay nonnegative. The projection
//! stays a closed-form map applied after the affine law.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use numkit::Polyhedron;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mpc::StateBox;
use crate::qpnet::{Projection, QpNetParams};
use crate::serde_util::{mat, vector};
use crate::{Error, Result};

/// Regions whose Chebyshev radius (capped at 1) is below this are dropped.
pub const MIN_RADIUS: f64 = 1e-9;
/// Point-location tolerance on normalized halfspaces.
pub const LOCATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Bit `i` set when `z_i = 0` is active.
    pub mask: u64,
    #[serde(rename = "E", with = "mat")]
    pub e_mat: DMatrix<f64>,
    #[serde(rename = "e", with = "vector")]
    pub e_vec: DVector<f64>,
    #[serde(rename = "K", with = "mat")]
    pub k_mat: DMatrix<f64>,
    #[serde(rename = "k", with = "vector")]
    pub k_vec: DVector<f64>,
}

impl Region {
    pub fn num_halfspaces(&self) -> usize {
        self.e_vec.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.num_halfspaces()).all(|r| (self.e_mat.row(r) * x)[(0, 0)] <= self.e_vec[r] + tol)
    }

    /// Affine law before projection.
    pub fn law(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k_mat * x + &self.k_vec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub n_z: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaController {
    pub dims: Dims,
    pub regions: Vec<Region>,
    pub projection: Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub region_count: usize,
    pub halfspace_count: usize,
    pub storage_bytes: usize,
    /// Point location plus evaluation, seconds (informational).
    pub eval_time_median_s: f64,
    pub eval_time_max_s: f64,
}

/// Solves `a x = b` for SPD `a` via Cholesky.
fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

pub fn enumerate_regions(p: &QpNetParams) -> Result<PwaController> {
    p.validate()?;
    let (n, m, nz) = (p.n, p.m, p.n_z);
    if nz > 24 {
        return Err(Error::Dimension(format!("n_z = {nz} is too large to enumerate 2^n_z active sets")));
    }
    let mm = p.pqp_hessian();
    // c(x) = C x + c0 = 2L'(Fx + f).
    let cm = p.l.transpose() * &p.f_mat * 2.0;
    let c0 = p.l.transpose() * &p.f_vec * 2.0;
    let mut regions = Vec::new();
    for mask in 0u64..(1u64 << nz) {
        let free: Vec<usize> = (0..nz).filter(|&i| mask & (1 << i) == 0).collect();
        let act: Vec<usize> = (0..nz).filter(|&i| mask & (1 << i) != 0).collect();
        let k = free.len();
        // z_F = Z x + z0 on the free set.
        let (zf, z0f) = if k == 0 {
            (DMatrix::zeros(0, n), DVector::zeros(0))
        } else {
            let mff = DMatrix::from_fn(k, k, |a, b| mm[(free[a], free[b])]);
            let mut rhs = DMatrix::zeros(k, n + 1);
            for (a, &i) in free.iter().enumerate() {
                for j in 0..n {
                    rhs[(a, j)] = -0.5 * cm[(i, j)];
                }
                rhs[(a, n)] = -0.5 * c0[i];
            }
            match spd_solve(&mff, &rhs) {
                Some(sol) => (sol.columns(0, n).into_owned(), sol.column(n).into_owned()),
                None => {
                    log::warn!("active set {mask:#b}: singular reduced KKT block, skipped");
                    continue;
                }
            }
        };
        // Region rows: −z_F ≤ 0 and −λ_A ≤ 0 with λ_A = 2 M_AF z_F + c_A.
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(nz);
        for a in 0..k {
            rows.push(((0..n).map(|j| -zf[(a, j)]).collect(), z0f[a]));
        }
        for &i in &act {
            let mut coef: Vec<f64> = (0..n).map(|j| cm[(i, j)]).collect();
            let mut off = c0[i];
            for (a, &jf) in free.iter().enumerate() {
                let w = 2.0 * mm[(i, jf)];
                for (j, cj) in coef.iter_mut().enumerate() {
                    *cj += w * zf[(a, j)];
                }
                off += w * z0f[a];
            }
            rows.push((coef.into_iter().map(|v| -v).collect(), off));
        }
        let mut kept: Vec<(Vec<f64>, f64)> = Vec::with_capacity(rows.len());
        let mut empty = false;
        for (row, rhs) in rows {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = 1.0 + rhs.abs();
            if norm <= 1e-12 * scale {
                if rhs < -1e-12 * scale {
                    empty = true;
                    break;
                }
                continue;
            }
            kept.push((row, rhs));
        }
        if empty {
            continue;
        }
        let poly = Polyhedron::new(
            DMatrix::from_fn(kept.len(), n, |i, j| kept[i].0[j]),
            DVector::from_iterator(kept.len(), kept.iter().map(|r| r.1)),
        )?;
        let interior = if kept.is_empty() {
            true
        } else {
            matches!(poly.chebyshev(1.0)?, Some((_, r)) if r > MIN_RADIUS)
        };
        if !interior {
            continue;
        }
        let poly = if kept.is_empty() { poly } else { poly.remove_redundant(1e-10)? };
        let mut k_mat = DMatrix::zeros(m, n);
        let mut k_vec = p.g_vec.clone();
        for (a, &i) in free.iter().enumerate() {
            for r in 0..m {
                let g = p.g_mat[(r, i)];
                for j in 0..n {
                    k_mat[(r, j)] += g * zf[(a, j)];
                }
                k_vec[r] += g * z0f[a];
            }
        }
        regions.push(Region {
            mask,
            e_mat: poly.a,
            e_vec: poly.b,
            k_mat,
            k_vec,
        });
    }
    Ok(PwaController {
        dims: Dims { n, m, n_z: nz },
        regions,
        projection: p.projection.clone(),
    })
}

impl PwaController {
    pub fn locate(&self, x: &DVector<f64>) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(x, LOCATE_TOL))
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    /// `4 · (3 + R + Σ_r [h_r(n+1) + m(n+1)] + 2 + projection parameters)`:
    /// header (n, m, R), per-region halfspace counts, region data, and the
    /// projection kind, parameter count and parameters. Equals the size of
    /// [`PwaController::to_binary`].
    pub fn storage_bytes(&self) -> usize {
        let (n, m) = (self.dims.n, self.dims.m);
        let data: usize = self
            .regions
            .iter()
            .map(|r| r.num_halfspaces() * (n + 1) + m * (n + 1))
            .sum();
        let header = 3 + self.regions.len() + 2 + self.projection.num_params();
        4 * (data + header)
    }

    /// Little-endian u32 counts and f32 values: n, m, R; per region the
    /// halfspace count h, then E (h×n, row-major), e, K (m×n, row-major),
    /// k; then the projection kind (0 none, 1 box, 2 polyhedron, 3 Ψ-sat),
    /// its parameter count and parameters.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.storage_bytes());
        let put_u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let put_f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        put_u(&mut out, self.dims.n);
        put_u(&mut out, self.dims.m);
        put_u(&mut out, self.regions.len());
        for r in &self.regions {
            put_u(&mut out, r.num_halfspaces());
            for i in 0..r.num_halfspaces() {
                for j in 0..self.dims.n {
                    put_f(&mut out, r.e_mat[(i, j)]);
                }
            }
            r.e_vec.iter().for_each(|v| put_f(&mut out, *v));
            for i in 0..self.dims.m {
                for j in 0..self.dims.n {
                    put_f(&mut out, r.k_mat[(i, j)]);
                }
            }
            r.k_vec.iter().for_each(|v| put_f(&mut out, *v));
        }
        let params: Vec<f64> = match &self.projection {
            Projection::None => Vec::new(),
            Projection::Box { lower, upper } => lower.iter().chain(upper.iter()).copied().collect(),
            Projection::Polyhedron { a, b } => {
                let mut v: Vec<f64> = a.transpose().iter().copied().collect();
                v.extend(b.iter());
                v
            }
            Projection::PsiSaturation { psi, lower, upper } => {
                let mut v: Vec<f64> = psi.transpose().iter().copied().collect();
                v.push(*lower);
                v.push(*upper);
                v
            }
        };
        let kind = match &self.projection {
            Projection::None => 0,
            Projection::Box { .. } => 1,
            Projection::Polyhedron { .. } => 2,
            Projection::PsiSaturation { .. } => 3,
        };
        put_u(&mut out, kind);
        put_u(&mut out, params.len());
        params.iter().for_each(|v| put_f(&mut out, *v));
        out
    }
}

/// Sequential-scan point location followed by the region's affine law and
/// the projection. The first matching region wins on shared boundaries.
pub fn locate_and_eval(ctrl: &PwaController, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != ctrl.dims.n {
        return Err(Error::Dimension(format!("state has {} entries, controller expects {}", x.len(), ctrl.dims.n)));
    }
    let r = ctrl
        .locate(x)
        .ok_or_else(|| Error::NoRegion(format!("{:?}", x.as_slice())))?;
    ctrl.projection.project(&ctrl.regions[r].law(x))
}

/// Region and storage counts plus evaluation timing over `samples` uniform
/// points of `sampling_box`.
pub fn complexity_report(ctrl: &PwaController, sampling_box: &StateBox, samples: usize, seed: u64) -> Result<ComplexityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = sampling_box.sample(&mut rng);
        let start = Instant::now();
        let u = locate_and_eval(ctrl, &x)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(u);
    }
    times.sort_by(f64::total_cmp);
    Ok(ComplexityReport {
        region_count: ctrl.region_count(),
        halfspace_count: ctrl.regions.iter().map(Region::num_halfspaces).sum(),
        storage_bytes: ctrl.storage_bytes(),
        eval_time_median_s: times.get(times.len() / 2).copied().unwrap_or(0.0),
        eval_time_max_s: times.last().copied().unwrap_or(0.0),
    })
}

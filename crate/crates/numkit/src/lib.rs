//! Dense linear-algebra and convex-solver kernels for small control problems.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! [`nalgebra::DMatrix`] values; the solvers target problems with at most a
//! few hundred constraints and a few dozen variables.

mod error;

pub mod dare;
pub mod linalg;
pub mod lp;
pub mod poly;
pub mod qp;

pub use dare::{dare_residual, dare_solve, DareSolution};
pub use error::NumError;
pub use linalg::{matrix_exponential, pseudo_inverse, spd_sqrt, zoh_discretize};
pub use lp::{lp_feasible, lp_solve, LpOutcome};
pub use poly::Polyhedron;
pub use qp::{cholesky_solve_in_place, kkt_residuals, KktResiduals, solve_nonneg_qp, solve_qp, NonnegQp, QpOptions, QpSolution, QpStatus};

pub use nalgebra::{DMatrix, DVector};

pub type Result<T, E = NumError> = std::result::Result<T, E>;

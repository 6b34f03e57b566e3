//! Three-phase multicell step-down converter: averaged model in Lunze
//! coordinates, the regulation MPC problem, closed-loop simulation and
//! steady-state metrics.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use numkit::{dare_solve, pseudo_inverse, zoh_discretize, Polyhedron};
use serde::{Deserialize, Serialize};

use crate::invariant::terminal_invariant_set;
use crate::mpc::{LinearMpcProblem, StateBox};
use crate::qpnet::Projection;
use crate::serde_util::{mat, vector};
use crate::{Error, Result};

/// Circuit parameters (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConverterParams {
    pub v_in: f64,
    pub l_s: f64,
    pub l_m: f64,
    pub r: f64,
    pub l_f: f64,
    pub c_o: f64,
    pub r_o: f64,
    pub f_sw: f64,
    pub d_max: f64,
}

impl Default for ConverterParams {
    fn default() -> Self {
        ConverterParams {
            v_in: 350.0,
            l_s: 4e-3,
            l_m: -2e-3,
            r: 10e-3,
            l_f: 270e-6,
            c_o: 20e-6,
            r_o: 6.25,
            f_sw: 15e3,
            d_max: 0.9,
        }
    }
}

impl ConverterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.v_in, self.l_s, self.r, self.l_f, self.c_o, self.r_o, self.f_sw, self.d_max];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidProblem("converter parameters must be positive (except L_m)".into()));
        }
        if !(self.l_s + self.l_m > 0.0) || !(self.common_mode_inductance() > 0.0) {
            return Err(Error::InvalidProblem("effective inductances must be positive".into()));
        }
        Ok(())
    }

    /// `L_s + 2L_m + 3L_f`.
    pub fn common_mode_inductance(&self) -> f64 {
        self.l_s + 2.0 * self.l_m + 3.0 * self.l_f
    }

    /// Upper limit of each phase voltage, `d_max · V_in`.
    pub fn phase_voltage_max(&self) -> f64 {
        self.d_max * self.v_in
    }
}

/// Lunze transform: differential modes in rows 1–2, common mode in row 3.
pub fn lunze() -> DMatrix<f64> {
    dmatrix![2.0, -1.0, -1.0; -1.0, 2.0, -1.0; 1.0, 1.0, 1.0] / 3.0
}

pub fn lunze_inverse() -> DMatrix<f64> {
    dmatrix![1.0, 0.0, 1.0; 0.0, 1.0, 1.0; -1.0, -1.0, 1.0]
}

/// State `[i_dm1, i_dm2, i_cm, v_out]`, input `[v_dm1, v_dm2, v_cm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterModel {
    #[serde(with = "mat")]
    pub psi: DMatrix<f64>,
    #[serde(with = "mat")]
    pub psi_inv: DMatrix<f64>,
    #[serde(with = "mat")]
    pub a_ct: DMatrix<f64>,
    #[serde(with = "mat")]
    pub b_ct: DMatrix<f64>,
    #[serde(with = "mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "mat")]
    pub b: DMatrix<f64>,
    #[serde(with = "vector")]
    pub x_eq: DVector<f64>,
    #[serde(with = "vector")]
    pub u_eq: DVector<f64>,
    pub sample_time: f64,
    /// `‖A x_eq + B u_eq − x_eq‖∞`.
    pub equilibrium_residual: f64,
}

pub fn build_model(params: &ConverterParams) -> Result<ConverterModel> {
    params.validate()?;
    let p = params;
    let l_dm = p.l_s + p.l_m;
    let l_cm = p.common_mode_inductance();
    let a_ct = dmatrix![
        -p.r / l_dm, 0.0, 0.0, 0.0;
        0.0, -p.r / l_dm, 0.0, 0.0;
        0.0, 0.0, -p.r / l_cm, -1.0 / l_cm;
        0.0, 0.0, 3.0 / p.c_o, -1.0 / (p.r_o * p.c_o)
    ];
    // Differential rows use 1/L_s while A_ct uses 1/(L_s + L_m); kept as
    // given by the reference model.
    let b_ct = dmatrix![
        1.0 / p.l_s, 0.0, 0.0;
        0.0, 1.0 / p.l_s, 0.0;
        0.0, 0.0, 1.0 / l_cm;
        0.0, 0.0, 0.0
    ];
    let sample_time = 1.0 / p.f_sw;
    let (a, b) = zoh_discretize(&a_ct, &b_ct, sample_time)?;
    let x_eq = dvector![0.0, 0.0, 16.0, 300.0];
    let u_eq = pseudo_inverse(&b)? * (DMatrix::identity(4, 4) - &a) * &x_eq;
    let equilibrium_residual = (&a * &x_eq + &b * &u_eq - &x_eq).amax();
    Ok(ConverterModel {
        psi: lunze(),
        psi_inv: lunze_inverse(),
        a_ct,
        b_ct,
        a,
        b,
        x_eq,
        u_eq,
        sample_time,
        equilibrium_residual,
    })
}

impl ConverterModel {
    /// Duty cycles `Ψ⁻¹u / V_in`.
    pub fn duty_cycles(&self, u: &DVector<f64>, params: &ConverterParams) -> DVector<f64> {
        &self.psi_inv * u / params.v_in
    }

    /// Physical state box.
    pub fn state_box() -> StateBox {
        StateBox {
            lower: dvector![-5.0, -5.0, -10.0, -20.0],
            upper: dvector![5.0, 5.0, 30.0, 400.0],
        }
    }

    /// Output layer used for learned controllers: `û = Ψ · clamp(y, 0, d_max V_in)`.
    pub fn projection(&self, params: &ConverterParams) -> Projection {
        Projection::PsiSaturation {
            psi: self.psi.clone(),
            lower: 0.0,
            upper: params.phase_voltage_max(),
        }
    }
}

pub const HORIZON: usize = 10;

/// Regulation problem around `(x_eq, u_eq)` in deviation coordinates:
/// `Q = diag(10, 10, 0.1, 0.1)`, `R = 0.1 I`, `P` from the DARE, `H = 10`,
/// the state box, duty-cycle limits mapped through `Ψ⁻¹`, and the LQR
/// maximal invariant set as terminal set.
pub fn assemble_mpc(model: &ConverterModel, params: &ConverterParams) -> Result<LinearMpcProblem> {
    assemble_mpc_with(model, params, HORIZON)
}

pub fn assemble_mpc_with(model: &ConverterModel, params: &ConverterParams, horizon: usize) -> Result<LinearMpcProblem> {
    let q = DMatrix::from_diagonal(&dvector![10.0, 10.0, 0.1, 0.1]);
    let r = DMatrix::identity(3, 3) * 0.1;
    let lqr = dare_solve(&model.a, &model.b, &q, &r)?;
    let phys = ConverterModel::state_box();
    let state_box = StateBox::new(&phys.lower - &model.x_eq, &phys.upper - &model.x_eq)?;
    // 0 ≤ Ψ⁻¹(u + u_eq) ≤ d_max V_in.
    let vmax = params.phase_voltage_max();
    let v_eq = &model.psi_inv * &model.u_eq;
    let mut h_u = DMatrix::zeros(6, 3);
    let mut h_b = DVector::zeros(6);
    for i in 0..3 {
        for j in 0..3 {
            h_u[(i, j)] = model.psi_inv[(i, j)];
            h_u[(i + 3, j)] = -model.psi_inv[(i, j)];
        }
        h_b[i] = vmax - v_eq[i];
        h_b[i + 3] = v_eq[i];
    }
    let input_set = Polyhedron::new(h_u, h_b)?;
    if input_set.is_empty()? {
        return Err(Error::InvalidProblem("input set is empty in deviation coordinates".into()));
    }
    let mut prob = LinearMpcProblem {
        a: model.a.clone(),
        b: model.b.clone(),
        q,
        r,
        p: lqr.p,
        horizon,
        state_box: Some(state_box),
        input_set: Some(input_set),
        terminal_set: None,
        x_ref: model.x_eq.clone(),
        u_ref: model.u_eq.clone(),
    };
    let terminal = terminal_invariant_set(&prob)?;
    if terminal.is_empty()? {
        return Err(Error::InvalidProblem("terminal set is empty".into()));
    }
    prob.terminal_set = Some(terminal);
    prob.validate()?;
    Ok(prob)
}

/// Closed-loop run in physical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `steps + 1` states when the run completes.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Why the run stopped early, if it did.
    pub halted: Option<String>,
}

/// Simulates the converter from `x0` for `steps` steps. The controller
/// maps physical states to physical inputs; `Ok(None)` (infeasible) halts
/// the run and is recorded.
pub fn simulate<C>(model: &ConverterModel, controller: C, x0: &DVector<f64>, steps: usize) -> Result<Trajectory>
where
    C: FnMut(&DVector<f64>) -> Result<Option<DVector<f64>>>,
{
    if x0.len() != 4 {
        return Err(Error::Dimension("converter state has 4 entries".into()));
    }
    simulate_linear(&model.a, &model.b, controller, x0, steps)
}

/// `x⁺ = A x + B u` under `controller`, for any dimensions.
pub fn simulate_linear<C>(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mut controller: C,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<Trajectory>
where
    C: FnMut(&DVector<f64>) -> Result<Option<DVector<f64>>>,
{
    if x0.len() != a.nrows() {
        return Err(Error::Dimension(format!("initial state has {} entries, expected {}", x0.len(), a.nrows())));
    }
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(steps),
        halted: None,
    };
    let mut x = x0.clone();
    for k in 0..steps {
        match controller(&x)? {
            Some(u) if u.len() == b.ncols() => {
                x = a * &x + b * &u;
                traj.inputs.push(u);
                traj.states.push(x.clone());
            }
            Some(u) => {
                return Err(Error::Dimension(format!("controller returned {} inputs, expected {}", u.len(), b.ncols())));
            }
            None => {
                traj.halted = Some(format!("controller infeasible at step {k}, state {:?}", x.as_slice()));
                break;
            }
        }
    }
    Ok(traj)
}

impl Trajectory {
    /// `step,x1..xn,u1..um` without the converter-specific duty cycles.
    pub fn to_csv_plain(&self) -> String {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["step".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        let mut out = header.join(",") + "\n";
        for (k, x) in self.states.iter().enumerate() {
            let mut fields: Vec<String> = vec![k.to_string()];
            fields.extend(x.iter().map(|v| format!("{v:?}")));
            match self.inputs.get(k) {
                Some(u) => fields.extend(u.iter().map(|v| format!("{v:?}"))),
                None => fields.extend(std::iter::repeat_n(String::new(), m)),
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// `step,x1..x4,u1..u3,d1..d3`; the final state has no input columns.
    pub fn to_csv(&self, model: &ConverterModel, params: &ConverterParams) -> String {
        let mut out = String::from("step,x1,x2,x3,x4,u1,u2,u3,d1,d2,d3\n");
        for (k, x) in self.states.iter().enumerate() {
            let mut fields: Vec<String> = vec![k.to_string()];
            fields.extend(x.iter().map(|v| format!("{v:?}")));
            match self.inputs.get(k) {
                Some(u) => {
                    fields.extend(u.iter().map(|v| format!("{v:?}")));
                    fields.extend(model.duty_cycles(u, params).iter().map(|v| format!("{v:?}")));
                }
                None => fields.extend(std::iter::repeat_n(String::new(), 6)),
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

pub const SS_WINDOW: usize = 10;
/// Differential-mode current limit, A.
pub const SS_DM_LIMIT: f64 = 0.2;
/// Common-mode current and output voltage limit, percent.
pub const SS_REL_LIMIT_PCT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateMetrics {
    /// Max |i_dm1| over the window, A.
    pub i_dm1: f64,
    pub i_dm2: f64,
    /// Max relative deviation over the window, percent.
    pub i_cm_pct: f64,
    pub v_out_pct: f64,
    /// Spread (max − min) of each state over the window.
    pub window_variation: Vec<f64>,
    /// False when some spread exceeds ten times the reported error.
    pub settled: bool,
}

impl SteadyStateMetrics {
    pub fn within_spec(&self) -> bool {
        self.i_dm1 <= SS_DM_LIMIT
            && self.i_dm2 <= SS_DM_LIMIT
            && self.i_cm_pct <= SS_REL_LIMIT_PCT
            && self.v_out_pct <= SS_REL_LIMIT_PCT
    }
}

/// Errors over the last [`SS_WINDOW`] states of the trajectory.
pub fn steady_state_metrics(traj: &Trajectory, x_eq: &DVector<f64>) -> Result<SteadyStateMetrics> {
    if traj.states.len() < SS_WINDOW {
        return Err(Error::InvalidProblem(format!(
            "trajectory has {} states; at least {SS_WINDOW} are needed",
            traj.states.len()
        )));
    }
    let window = &traj.states[traj.states.len() - SS_WINDOW..];
    let max_dev = |i: usize| window.iter().map(|x| (x[i] - x_eq[i]).abs()).fold(0.0, f64::max);
    let errors = [
        max_dev(0),
        max_dev(1),
        100.0 * max_dev(2) / x_eq[2].abs(),
        100.0 * max_dev(3) / x_eq[3].abs(),
    ];
    let abs_errors = [errors[0], errors[1], max_dev(2), max_dev(3)];
    let variation: Vec<f64> = (0..4)
        .map(|i| {
            let (lo, hi) = window
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[i]), hi.max(x[i])));
            hi - lo
        })
        .collect();
    let settled = (0..4).all(|i| variation[i] <= 10.0 * abs_errors[i] + 1e-9 * (1.0 + x_eq[i].abs()));
    Ok(SteadyStateMetrics {
        i_dm1: errors[0],
        i_dm2: errors[1],
        i_cm_pct: errors[2],
        v_out_pct: errors[3],
        window_variation: variation,
        settled,
    })
}

/// Candidate corners `i_dm1, i_dm2 ∈ {±2}`, `i_cm ∈ {5, 25}`,
/// `v_out ∈ {50, 350}`, in the order tried for the default initial
/// conditions.
pub fn initial_condition_candidates() -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for &(icm, vout) in &[(5.0, 50.0), (25.0, 350.0), (25.0, 50.0), (5.0, 350.0)] {
        for &(d1, d2) in &[(2.0, -2.0), (-2.0, 2.0), (2.0, 2.0), (-2.0, -2.0)] {
            out.push(dvector![d1, d2, icm, vout]);
        }
    }
    out
}

/// The first feasible candidate for each `(i_cm, v_out)` pair, so the four
/// initial conditions cover all corners of the common-mode sub-box. Group
/// `g` starts at differential pattern `g`, spreading the `i_dm` signs too.
pub fn default_initial_conditions<F>(mut feasible: F) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(&DVector<f64>) -> Result<bool>,
{
    let cands = initial_condition_candidates();
    let mut out = Vec::new();
    for (g, group) in cands.chunks(4).enumerate() {
        for x in group.iter().cycle().skip(g).take(4) {
            if feasible(x)? {
                out.push(x.clone());
                break;
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidProblem("no candidate initial condition is feasible".into()));
    }
    Ok(out)
}

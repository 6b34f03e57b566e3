//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero if any
//! criterion fails.

use std::time::Instant;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use numkit::{dare_solve, kkt_residuals, pseudo_inverse, spd_sqrt, Polyhedron, QpStatus};
use qpfit::converter::{
    assemble_mpc, build_model, default_initial_conditions, simulate, steady_state_metrics, ConverterModel,
    ConverterParams, SteadyStateMetrics,
};
use qpfit::dataset::{sample_dataset, Dataset};
use qpfit::mpc::{assemble_dual, condense, sparse_first_move, CondensedQp, LinearMpcProblem, StateBox};
use qpfit::pwa::{enumerate_regions, locate_and_eval, PwaController};
use qpfit::qpnet::{construct_exact, forward, run_gradcheck_suite, GradCheckSuite, QpNetParams};
use qpfit::training::{train, TrainConfig, TrainReport};
use qpfit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn box_problem(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize, state_box: Option<StateBox>) -> Result<LinearMpcProblem> {
    let (n, m) = (a.nrows(), b.ncols());
    let q = DMatrix::identity(n, n);
    let r = DMatrix::identity(m, m);
    let p = dare_solve(&a, &b, &q, &r)?.p;
    Ok(LinearMpcProblem {
        a,
        b,
        q,
        r,
        p,
        horizon,
        state_box,
        input_set: Some(Polyhedron::from_box(&DVector::from_element(m, -1.0), &DVector::from_element(m, 1.0))),
        terminal_set: None,
        x_ref: DVector::zeros(0),
        u_ref: DVector::zeros(0),
    })
}

fn double_integrator(horizon: usize) -> Result<LinearMpcProblem> {
    box_problem(dmatrix![1.0, 1.0; 0.0, 1.0], dmatrix![0.5; 1.0], horizon, None)
}

fn toy_problem() -> LinearMpcProblem {
    LinearMpcProblem {
        a: dmatrix![1.0],
        b: dmatrix![1.0],
        q: dmatrix![1.0],
        r: dmatrix![1.0],
        p: dmatrix![1.0],
        horizon: 1,
        state_box: None,
        input_set: Some(Polyhedron::from_box(&dvector![-1.0], &dvector![1.0])),
        terminal_set: None,
        x_ref: DVector::zeros(0),
        u_ref: DVector::zeros(0),
    }
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let suite = GradCheckSuite {
        instances: 200,
        seed: 1,
        step: 1e-5,
        max_n: 4,
        max_m: 3,
        max_nz: 8,
    };
    let total = run_gradcheck_suite(&suite)?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        total.passes(1e-4) && total.checked > 0 && secs <= 60.0,
        format!(
            "200 instances, {} entries checked, {} skipped at active-set changes, max rel err {:.2e} ({}), {:.2} s",
            total.checked,
            total.skipped,
            total.max_rel_err,
            total.worst_entry.as_deref().unwrap_or("-"),
            secs
        ),
    )
}

fn exact_deviation(prob: &LinearMpcProblem, lo: f64, hi: f64, seed: u64) -> Result<f64> {
    let c = condense(prob)?;
    let net = construct_exact(&c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut used = 0;
    while used < 100 {
        let x = DVector::from_fn(prob.n(), |_, _| rng.gen_range(lo..hi));
        let Some(u) = c.oracle_control(&x)? else { continue };
        worst = worst.max((forward(&net, &x)?.y4 - u).amax());
        used += 1;
    }
    Ok(worst)
}

fn criterion_2() -> Result<Outcome> {
    let toy = exact_deviation(&toy_problem(), -5.0, 5.0, 2)?;
    let di2 = exact_deviation(&double_integrator(2)?, -5.0, 5.0, 3)?;
    let di3 = exact_deviation(&double_integrator(3)?, -5.0, 5.0, 4)?;
    let worst = toy.max(di2).max(di3);
    outcome(
        worst <= 1e-6,
        format!("max |net − oracle|: toy {toy:.1e}, double integrator H=2 {di2:.1e}, H=3 {di3:.1e}"),
    )
}

struct TrainedSize {
    n_z: usize,
    net: QpNetParams,
    report: TrainReport,
    pwa: PwaController,
}

struct Study {
    params: ConverterParams,
    model: ConverterModel,
    condensed: CondensedQp,
    dataset: Dataset,
    sizes: Vec<TrainedSize>,
    initial_conditions: Vec<DVector<f64>>,
    secs: f64,
}

fn converter_study() -> Result<Study> {
    let start = Instant::now();
    let params = ConverterParams::default();
    let model = build_model(&params)?;
    let prob = assemble_mpc(&model, &params)?;
    let condensed = condense(&prob)?;
    let dataset = sample_dataset(&condensed, &ConverterModel::state_box(), 5000, 2024)?;
    let projection = model.projection(&params);
    let mut sizes = Vec::new();
    for n_z in [1, 6, 7] {
        let mut cfg = TrainConfig::new(n_z);
        cfg.seed = 7;
        let (net, report) = train(&dataset, &projection, &cfg)?;
        let pwa = enumerate_regions(&net)?;
        sizes.push(TrainedSize { n_z, net, report, pwa });
    }
    let initial_conditions = default_initial_conditions(|x| Ok(condensed.oracle_control_physical(x)?.is_some()))?;
    Ok(Study {
        params,
        model,
        condensed,
        dataset,
        sizes,
        initial_conditions,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_3(study: &Study) -> Result<Outcome> {
    let sbox = ConverterModel::state_box();
    let mut pass = true;
    let mut parts = Vec::new();
    for s in &study.sizes {
        let bound_ok = s.pwa.region_count() <= 1usize << s.n_z;
        let mut rng = ChaCha8Rng::seed_from_u64(30 + s.n_z as u64);
        let mut worst = 0.0f64;
        let mut unlocated = 0;
        for _ in 0..10_000 {
            let x = sbox.sample(&mut rng);
            let implicit = forward(&s.net, &x)?.y4;
            match locate_and_eval(&s.pwa, &x) {
                Ok(u) => worst = worst.max((u - implicit).amax()),
                Err(_) => unlocated += 1,
            }
        }
        pass &= bound_ok && worst <= 1e-8 && unlocated == 0;
        parts.push(format!(
            "n_z={}: {} regions (bound {}), max dev {:.1e}, unlocated {}",
            s.n_z,
            s.pwa.region_count(),
            1usize << s.n_z,
            worst,
            unlocated
        ));
    }
    outcome(pass, parts.join("; "))
}

fn closed_loop(study: &Study, net: &QpNetParams) -> Result<Vec<(Option<String>, SteadyStateMetrics)>> {
    study
        .initial_conditions
        .iter()
        .map(|x0| {
            let traj = simulate(&study.model, |x| Ok(Some(forward(net, x)?.y4)), x0, 50)?;
            Ok((traj.halted.clone(), steady_state_metrics(&traj, &study.model.x_eq)?))
        })
        .collect()
}

fn criterion_4(study: &Study) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in study.sizes.iter().filter(|s| s.n_z >= 6) {
        let runs = closed_loop(study, &s.net)?;
        let ok = runs.iter().all(|(halted, ss)| halted.is_none() && ss.within_spec());
        pass &= ok;
        let worst = |f: fn(&SteadyStateMetrics) -> f64| runs.iter().map(|(_, ss)| f(ss)).fold(0.0, f64::max);
        parts.push(format!(
            "n_z={}: worst i_dm {:.3} A, i_cm {:.2}%, v_out {:.2}% over {} runs",
            s.n_z,
            worst(|ss| ss.i_dm1.max(ss.i_dm2)),
            worst(|ss| ss.i_cm_pct),
            worst(|ss| ss.v_out_pct),
            runs.len()
        ));
    }
    outcome(pass, format!("{} (study {:.0} s)", parts.join("; "), study.secs))
}

fn criterion_5(study: &Study) -> Result<Outcome> {
    let limit = 64_000;
    let mut pass = true;
    let mut parts = Vec::new();
    for s in study.sizes.iter().filter(|s| s.n_z >= 6) {
        let bytes = s.pwa.storage_bytes();
        pass &= bytes <= limit;
        parts.push(format!("n_z={}: {} B", s.n_z, bytes));
    }
    outcome(pass, format!("{} (limit {limit} B)", parts.join(", ")))
}

fn criterion_6(study: &Study) -> Result<Outcome> {
    let loss = |nz: usize| study.sizes.iter().find(|s| s.n_z == nz).map(|s| s.report.best_loss).unwrap();
    let (l1, l7) = (loss(1), loss(7));
    outcome(
        l7 <= l1,
        format!("best loss n_z=1 {l1:.3e}, n_z=6 {:.3e}, n_z=7 {l7:.3e}", loss(6)),
    )
}

fn rk4_zoh(model: &ConverterModel, steps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = model.sample_time / steps as f64;
    let f = |s: &DMatrix<f64>| {
        let mut d = &model.a_ct * s;
        let mut right = d.columns_mut(4, 3);
        right += &model.b_ct;
        d
    };
    let mut s = DMatrix::zeros(4, 7);
    s.view_mut((0, 0), (4, 4)).fill_with_identity();
    for _ in 0..steps {
        let k1 = f(&s);
        let k2 = f(&(&s + &k1 * (h / 2.0)));
        let k3 = f(&(&s + &k2 * (h / 2.0)));
        let k4 = f(&(&s + &k3 * h));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    (s.columns(0, 4).into_owned(), s.columns(4, 3).into_owned())
}

fn criterion_7(study: &Study) -> Result<Outcome> {
    let prob = assemble_mpc(&study.model, &study.params)?;
    let dare = dare_solve(&prob.a, &prob.b, &prob.q, &prob.r)?;
    let (a_rk, b_rk) = rk4_zoh(&study.model, 10_000);
    let zoh = (a_rk - &study.model.a).amax().max((b_rk - &study.model.b).amax());

    // Condensed MPC QPs on a subset of the dataset states.
    let c = &study.condensed;
    let mut qp_kkt = 0.0f64;
    for i in (0..study.dataset.len()).step_by(10) {
        let x = study.dataset.states.row(i).transpose() - &c.x_ref;
        let sol = c.solve(&x)?;
        if sol.status != QpStatus::Solved {
            return outcome(false, format!("dataset state {i} is not solvable"));
        }
        let r = kkt_residuals(&(&c.hessian * 2.0), &(c.cross.transpose() * &x), &c.ineq_matrix, &c.rhs(&x), &sol.primal, &sol.dual);
        qp_kkt = qp_kkt.max(r.max());
    }
    // pQP layers of every trained network.
    let mut pqp_kkt = 0.0f64;
    for s in &study.sizes {
        for i in (0..study.dataset.len()).step_by(10) {
            let trace = forward(&s.net, &study.dataset.states.row(i).transpose())?;
            pqp_kkt = pqp_kkt.max(trace.kkt_residual(&s.net));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut sqrt_res = 0.0f64;
    let mut pinv_res = 0.0f64;
    for k in 0..50 {
        let n = 2 + k % 6;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let spd = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let s = spd_sqrt(&spd)?;
        sqrt_res = sqrt_res.max((&s * &s - &spd).amax());
        // Rank-deficient rectangular matrix.
        let r = 1 + k % 3;
        let m = DMatrix::from_fn(n + 1, r, |_, _| rng.gen_range(-1.0..1.0))
            * DMatrix::from_fn(r, n, |_, _| rng.gen_range(-1.0..1.0));
        let pi = pseudo_inverse(&m)?;
        pinv_res = pinv_res
            .max((&m * &pi * &m - &m).amax())
            .max((&pi * &m * &pi - &pi).amax());
    }
    let pass = dare.residual <= 1e-8 && zoh <= 1e-9 && qp_kkt <= 1e-8 && pqp_kkt <= 1e-8 && sqrt_res <= 1e-10 && pinv_res <= 1e-10;
    outcome(
        pass,
        format!(
            "DARE residual {:.1e}, ZOH vs RK4 {zoh:.1e}, MPC QP KKT {qp_kkt:.1e}, pQP KKT {pqp_kkt:.1e}, spd_sqrt {sqrt_res:.1e}, pinv {pinv_res:.1e}",
            dare.residual
        ),
    )
}

fn criterion_8() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut first_move = 0.0f64;
    let mut recovery = 0.0f64;
    let mut problems = 0;
    let mut states = 0;
    while problems < 5 {
        let n = rng.gen_range(2..=3);
        let m = rng.gen_range(1..=2);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)) + DMatrix::identity(n, n) * 0.5;
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let horizon = rng.gen_range(2..=4);
        let sbox = StateBox::new(DVector::from_element(n, -5.0), DVector::from_element(n, 5.0))?;
        let Ok(prob) = box_problem(a, b, horizon, Some(sbox.clone())) else { continue };
        let c = condense(&prob)?;
        let dual = assemble_dual(&c)?;
        let mut used = 0;
        let mut tries = 0;
        while used < 50 && tries < 5000 {
            tries += 1;
            let x = sbox.sample(&mut rng);
            let Some(u) = c.oracle_control(&x)? else { continue };
            let Some(us) = sparse_first_move(&prob, &x)? else {
                return outcome(false, format!("sparse form infeasible where condensed is feasible at {x}"));
            };
            first_move = first_move.max((&u - us).amax());
            let primal = c.solve(&x)?.primal;
            let Some(d) = dual.solve(&x)? else {
                return outcome(false, format!("dual reports infeasible at {x}"));
            };
            recovery = recovery.max((d.primal - primal).amax());
            used += 1;
        }
        if used == 50 {
            problems += 1;
            states += used;
        }
    }
    outcome(
        first_move <= 1e-6 && recovery <= 1e-6,
        format!("{problems} problems, {states} states: condensed vs sparse {first_move:.1e}, dual recovery {recovery:.1e}"),
    )
}

fn report(id: usize, name: &str, r: Result<Outcome>) -> bool {
    let (pass, detail) = match r {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient fidelity", criterion_1());
    all &= report(2, "exact construction", criterion_2());
    match converter_study() {
        Ok(study) => {
            all &= report(3, "explicit/implicit equivalence", criterion_3(&study));
            all &= report(4, "converter closed-loop spec", criterion_4(&study));
            all &= report(5, "explicit storage", criterion_5(&study));
            all &= report(6, "loss versus size", criterion_6(&study));
            all &= report(7, "numerical kernels", criterion_7(&study));
        }
        Err(e) => {
            for (id, name) in [
                (3, "explicit/implicit equivalence"),
                (4, "converter closed-loop spec"),
                (5, "explicit storage"),
                (6, "loss versus size"),
                (7, "numerical kernels"),
            ] {
                println!("criterion {id} [FAIL] {name}: converter study failed: {e}");
            }
            all = false;
        }
    }
    all &= report(8, "oracle self-consistency", criterion_8());
    if !all {
        std::process::exit(1);
    }
}

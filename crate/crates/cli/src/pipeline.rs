use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DVector;
use qpfit::converter::{
    self, assemble_mpc, build_model, default_initial_conditions, steady_state_metrics, ConverterModel,
    ConverterParams, SteadyStateMetrics, Trajectory,
};
use qpfit::dataset::{sample_dataset, Dataset};
use qpfit::mpc::{condense as condense_problem, CondensedQp, LinearMpcProblem, StateBox};
use qpfit::pwa::{complexity_report, enumerate_regions, locate_and_eval, ComplexityReport, PwaController};
use qpfit::qpnet::{construct_exact, forward, run_gradcheck_suite, GradCheckReport, ModelFile, Projection, QpNetParams};
use qpfit::training::TrainReport;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, ProblemSource};
use crate::CliError;

const DATASET_STEM: &str = "dataset";
const EXACT: &str = "exact";

/// Any JSON artifact, stamped with the hash of the config that produced it.
#[derive(Debug, Serialize, Deserialize)]
struct Artifact<T> {
    config_hash: String,
    #[serde(flatten)]
    body: T,
}

struct Problem {
    mpc: LinearMpcProblem,
    condensed: CondensedQp,
    converter: Option<(ConverterParams, ConverterModel)>,
    /// Physical coordinates.
    sampling_box: StateBox,
    /// Output layer for learned networks, physical coordinates.
    projection: Projection,
}

pub struct Context {
    cfg: PipelineConfig,
    out: PathBuf,
    hash: String,
}

impl Context {
    pub fn new(cfg: PipelineConfig, out: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let hash = cfg.hash();
        Ok(Context { cfg, out, hash })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, body: T) -> Result<(), CliError> {
        let art = Artifact {
            config_hash: self.hash.clone(),
            body,
        };
        write(&self.path(name), serde_json::to_string_pretty(&art)?)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, CliError> {
        let path = self.path(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Io(format!("{}: {e} (run the upstream command first)", path.display())))?;
        let art: Artifact<T> = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if art.config_hash != self.hash {
            warn!("{} was produced by config {}, current config is {}", path.display(), art.config_hash, self.hash);
        }
        Ok(art.body)
    }

    fn problem(&self) -> Result<Problem, CliError> {
        let (mpc, converter) = match &self.cfg.problem {
            ProblemSource::Converter { params } => {
                let model = build_model(params)?;
                (assemble_mpc(&model, params)?, Some((params.clone(), model)))
            }
            ProblemSource::File { path } => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let mpc: LinearMpcProblem =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                mpc.validate()?;
                (mpc, None)
            }
        };
        let condensed = condense_problem(&mpc)?;
        let sampling_box = match (&self.cfg.sampling.sampling_box, &converter, &mpc.state_box) {
            (Some(b), _, _) => b.clone(),
            (None, Some(_), _) => ConverterModel::state_box(),
            (None, None, Some(b)) => b.shifted(&mpc.x_ref()),
            (None, None, None) => {
                return Err(CliError::Config("sampling.box is required when the problem has no state box".into()))
            }
        };
        if sampling_box.dim() != mpc.n() {
            return Err(CliError::Config(format!(
                "sampling box has dimension {}, problem has {} states",
                sampling_box.dim(),
                mpc.n()
            )));
        }
        let projection = match (&converter, &mpc.input_set) {
            (Some((params, model)), _) => model.projection(params),
            (None, Some(set)) => {
                // u ∈ U + u_ref  ⇔  H u ≤ h + H u_ref.
                let shifted = numkit::Polyhedron::new(set.a.clone(), &set.b + &set.a * mpc.u_ref()).map_err(qpfit::Error::from)?;
                Projection::from_polyhedron(&shifted)?
            }
            (None, None) => Projection::None,
        };
        Ok(Problem {
            mpc,
            condensed,
            converter,
            sampling_box,
            projection,
        })
    }

    /// `(label, params)` for every configured size, plus the exact network
    /// when enabled.
    fn models(&self) -> Result<Vec<(String, QpNetParams)>, CliError> {
        let mut out = Vec::new();
        for n_z in &self.cfg.training.sizes {
            let label = format!("nz{n_z}");
            let m: ModelFile = self.read_json(&format!("model_{label}.json"))?;
            out.push((label, m.params));
        }
        if self.cfg.export.exact {
            let m: ModelFile = self.read_json(&format!("model_{EXACT}.json"))?;
            out.push((EXACT.to_string(), m.params));
        }
        Ok(out)
    }

    fn initial_conditions(&self, prob: &Problem) -> Result<Vec<DVector<f64>>, CliError> {
        if let Some(ics) = &self.cfg.simulation.initial_conditions {
            if ics.is_empty() || ics.iter().any(|x| x.len() != prob.mpc.n()) {
                return Err(CliError::Config(format!(
                    "simulation.initial_conditions must be non-empty lists of {} entries",
                    prob.mpc.n()
                )));
            }
            return Ok(ics.iter().map(|x| DVector::from_column_slice(x)).collect());
        }
        if prob.converter.is_some() {
            return Ok(default_initial_conditions(|x| Ok(prob.condensed.oracle_control_physical(x)?.is_some()))?);
        }
        Err(CliError::Config("simulation.initial_conditions is required for this problem".into()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn condense(ctx: &Context) -> Result<(), CliError> {
    let prob = ctx.problem()?;
    let c = &prob.condensed;
    ctx.write_json("condensed.json", c)?;
    println!(
        "condensed: {} decisions, {} constraints, problem {}, config {}",
        c.num_decisions(),
        c.num_constraints(),
        c.problem_hash,
        ctx.hash
    );
    Ok(())
}

pub fn sample(ctx: &Context) -> Result<(), CliError> {
    let prob = ctx.problem()?;
    let s = &ctx.cfg.sampling;
    let ds = sample_dataset(&prob.condensed, &prob.sampling_box, s.count, s.seed)?;
    ds.save(&ctx.out, DATASET_STEM)?;
    ctx.write_json(&format!("{DATASET_STEM}.json"), &ds.meta)?;
    println!(
        "sampled {} states ({} drawn, acceptance {:.1}%)",
        ds.len(),
        ds.meta.attempts,
        100.0 * ds.len() as f64 / ds.meta.attempts as f64
    );
    Ok(())
}

fn load_dataset(ctx: &Context, prob: &Problem) -> Result<Dataset, CliError> {
    let ds = Dataset::load(&ctx.out, DATASET_STEM)
        .map_err(|e| CliError::Io(format!("dataset in {}: {e} (run `qpfit sample` first)", ctx.out.display())))?;
    if ds.meta.problem_hash != prob.condensed.problem_hash {
        return Err(CliError::Config("the dataset was sampled for a different problem; re-run `qpfit sample`".into()));
    }
    Ok(ds)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let prob = ctx.problem()?;
    let ds = load_dataset(ctx, &prob)?;
    let mut summary = String::from("n_z,best_loss,best_restart,wall_time_s\n");
    for &n_z in &ctx.cfg.training.sizes {
        let cfg = ctx.cfg.training.for_size(n_z);
        info!("training n_z = {n_z} ({} restarts, {} epochs)", cfg.restarts, cfg.epochs);
        let (params, report) = qpfit::training::train(&ds, &prob.projection, &cfg)?;
        ctx.write_json(&format!("model_nz{n_z}.json"), ModelFile::new(params, &ds.label_scale))?;
        ctx.write_json(&format!("train_nz{n_z}.json"), &report)?;
        write(&ctx.path(&format!("loss_nz{n_z}.csv")), report.loss_csv())?;
        summary.push_str(&format!("{n_z},{:?},{},{:?}\n", report.best_loss, report.best_restart, report.wall_time_s));
        println!("n_z = {n_z}: best loss {:.4e} (restart {})", report.best_loss, report.best_restart);
    }
    write(&ctx.path("losses.csv"), summary)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportReport {
    label: String,
    complexity: ComplexityReport,
    /// Largest `|explicit − implicit|` over the check states.
    max_deviation: f64,
    /// Check states no region claimed.
    unlocated: usize,
    samples: usize,
}

fn deviation(net: &QpNetParams, pwa: &PwaController, sbox: &StateBox, samples: usize, seed: u64) -> Result<(f64, usize), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut unlocated = 0;
    for _ in 0..samples {
        let x = sbox.sample(&mut rng);
        let implicit = forward(net, &x)?.y4;
        match locate_and_eval(pwa, &x) {
            Ok(u) => worst = worst.max((u - implicit).amax()),
            Err(qpfit::Error::NoRegion(_)) => unlocated += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((worst, unlocated))
}

pub fn export(ctx: &Context) -> Result<(), CliError> {
    let prob = ctx.problem()?;
    if ctx.cfg.export.exact {
        let net = construct_exact(&prob.condensed)?;
        let scale = DVector::from_element(net.m, 1.0);
        ctx.write_json(&format!("model_{EXACT}.json"), ModelFile::new(net, &scale))?;
    }
    let samples = ctx.cfg.export.samples;
    let mut reports = Vec::new();
    for (label, net) in ctx.models()? {
        let pwa = enumerate_regions(&net)?;
        let complexity = complexity_report(&pwa, &prob.sampling_box, samples.max(1), ctx.cfg.sampling.seed)?;
        let (max_deviation, unlocated) = deviation(&net, &pwa, &prob.sampling_box, samples, ctx.cfg.sampling.seed ^ 0x5eed)?;
        ctx.write_json(&format!("pwa_{label}.json"), &pwa)?;
        write(&ctx.path(&format!("pwa_{label}.bin")), pwa.to_binary())?;
        println!(
            "{label}: {} regions, {} bytes, max explicit/implicit deviation {:.2e}, {} unlocated",
            complexity.region_count, complexity.storage_bytes, max_deviation, unlocated
        );
        reports.push(ExportReport {
            label,
            complexity,
            max_deviation,
            unlocated,
            samples,
        });
    }
    ctx.write_json("export.json", Reports { reports })
}

#[derive(Debug, Serialize, Deserialize)]
struct Reports<T> {
    reports: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSummary {
    controller: String,
    initial_condition: usize,
    x0: Vec<f64>,
    halted: Option<String>,
    steady_state: Option<SteadyStateMetrics>,
}

type Controller<'a> = Box<dyn Fn(&DVector<f64>) -> qpfit::Result<Option<DVector<f64>>> + 'a>;

fn controllers<'a>(
    prob: &'a Problem,
    models: &'a [(String, QpNetParams)],
    pwas: &'a [PwaController],
) -> Vec<(String, Controller<'a>)> {
    let mut out: Vec<(String, Controller<'a>)> = vec![(
        "oracle".into(),
        Box::new(move |x: &DVector<f64>| prob.condensed.oracle_control_physical(x)),
    )];
    for ((label, net), pwa) in models.iter().zip(pwas) {
        out.push((format!("implicit_{label}"), Box::new(move |x: &DVector<f64>| Ok(Some(forward(net, x)?.y4)))));
        out.push((format!("explicit_{label}"), Box::new(move |x: &DVector<f64>| locate_and_eval(pwa, x).map(Some))));
    }
    out
}

fn run_closed_loop(ctx: &Context, prob: &Problem, ctrl: &Controller, x0: &DVector<f64>) -> Result<Trajectory, CliError> {
    let steps = ctx.cfg.simulation.steps;
    Ok(converter::simulate_linear(&prob.mpc.a, &prob.mpc.b, |x| ctrl(x), x0, steps)?)
}

fn simulate_all(ctx: &Context, prob: &Problem, write_csv: bool) -> Result<Vec<RunSummary>, CliError> {
    let models = ctx.models()?;
    let pwas = models
        .iter()
        .map(|(_, net)| enumerate_regions(net))
        .collect::<qpfit::Result<Vec<_>>>()?;
    let ics = ctx.initial_conditions(prob)?;
    let mut runs = Vec::new();
    for (name, ctrl) in controllers(prob, &models, &pwas) {
        for (i, x0) in ics.iter().enumerate() {
            let traj = run_closed_loop(ctx, prob, &ctrl, x0)?;
            if write_csv {
                let csv = match &prob.converter {
                    Some((params, model)) => traj.to_csv(model, params),
                    None => traj.to_csv_plain(),
                };
                write(&ctx.path(&format!("traj_{name}_ic{i}.csv")), csv)?;
            }
            let steady_state = match &prob.converter {
                Some((_, model)) if traj.halted.is_none() => Some(steady_state_metrics(&traj, &model.x_eq)?),
                _ => None,
            };
            if let Some(h) = &traj.halted {
                warn!("{name} from initial condition {i}: {h}");
            }
            runs.push(RunSummary {
                controller: name.clone(),
                initial_condition: i,
                x0: x0.iter().copied().collect(),
                halted: traj.halted,
                steady_state,
            });
        }
    }
    Ok(runs)
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let prob = ctx.problem()?;
    let runs = simulate_all(ctx, &prob, true)?;
    for r in &runs {
        let status = match (&r.halted, &r.steady_state) {
            (Some(_), _) => "halted".to_string(),
            (None, Some(ss)) => format!(
                "SS i_dm {:.3}/{:.3} A, i_cm {:.2}%, v_out {:.2}%{}",
                ss.i_dm1,
                ss.i_dm2,
                ss.i_cm_pct,
                ss.v_out_pct,
                if ss.settled { "" } else { " (not settled)" }
            ),
            (None, None) => "completed".to_string(),
        };
        println!("{} ic{}: {status}", r.controller, r.initial_condition);
    }
    ctx.write_json("simulate.json", Reports { reports: runs })
}

#[derive(Debug, Serialize, Deserialize)]
struct EvaluationRow {
    controller: String,
    best_loss: Option<f64>,
    region_count: Option<usize>,
    storage_bytes: Option<usize>,
    eval_time_max_s: Option<f64>,
    max_deviation: Option<f64>,
    /// Worst steady-state errors over the initial conditions.
    ss_i_dm_a: Option<f64>,
    ss_i_cm_pct: Option<f64>,
    ss_v_out_pct: Option<f64>,
    halted_runs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Evaluation {
    rows: Vec<EvaluationRow>,
    failures: Vec<String>,
    passed: bool,
}

fn worst_ss(runs: &[&RunSummary]) -> (Option<f64>, Option<f64>, Option<f64>, usize) {
    let halted = runs.iter().filter(|r| r.halted.is_some()).count();
    let ss: Vec<&SteadyStateMetrics> = runs.iter().filter_map(|r| r.steady_state.as_ref()).collect();
    if ss.is_empty() {
        return (None, None, None, halted);
    }
    let max = |f: &dyn Fn(&SteadyStateMetrics) -> f64| Some(ss.iter().map(|s| f(s)).fold(0.0, f64::max));
    (
        max(&|s| s.i_dm1.max(s.i_dm2)),
        max(&|s| s.i_cm_pct),
        max(&|s| s.v_out_pct),
        halted,
    )
}

fn fmt_opt(v: Option<f64>, scale: f64, prec: usize) -> String {
    v.map_or("-".into(), |v| format!("{:.*}", prec, v * scale))
}

fn table(rows: &[EvaluationRow]) -> String {
    let mut out = format!(
        "{:<16} {:>10} {:>8} {:>12} {:>14} {:>12} {:>10} {:>10}\n",
        "controller", "loss", "regions", "storage kB", "worst eval us", "max dev", "SS dm A", "SS cm %"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>10} {:>8} {:>12} {:>14} {:>12} {:>10} {:>10}\n",
            r.controller,
            r.best_loss.map_or("-".into(), |v| format!("{v:.3e}")),
            r.region_count.map_or("-".into(), |v| v.to_string()),
            r.storage_bytes.map_or("-".into(), |v| format!("{:.1}", v as f64 / 1000.0)),
            fmt_opt(r.eval_time_max_s, 1e6, 1),
            r.max_deviation.map_or("-".into(), |v| format!("{v:.1e}")),
            fmt_opt(r.ss_i_dm_a, 1.0, 3),
            fmt_opt(r.ss_i_cm_pct.into_iter().chain(r.ss_v_out_pct).reduce(f64::max), 1.0, 2),
        ));
    }
    out
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let prob = ctx.problem()?;
    let export: Reports<ExportReport> = ctx.read_json("export.json")?;
    let runs = simulate_all(ctx, &prob, false)?;
    let ev = &ctx.cfg.evaluation;
    let mut rows = Vec::new();
    let mut failures = Vec::new();

    let oracle_runs: Vec<&RunSummary> = runs.iter().filter(|r| r.controller == "oracle").collect();
    let (dm, cm, vo, halted) = worst_ss(&oracle_runs);
    rows.push(EvaluationRow {
        controller: "oracle".into(),
        best_loss: None,
        region_count: None,
        storage_bytes: None,
        eval_time_max_s: None,
        max_deviation: None,
        ss_i_dm_a: dm,
        ss_i_cm_pct: cm,
        ss_v_out_pct: vo,
        halted_runs: halted,
    });

    for (label, _) in ctx.models()? {
        let rep = export
            .reports
            .iter()
            .find(|r| r.label == label)
            .ok_or_else(|| CliError::Io(format!("export.json has no entry for {label}; re-run `qpfit export`")))?;
        let best_loss = match label.strip_prefix("nz") {
            Some(_) => Some(ctx.read_json::<TrainReport>(&format!("train_{label}.json"))?.best_loss),
            None => None,
        };
        let name = format!("explicit_{label}");
        let explicit_runs: Vec<&RunSummary> = runs.iter().filter(|r| r.controller == name).collect();
        let (dm, cm, vo, halted) = worst_ss(&explicit_runs);
        if rep.max_deviation > ev.max_deviation || rep.unlocated > 0 {
            failures.push(format!(
                "{label}: explicit/implicit deviation {:.2e} (limit {:.1e}), {} unlocated states",
                rep.max_deviation, ev.max_deviation, rep.unlocated
            ));
        }
        let n_z = label.strip_prefix("nz").and_then(|s| s.parse::<usize>().ok());
        if prob.converter.is_some() && n_z.is_some_and(|n| ev.require_spec.contains(&n)) {
            let ok = halted == 0
                && explicit_runs
                    .iter()
                    .all(|r| r.steady_state.as_ref().is_some_and(|ss| ss.within_spec()));
            if !ok {
                failures.push(format!(
                    "{label}: closed loop misses the steady-state spec ({} A / {} %)",
                    converter::SS_DM_LIMIT,
                    converter::SS_REL_LIMIT_PCT
                ));
            }
        }
        rows.push(EvaluationRow {
            controller: label,
            best_loss,
            region_count: Some(rep.complexity.region_count),
            storage_bytes: Some(rep.complexity.storage_bytes),
            eval_time_max_s: Some(rep.complexity.eval_time_max_s),
            max_deviation: Some(rep.max_deviation),
            ss_i_dm_a: dm,
            ss_i_cm_pct: cm,
            ss_v_out_pct: vo,
            halted_runs: halted,
        });
    }

    let text = table(&rows);
    print!("{text}");
    write(&ctx.path("evaluation.txt"), &text)?;
    let passed = failures.is_empty();
    ctx.write_json(
        "evaluation.json",
        Evaluation {
            rows,
            failures: failures.clone(),
            passed,
        },
    )?;
    if passed {
        println!("evaluation: PASS");
        Ok(())
    } else {
        Err(CliError::Acceptance(failures.join("; ")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GradcheckArtifact {
    report: GradCheckReport,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    let g = &ctx.cfg.gradcheck;
    let report = run_gradcheck_suite(&g.suite)?;
    let passed = report.checked > 0 && report.passes(g.tolerance);
    println!(
        "gradcheck: {} ({} entries checked, {} skipped, max relative error {:.3e})",
        if passed { "PASS" } else { "FAIL" },
        report.checked,
        report.skipped,
        report.max_rel_err
    );
    let worst = report.worst_entry.clone();
    ctx.write_json(
        "gradcheck.json",
        GradcheckArtifact {
            report,
            tolerance: g.tolerance,
            passed,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("gradient check failed at {}", worst.unwrap_or_default())))
    }
}

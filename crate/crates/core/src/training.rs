//! Supervised fitting of the network to a dataset with mini-batch Adam.
//!
//! Training runs on internally normalized coordinates (inputs standardized,
//! pre-projection outputs standardized); the normalization is folded into
//! F, f, G, g so the returned network maps physical states to physical
//! inputs.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::qpnet::{ParamGradients, Projection, QpNetParams, Workspace};
use crate::{Error, Result};

/// Mean squared error and its gradient `2(pred − label)/m`.
pub fn mse_loss(pred: &DVector<f64>, label: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if pred.len() != label.len() {
        return Err(Error::Dimension("prediction and label lengths differ".into()));
    }
    let m = pred.len() as f64;
    let diff = pred - label;
    Ok((diff.norm_squared() / m, diff * (2.0 / m)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one slot per parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamGradients,
    pub v: ParamGradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &QpNetParams) -> Self {
        AdamState {
            m: ParamGradients::zeros(p.n, p.m, p.n_z),
            v: ParamGradients::zeros(p.n, p.m, p.n_z),
            t: 0,
        }
    }
}

fn param_blocks_mut(p: &mut QpNetParams) -> [&mut [f64]; 5] {
    [
        p.f_mat.as_mut_slice(),
        p.f_vec.as_mut_slice(),
        p.l.as_mut_slice(),
        p.g_mat.as_mut_slice(),
        p.g_vec.as_mut_slice(),
    ]
}

fn grad_blocks(g: &ParamGradients) -> [&[f64]; 5] {
    [g.f_mat.as_slice(), g.f_vec.as_slice(), g.l.as_slice(), g.g_mat.as_slice(), g.g_vec.as_slice()]
}

fn grad_blocks_mut(g: &mut ParamGradients) -> [&mut [f64]; 5] {
    [
        g.f_mat.as_mut_slice(),
        g.f_vec.as_mut_slice(),
        g.l.as_mut_slice(),
        g.g_mat.as_mut_slice(),
        g.g_vec.as_mut_slice(),
    ]
}

/// One bias-corrected Adam update of F, f, L, G, g.
pub fn adam_step(state: &mut AdamState, params: &mut QpNetParams, grads: &ParamGradients, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let gs = grad_blocks(grads);
    let ms = grad_blocks_mut(&mut state.m);
    let vs = grad_blocks_mut(&mut state.v);
    let ps = param_blocks_mut(params);
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

fn default_batch() -> usize {
    50
}
fn default_epochs() -> usize {
    150
}
fn default_restarts() -> usize {
    10
}
fn default_eps() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    pub n_z: usize,
    /// Regularization ε of the pQP layer.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// When set, the learning rate decays geometrically from
    /// `adam.learning_rate` in the first epoch to this value in the last.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
}

impl TrainConfig {
    pub fn new(n_z: usize) -> Self {
        TrainConfig {
            batch_size: default_batch(),
            epochs: default_epochs(),
            adam: AdamConfig::default(),
            seed: 0,
            n_z,
            eps: default_eps(),
            restarts: default_restarts(),
            final_learning_rate: None,
        }
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let lr0 = self.adam.learning_rate;
        match self.final_learning_rate {
            Some(lr1) if self.epochs > 1 => lr0 * (lr1 / lr0).powf(epoch as f64 / (self.epochs - 1) as f64),
            _ => lr0,
        }
    }

    pub fn validate(&self, samples: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::Training(msg.into()));
        if self.n_z == 0 {
            return bad("n_z must be positive");
        }
        if self.batch_size == 0 || self.batch_size > samples {
            return bad("batch size must be between 1 and the dataset size");
        }
        if self.epochs == 0 || self.restarts == 0 {
            return bad("epochs and restarts must be positive");
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.eps > 0.0 && self.eps > 0.0) {
            return bad("learning rate, Adam ε and pQP ε must be positive");
        }
        if self.final_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return bad("final learning rate must be positive");
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub restart: usize,
    /// Mean mini-batch loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-dataset loss of the final parameters; `None` if the run diverged.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_z: usize,
    pub restarts: Vec<RestartReport>,
    pub best_restart: usize,
    pub best_loss: f64,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// `epoch,restart_0,restart_1,…` with blanks after a divergence.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch");
        for r in &self.restarts {
            out.push_str(&format!(",restart_{}", r.restart));
        }
        out.push('\n');
        let epochs = self.restarts.iter().map(|r| r.epoch_losses.len()).max().unwrap_or(0);
        for e in 0..epochs {
            out.push_str(&(e + 1).to_string());
            for r in &self.restarts {
                out.push(',');
                if let Some(v) = r.epoch_losses.get(e) {
                    out.push_str(&format!("{v:?}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Affine standardization of inputs and pre-projection outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub x_mean: DVector<f64>,
    pub x_std: DVector<f64>,
    pub y_mean: DVector<f64>,
    pub y_std: DVector<f64>,
}

fn column_stats(data: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = data.nrows() as f64;
    let mean = DVector::from_fn(data.ncols(), |j, _| data.column(j).sum() / n);
    let std = DVector::from_fn(data.ncols(), |j, _| {
        let var = data.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
        if var.sqrt() > 1e-12 * (1.0 + mean[j].abs()) {
            var.sqrt()
        } else {
            1.0
        }
    });
    (mean, std)
}

/// Labels mapped back through the projection's output transform, so the
/// statistics describe `y₃` rather than `û`.
fn pre_projection_targets(labels: &DMatrix<f64>, projection: &Projection) -> Result<DMatrix<f64>> {
    match projection {
        Projection::PsiSaturation { psi, .. } => {
            let inv = psi
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Projection("Ψ is singular".into()))?;
            Ok(labels * inv.transpose())
        }
        _ => Ok(labels.clone()),
    }
}

impl Normalization {
    pub fn fit(dataset: &Dataset, projection: &Projection) -> Result<Self> {
        let (x_mean, x_std) = column_stats(&dataset.states);
        let (y_mean, y_std) = column_stats(&pre_projection_targets(&dataset.labels, projection)?);
        Ok(Normalization {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    /// Physical-coordinate parameters from normalized ones.
    pub fn fold(&self, p: &QpNetParams, out: &mut QpNetParams) {
        out.clone_from(p);
        for j in 0..p.n {
            for i in 0..p.n_z {
                out.f_mat[(i, j)] = p.f_mat[(i, j)] / self.x_std[j];
                out.f_vec[i] -= p.f_mat[(i, j)] * self.x_mean[j] / self.x_std[j];
            }
        }
        for i in 0..p.m {
            for k in 0..p.n_z {
                out.g_mat[(i, k)] = self.y_std[i] * p.g_mat[(i, k)];
            }
            out.g_vec[i] = self.y_mean[i] + self.y_std[i] * p.g_vec[i];
        }
    }

    /// Chain rule through [`Normalization::fold`].
    pub fn unfold_gradients(&self, g: &ParamGradients, out: &mut ParamGradients) {
        out.clone_from(g);
        let (nz, n) = g.f_mat.shape();
        for j in 0..n {
            for i in 0..nz {
                out.f_mat[(i, j)] = (g.f_mat[(i, j)] - g.f_vec[i] * self.x_mean[j]) / self.x_std[j];
            }
        }
        for i in 0..g.g_vec.len() {
            for k in 0..nz {
                out.g_mat[(i, k)] = self.y_std[i] * g.g_mat[(i, k)];
            }
            out.g_vec[i] = self.y_std[i] * g.g_vec[i];
        }
    }
}

/// Scaled loss `mean_j (s_j (û_j − u_j))²` and its gradient in `û`.
fn sample_loss(pred: &[f64], label: &[f64], scale: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    let m = pred.len() as f64;
    let mut loss = 0.0;
    for j in 0..pred.len() {
        let r = scale[j] * (pred[j] - label[j]);
        loss += r * r;
        grad[j] = weight * 2.0 * scale[j] * r / m;
    }
    loss / m
}

/// Mean scaled loss of a physical-coordinate network over the dataset.
pub fn dataset_loss(p: &QpNetParams, dataset: &Dataset) -> Result<f64> {
    let mut ws = Workspace::new(p);
    let mut grad = vec![0.0; p.m];
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let x: Vec<f64> = dataset.states.row(i).iter().copied().collect();
        let u: Vec<f64> = dataset.labels.row(i).iter().copied().collect();
        ws.forward(&x)?;
        total += sample_loss(&ws.y4, &u, dataset.label_scale.as_slice(), 1.0, &mut grad);
    }
    Ok(total / dataset.len() as f64)
}

struct Rows {
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

fn run_restart(
    dataset: &Dataset,
    rows: &Rows,
    projection: &Projection,
    norm: &Normalization,
    cfg: &TrainConfig,
    restart: usize,
) -> Result<(RestartReport, Option<QpNetParams>)> {
    let (n, m) = (dataset.states.ncols(), dataset.labels.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut theta = QpNetParams::random(n, m, cfg.n_z, cfg.eps, projection.clone(), &mut rng);
    let mut physical = theta.clone();
    let mut adam = AdamState::new(&theta);
    let mut ws = Workspace::new(&theta);
    let mut g_phys = ParamGradients::zeros(n, m, cfg.n_z);
    let mut g_norm = g_phys.clone();
    let mut dl = vec![0.0; m];
    let scale = dataset.label_scale.as_slice();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = RestartReport {
        restart,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        final_loss: None,
    };
    let mut adam_cfg = cfg.adam;
    for epoch in 0..cfg.epochs {
        adam_cfg.learning_rate = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            norm.fold(&theta, &mut physical);
            ws.load(&physical);
            g_phys.fill_zero();
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                ws.forward(&rows.x[i])?;
                batch_loss += sample_loss(&ws.y4, &rows.u[i], scale, w, &mut dl);
                ws.backward(&dl, &mut g_phys)?;
            }
            batch_loss *= w;
            if !batch_loss.is_finite() || !g_phys.is_finite() {
                log::warn!("restart {restart} diverged");
                return Ok((report, None));
            }
            norm.unfold_gradients(&g_phys, &mut g_norm);
            adam_step(&mut adam, &mut theta, &g_norm, &adam_cfg);
            epoch_sum += batch_loss;
            batches += 1;
        }
        report.epoch_losses.push(epoch_sum / batches as f64);
    }
    norm.fold(&theta, &mut physical);
    let final_loss = dataset_loss(&physical, dataset)?;
    if !final_loss.is_finite() {
        return Ok((report, None));
    }
    report.final_loss = Some(final_loss);
    Ok((report, Some(physical)))
}

/// Trains `cfg.restarts` independent initializations (in parallel) and
/// returns the one with the lowest final full-dataset loss.
pub fn train(dataset: &Dataset, projection: &Projection, cfg: &TrainConfig) -> Result<(QpNetParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    cfg.validate(dataset.len())?;
    projection.validate(dataset.labels.ncols())?;
    let start = Instant::now();
    let norm = Normalization::fit(dataset, projection)?;
    let rows = Rows {
        x: dataset.states.row_iter().map(|r| r.iter().copied().collect()).collect(),
        u: dataset.labels.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    let runs: Vec<Result<(RestartReport, Option<QpNetParams>)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(dataset, &rows, projection, &norm, cfg, r))
        .collect();
    let mut reports = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(usize, f64, QpNetParams)> = None;
    for run in runs {
        let (rep, params) = run?;
        if let (Some(loss), Some(p)) = (rep.final_loss, params) {
            if best.as_ref().is_none_or(|b| loss < b.1) {
                best = Some((rep.restart, loss, p));
            }
        }
        reports.push(rep);
    }
    let (best_restart, best_loss, params) =
        best.ok_or_else(|| Error::Training(format!("all {} restarts diverged", cfg.restarts)))?;
    Ok((
        params,
        TrainReport {
            n_z: cfg.n_z,
            restarts: reports,
            best_restart,
            best_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{label_scale, DatasetMeta};
    use crate::mpc::StateBox;
    use crate::qpnet::forward;
    use nalgebra::dvector;
    use rand::Rng;

    fn dataset_from(states: DMatrix<f64>, labels: DMatrix<f64>) -> Dataset {
        let scale = label_scale(&labels);
        let n = states.ncols();
        Dataset {
            meta: DatasetMeta {
                n,
                m: labels.ncols(),
                count: states.nrows(),
                label_scale: scale.clone(),
                seed: 0,
                sampling_box: StateBox::new(DVector::from_element(n, -1.0), DVector::from_element(n, 1.0)).unwrap(),
                problem_hash: String::new(),
                attempts: states.nrows(),
            },
            states,
            labels,
            label_scale: scale,
        }
    }

    fn teacher_dataset(samples: usize) -> (QpNetParams, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut teacher = QpNetParams::random(2, 1, 2, 1e-4, Projection::None, &mut rng);
        teacher.f_vec = dvector![0.2, -0.1];
        let states = DMatrix::from_fn(samples, 2, |_, _| rng.gen_range(-1.0..1.0));
        let labels = DMatrix::from_fn(samples, 1, |i, _| {
            forward(&teacher, &states.row(i).transpose()).unwrap().y4[0]
        });
        (teacher, dataset_from(states, labels))
    }

    #[test]
    fn mse_examples() {
        let (l, _) = mse_loss(&dvector![1.0, 2.0], &dvector![1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = mse_loss(&dvector![1.0, 0.0], &dvector![0.0, 0.0]).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g, dvector![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let t = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let (_, g) = mse_loss(&p, &t).unwrap();
            for k in 0..3 {
                let h = 1e-6;
                let mut a = p.clone();
                a[k] += h;
                let mut b = p.clone();
                b[k] -= h;
                let fd = (mse_loss(&a, &t).unwrap().0 - mse_loss(&b, &t).unwrap().0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-8);
            }
        }
    }

    fn tiny_params() -> QpNetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        QpNetParams::random(2, 1, 2, 1e-4, Projection::None, &mut rng)
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut st, &mut p, &ParamGradients::zeros(2, 1, 2), &AdamConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn adam_matches_reference_and_blocks_are_independent() {
        // Scalar reference implementation.
        fn reference(theta: f64, grads: &[f64], lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let (mut m, mut v, mut th) = (0.0, 0.0, theta);
            for (t, g) in grads.iter().enumerate() {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t as i32 + 1));
                let vh = v / (1.0 - b2.powi(t as i32 + 1));
                th -= lr * mh / (vh.sqrt() + eps);
            }
            th
        }
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let mut g = ParamGradients::zeros(2, 1, 2);
        g.l[(0, 1)] = 0.37;
        let seq = [0.37, 0.37, 0.37];
        for _ in 0..3 {
            adam_step(&mut st, &mut p, &g, &AdamConfig::default());
        }
        let expect = reference(before.l[(0, 1)], &seq, 1e-3);
        assert!((p.l[(0, 1)] - expect).abs() < 1e-15);
        // One step moves by about lr.
        assert!((before.l[(0, 1)] - p.l[(0, 1)] - 3e-3).abs() < 1e-6);
        assert_eq!(p.f_mat, before.f_mat);
        assert_eq!(p.g_vec, before.g_vec);
        assert_eq!(p.l[(1, 0)], before.l[(1, 0)]);
    }

    #[test]
    fn small_step_reduces_single_sample_loss() {
        let (_, data) = teacher_dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = QpNetParams::random(2, 1, 2, 1e-4, Projection::None, &mut rng);
        p.g_vec[0] = 1.0;
        let before = dataset_loss(&p, &data).unwrap();
        let t = forward(&p, &data.states.row(0).transpose()).unwrap();
        let diff = (t.y4[0] - data.labels[(0, 0)]) * data.label_scale[0];
        let grad = crate::qpnet::backward(&t, &p, &dvector![2.0 * diff * data.label_scale[0]]).unwrap();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 1e-6,
            ..AdamConfig::default()
        };
        adam_step(&mut st, &mut p, &grad, &cfg);
        assert!(dataset_loss(&p, &data).unwrap() < before);
    }

    #[test]
    fn folding_preserves_predictions() {
        let (_, data) = teacher_dataset(50);
        let norm = Normalization {
            x_mean: dvector![0.3, -2.0],
            x_std: dvector![2.0, 0.5],
            y_mean: dvector![4.0],
            y_std: dvector![3.0],
        };
        let theta = tiny_params();
        let mut phys = theta.clone();
        norm.fold(&theta, &mut phys);
        for i in 0..5 {
            let x = data.states.row(i).transpose();
            let xn = (&x - &norm.x_mean).component_div(&norm.x_std);
            let inner = forward(&theta, &xn).unwrap().y4[0];
            let outer = forward(&phys, &x).unwrap().y4[0];
            assert!((outer - (4.0 + 3.0 * inner)).abs() < 1e-12);
        }
        // Gradient chain rule against the folded parameters.
        let x = data.states.row(0).transpose();
        let t = forward(&phys, &x).unwrap();
        let gp = crate::qpnet::backward(&t, &phys, &dvector![1.0]).unwrap();
        let mut gn = gp.clone();
        norm.unfold_gradients(&gp, &mut gn);
        let h = 1e-6;
        let eval = |q: &QpNetParams| {
            let mut out = q.clone();
            norm.fold(q, &mut out);
            forward(&out, &x).unwrap().y4[0]
        };
        for (i, j) in [(0, 0), (1, 1)] {
            let mut a = theta.clone();
            a.f_mat[(i, j)] += h;
            let mut b = theta.clone();
            b.f_mat[(i, j)] -= h;
            let fd = (eval(&a) - eval(&b)) / (2.0 * h);
            assert!((fd - gn.f_mat[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let mut a = theta.clone();
        a.g_vec[0] += h;
        let mut b = theta.clone();
        b.g_vec[0] -= h;
        assert!(((eval(&a) - eval(&b)) / (2.0 * h) - gn.g_vec[0]).abs() < 1e-6);
    }

    #[test]
    fn realizable_target_is_fit_and_deterministic() {
        let (_, data) = teacher_dataset(200);
        let mut cfg = TrainConfig::new(2);
        cfg.epochs = 2000;
        cfg.batch_size = 20;
        cfg.restarts = 5;
        cfg.adam.learning_rate = 1e-2;
        cfg.final_learning_rate = Some(1e-4);
        let (params, report) = train(&data, &Projection::None, &cfg).unwrap();
        assert!(report.best_loss < 1e-5, "best loss {}", report.best_loss);
        let best = report
            .restarts
            .iter()
            .filter_map(|r| r.final_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_loss, best);
        assert!((dataset_loss(&params, &data).unwrap() - best).abs() < 1e-15);
        let (_, again) = train(&data, &Projection::None, &cfg).unwrap();
        assert_eq!(again.restarts, report.restarts);
        assert!(report.loss_csv().starts_with("epoch,restart_0,restart_1,restart_2,restart_3,restart_4\n1,"));
    }

    #[test]
    fn config_validation() {
        let (_, data) = teacher_dataset(10);
        let mut cfg = TrainConfig::new(2);
        assert!(train(&data, &Projection::None, &cfg).is_err());
        cfg.batch_size = 5;
        cfg.adam.learning_rate = 0.0;
        assert!(train(&data, &Projection::None, &cfg).is_err());
    }
}

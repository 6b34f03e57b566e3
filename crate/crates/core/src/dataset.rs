//! Labeled samples of the MPC law and their on-disk format.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mpc::{CondensedQp, StateBox};
use crate::serde_util::vector;
use crate::{Error, Result};

/// Acceptance rates below this over the probe batch abort sampling.
pub const MIN_ACCEPTANCE: f64 = 1e-3;
const PROBE: usize = 1000;

/// `N` state/control pairs in physical coordinates. Row `i` of `labels` is
/// the first move of the MPC law at row `i` of `states`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub states: DMatrix<f64>,
    pub labels: DMatrix<f64>,
    pub label_scale: DVector<f64>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub m: usize,
    pub count: usize,
    #[serde(with = "vector")]
    pub label_scale: DVector<f64>,
    pub seed: u64,
    pub sampling_box: StateBox,
    pub problem_hash: String,
    /// Candidates drawn, including rejected ones.
    pub attempts: usize,
}

/// Per-component `1/std` (population), or 1 where the spread vanishes.
pub fn label_scale(labels: &DMatrix<f64>) -> DVector<f64> {
    let n = labels.nrows() as f64;
    DVector::from_fn(labels.ncols(), |j, _| {
        let col = labels.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            1.0 / sd
        } else {
            1.0
        }
    })
}

/// Draws uniform states from `sampling_box` (physical coordinates) and
/// keeps the feasible ones until `count` labeled pairs exist.
///
/// The result depends only on the seed: candidates come from a single
/// seeded stream and are labeled in parallel with order preserved.
pub fn sample_dataset(c: &CondensedQp, sampling_box: &StateBox, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Sampling("sample count must be at least 1".into()));
    }
    if sampling_box.dim() != c.n {
        return Err(Error::Dimension(format!(
            "sampling box has dimension {}, problem has {}",
            sampling_box.dim(),
            c.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(count);
    let mut labels: Vec<DVector<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while states.len() < count {
        let needed = count - states.len();
        let batch = if attempts == 0 {
            PROBE.max(needed)
        } else {
            let rate = (states.len() as f64 / attempts as f64).max(MIN_ACCEPTANCE);
            ((needed as f64 / rate * 1.1).ceil() as usize).clamp(64, 1 << 20)
        };
        let cands: Vec<DVector<f64>> = (0..batch).map(|_| sampling_box.sample(&mut rng)).collect();
        let labeled: Vec<Result<Option<DVector<f64>>>> =
            cands.par_iter().map(|x| c.oracle_control_physical(x)).collect();
        let mut accepted_here = 0;
        for (x, u) in cands.into_iter().zip(labeled) {
            if let Some(u) = u? {
                accepted_here += 1;
                if states.len() < count {
                    states.push(x);
                    labels.push(u);
                }
            }
        }
        if attempts == 0 && (accepted_here as f64) < MIN_ACCEPTANCE * batch as f64 {
            return Err(Error::Sampling(format!(
                "only {accepted_here} of {batch} probe states are feasible; use a smaller sampling box"
            )));
        }
        attempts += batch;
    }
    let states = DMatrix::from_fn(count, c.n, |i, j| states[i][j]);
    let labels = DMatrix::from_fn(count, c.m, |i, j| labels[i][j]);
    let scale = label_scale(&labels);
    Ok(Dataset {
        meta: DatasetMeta {
            n: c.n,
            m: c.m,
            count,
            label_scale: scale.clone(),
            seed,
            sampling_box: sampling_box.clone(),
            problem_hash: c.problem_hash.clone(),
            attempts,
        },
        states,
        labels,
        label_scale: scale,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_csv(&self) -> String {
        let (n, m) = (self.states.ncols(), self.labels.ncols());
        let mut out = String::new();
        let header: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=m).map(|j| format!("u{j}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> = self
                .states
                .row(i)
                .iter()
                .chain(self.labels.row(i).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Dataset> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let text = fs::read_to_string(dir.join(format!("{stem}.csv")))?;
        let (states, labels) = parse_csv(&text, meta.n, meta.m)?;
        if states.nrows() != meta.count {
            return Err(Error::Format(format!(
                "dataset CSV has {} rows, sidecar says {}",
                states.nrows(),
                meta.count
            )));
        }
        Ok(Dataset {
            label_scale: meta.label_scale.clone(),
            states,
            labels,
            meta,
        })
    }
}

fn parse_csv(text: &str, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty dataset CSV".into()))?;
    if header.split(',').count() != n + m {
        return Err(Error::Format(format!("dataset header has wrong width: {header}")));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Format(format!("dataset row {}: {e}", k + 1)))?;
        if vals.len() != n + m {
            return Err(Error::Format(format!("dataset row {} has {} fields", k + 1, vals.len())));
        }
        rows.push(vals);
    }
    let states = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    let labels = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][n + j]);
    Ok((states, labels))
}

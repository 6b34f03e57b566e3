use std::path::{Path, PathBuf};

use qpfit::converter::ConverterParams;
use qpfit::mpc::StateBox;
use qpfit::qpnet::GradCheckSuite;
use qpfit::training::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Which MPC problem the pipeline works on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSource {
    /// The built-in three-phase converter regulation problem.
    Converter {
        #[serde(default)]
        params: ConverterParams,
    },
    /// A `LinearMpcProblem` JSON file. Relative paths resolve against the
    /// config file's directory.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Physical-coordinate sampling box. Defaults to the problem's state
    /// box (the physical box for the converter).
    #[serde(default, rename = "box")]
    pub sampling_box: Option<StateBox>,
}

fn default_count() -> usize {
    5000
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            count: default_count(),
            seed: 0,
            sampling_box: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Network sizes `n_z` to train.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sizes() -> Vec<usize> {
    (1..=7).collect()
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

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            sizes: default_sizes(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            restarts: default_restarts(),
            adam: AdamConfig::default(),
            final_learning_rate: None,
            eps: default_eps(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn for_size(&self, n_z: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: self.adam,
            seed: self.seed,
            n_z,
            eps: self.eps,
            restarts: self.restarts,
            final_learning_rate: self.final_learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Also build and export the exact network of the condensed problem.
    #[serde(default)]
    pub exact: bool,
    /// Uniform states used for timing and the explicit/implicit check.
    #[serde(default = "default_check_samples")]
    pub samples: usize,
}

fn default_check_samples() -> usize {
    10_000
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            exact: false,
            samples: default_check_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Physical initial states; the converter falls back to its default set.
    #[serde(default)]
    pub initial_conditions: Option<Vec<Vec<f64>>>,
}

fn default_steps() -> usize {
    50
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            steps: default_steps(),
            initial_conditions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Sizes whose closed loop must meet the converter steady-state spec.
    #[serde(default = "default_spec_sizes")]
    pub require_spec: Vec<usize>,
    /// Largest tolerated explicit/implicit deviation.
    #[serde(default = "default_max_deviation")]
    pub max_deviation: f64,
}

fn default_spec_sizes() -> Vec<usize> {
    vec![6, 7]
}
fn default_max_deviation() -> f64 {
    1e-6
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            require_spec: default_spec_sizes(),
            max_deviation: default_max_deviation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    #[serde(flatten)]
    pub suite: GradCheckSuite,
    #[serde(default = "default_grad_tol")]
    pub tolerance: f64,
}

fn default_grad_tol() -> f64 {
    1e-4
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            suite: GradCheckSuite::default(),
            tolerance: default_grad_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub problem: ProblemSource,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub export: ExportConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

impl PipelineConfig {
    /// Reads and validates a config, resolving relative problem paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let ProblemSource::File { path: p } = &mut cfg.problem {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if let ProblemSource::File { path } = &self.problem {
            if !path.is_file() {
                return bad(format!("problem file {} does not exist", path.display()));
            }
        }
        if self.sampling.count == 0 {
            return bad("sampling.count must be positive".into());
        }
        if self.training.sizes.iter().any(|&s| s == 0 || s > 24) {
            return bad("training.sizes must lie in 1..=24".into());
        }
        if self.simulation.steps < qpfit::converter::SS_WINDOW {
            return bad(format!("simulation.steps must be at least {}", qpfit::converter::SS_WINDOW));
        }
        if !(self.evaluation.max_deviation >= 0.0) || !(self.gradcheck.tolerance > 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        for n_z in &self.training.sizes {
            self.training
                .for_size(*n_z)
                .validate(self.sampling.count)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Seeds every randomized stage with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.sampling.seed = seed;
        self.training.seed = seed;
        self.gradcheck.suite.seed = seed;
    }

    /// SHA-256 of the canonical JSON of the config, excluding the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

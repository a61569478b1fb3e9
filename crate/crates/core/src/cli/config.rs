//! Run configuration: a JSON document whose fields the command-line flags
//! mirror and override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::daruan::DaruanInit;
use crate::data::feynman_spec;
use crate::distill::DistillConfig;
use crate::error::{QkanError, Result};
use crate::train::{LbfgsConfig, OptimizerConfig};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "QKAN_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "qkan-out";
/// Equation id selecting the sinc target instead of a Feynman formula.
pub const SINC: &str = "sinc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    GenData,
    Regression,
    Eval,
    Spectrum,
    Extend,
    Distill,
    MnistDemo,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::GenData => "gen-data",
            Task::Regression => "regression",
            Task::Eval => "eval",
            Task::Spectrum => "spectrum",
            Task::Extend => "extend",
            Task::Distill => "distill",
            Task::MnistDemo => "mnist-demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumWeights {
    /// All encoding weights 1.
    Unit,
    /// `w_l = 2^(l-1)`.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSettings {
    pub weights: SpectrumWeights,
    /// Residual bound for the check.
    pub tolerance: f64,
    /// Edge inspected when a checkpoint is given: `[layer, out, in]`.
    pub edge: [usize; 3],
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        SpectrumSettings {
            weights: SpectrumWeights::Geometric,
            tolerance: 1e-8,
            edge: [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistSettings {
    /// Directory holding the four standard IDX files.
    pub dir: Option<PathBuf>,
    pub digits: [u8; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for MnistSettings {
    fn default() -> Self {
        MnistSettings {
            dir: None,
            digits: [0, 1],
            n_train: 2000,
            n_test: 1000,
            hidden: Vec::new(),
            lr: 1e-3,
            batch_size: 100,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Checked against the subcommand when present.
    pub task: Option<Task>,
    /// Feynman id such as `I.12.11`, or `sinc`.
    pub equation: String,
    /// Directory with `train.csv` and `test.csv`; generated data otherwise.
    pub dataset: Option<PathBuf>,
    /// Defaults to the equation's shape (`[1, 1]` for sinc).
    pub shape: Option<Vec<usize>>,
    pub r: usize,
    pub init: DaruanInit,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// One training run per seed; the best by test RMSE is kept.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    /// Relative noise for Feynman targets; absolute noise std for sinc.
    pub noise_frac: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub out_dir: Option<PathBuf>,
    /// Input checkpoint for `eval`, `spectrum`, `extend` and `distill`.
    pub checkpoint: Option<PathBuf>,
    /// Single CSV file read by `eval` and `distill`.
    pub data_file: Option<PathBuf>,
    pub spectrum: SpectrumSettings,
    pub new_r: Option<usize>,
    pub distill: DistillConfig,
    pub mnist: MnistSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            equation: "I.12.11".into(),
            dataset: None,
            shape: None,
            r: 3,
            init: DaruanInit::default(),
            optimizer: OptimizerConfig::Lbfgs(LbfgsConfig::default()),
            epochs: 200,
            seeds: vec![0, 1, 2, 3, 4],
            data_seed: 0,
            noise_frac: 0.1,
            n_train: 1000,
            n_test: 1000,
            out_dir: None,
            checkpoint: None,
            data_file: None,
            spectrum: SpectrumSettings::default(),
            new_r: None,
            distill: DistillConfig::default(),
            mnist: MnistSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QkanError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            // serde reports the unknown or mistyped field in its message.
            QkanError::config("config", format!("{}: {e}", path.display()))
        })
    }

    /// Schema checks run before any work begins.
    pub fn validate(&self, task: Task) -> Result<()> {
        if let Some(t) = self.task {
            if t != task {
                return Err(QkanError::config(
                    "task",
                    format!("config is for `{}` but the command is `{}`", t.name(), task.name()),
                ));
            }
        }
        if self.equation != SINC {
            feynman_spec(&self.equation).map_err(|e| QkanError::config("equation", e.to_string()))?;
        }
        if let Some(shape) = &self.shape {
            if shape.len() < 2 || shape.contains(&0) {
                return Err(QkanError::config("shape", format!("need >= 2 positive entries, got {shape:?}")));
            }
            if self.dataset.is_none() && shape[0] != self.input_arity() {
                return Err(QkanError::config(
                    "shape",
                    format!("first entry {} does not match the equation arity {}", shape[0], self.input_arity()),
                ));
            }
            if shape[shape.len() - 1] != 1 && task == Task::Regression {
                return Err(QkanError::config("shape", "regression networks need a single output"));
            }
        }
        if self.r == 0 {
            return Err(QkanError::config("r", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(QkanError::config("seeds", "at least one seed is required"));
        }
        if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
            return Err(QkanError::config("noise_frac", format!("must be >= 0, got {}", self.noise_frac)));
        }
        if matches!(task, Task::GenData | Task::Regression) && self.dataset.is_none() {
            if self.n_train == 0 {
                return Err(QkanError::config("n_train", "must be >= 1"));
            }
            if self.n_test == 0 {
                return Err(QkanError::config("n_test", "must be >= 1"));
            }
        }
        if !(self.init.angle_range >= 0.0 && self.init.angle_range.is_finite()) {
            return Err(QkanError::config("init.angle_range", "must be finite and >= 0"));
        }
        if !(self.spectrum.tolerance > 0.0) {
            return Err(QkanError::config("spectrum.tolerance", "must be > 0"));
        }
        if self.distill.grid == 0 {
            return Err(QkanError::config("distill.grid", "must be >= 1"));
        }
        if self.distill.degree == 0 {
            return Err(QkanError::config("distill.degree", "must be >= 1"));
        }
        if self.distill.samples_per_edge < self.distill.grid + self.distill.degree {
            return Err(QkanError::config("distill.samples_per_edge", "must be >= grid + degree"));
        }
        if let Some(n) = self.new_r {
            if n == 0 {
                return Err(QkanError::config("new_r", "must be >= 1"));
            }
        }
        if task == Task::MnistDemo {
            let m = &self.mnist;
            if m.digits[0] == m.digits[1] || m.digits.iter().any(|d| *d > 9) {
                return Err(QkanError::config("mnist.digits", "need two distinct digits 0-9"));
            }
            if m.n_train == 0 || m.n_test == 0 {
                return Err(QkanError::config("mnist.n_train", "sample counts must be >= 1"));
            }
            if !(m.lr > 0.0 && m.lr.is_finite()) {
                return Err(QkanError::config("mnist.lr", "must be positive"));
            }
            if m.batch_size == 0 {
                return Err(QkanError::config("mnist.batch_size", "must be >= 1"));
            }
        }
        let probe = crate::train::TrainConfig {
            optimizer: self.optimizer.clone(),
            epochs: self.epochs,
            objective: crate::train::Objective::Mse,
            seed: 0,
        };
        probe.validate()
    }

    pub fn input_arity(&self) -> usize {
        if self.equation == SINC {
            1
        } else {
            feynman_spec(&self.equation).map_or(0, |s| s.arity)
        }
    }

    pub fn resolved_shape(&self) -> Vec<usize> {
        match &self.shape {
            Some(s) => s.clone(),
            None if self.equation == SINC => vec![1, 1],
            None => feynman_spec(&self.equation).map_or_else(|_| vec![1, 1], |s| s.default_shape.to_vec()),
        }
    }

    /// Flag, then config, then the environment, then the built-in default.
    pub fn resolve_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.task = None;
        let bytes = serde_json::to_vec(&c).expect("config is always serializable");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

use std::path::Path;

use exitflow_core::backbone::{HeadProtocol, OracleConfig, ToyPolicyConfig, TrainSettings};
use exitflow_core::calibration::{DiscrepancyMetric, ExitFamily, QuantileMode};
use exitflow_core::numkernel::{AdamWConfig, RngStream};
use exitflow_core::runtime::CostModel;
use exitflow_core::synthbench::SyntheticTaskSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Version stamped into every artifact this tool writes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Toy,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub toy: ToyPolicyConfig,
    /// Horizon and action dimension come from the task.
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Standard deviation of each arc component of the oracle's target.
    #[serde(default = "default_mixture_std")]
    pub mixture_std: f64,
}

fn default_mixture_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub settings: TrainSettings,
}

fn default_steps() -> u64 {
    2000
}

fn default_batch() -> usize {
    64
}

/// AdamW settings; the schedule length is the run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = AdamWConfig::default();
        Self {
            base_lr: 3e-3,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            warmup_steps: d.warmup_steps,
        }
    }
}

fn default_optimizer() -> OptimizerSection {
    OptimizerSection::default()
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            optimizer: OptimizerSection::default(),
            settings: TrainSettings::default(),
        }
    }
}

impl TrainSection {
    pub fn adamw(&self) -> AdamWConfig {
        let o = &self.optimizer;
        AdamWConfig {
            base_lr: o.base_lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            warmup_steps: o.warmup_steps.min(self.steps),
            total_steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub metric: DiscrepancyMetric,
    pub family: ExitFamily,
    /// Criterion values to calibrate; one schedule per (protocol, c).
    pub c_grid: Vec<f64>,
    /// σ (gaussian) or scale (gamma); ignored for exponential.
    pub spread: Option<f64>,
    pub mode: QuantileMode,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            metric: DiscrepancyMetric::L2,
            family: ExitFamily::Exponential,
            c_grid: vec![1.0, 0.8, 0.7, 0.4, 0.1],
            spread: None,
            mode: QuantileMode::Renormalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Head protocols to calibrate and benchmark.
    pub protocols: Vec<HeadProtocol>,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            protocols: vec![HeadProtocol::Mlp],
        }
    }
}

/// Everything a pipeline run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub task: SyntheticTaskSpec,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub cost: CostModel,
}

/// Named child streams of the run seed.
pub enum Purpose {
    TrainData = 1,
    CalibrationData = 2,
    EvalData = 3,
    ModelInit = 4,
    Training = 5,
    Calibration = 6,
    Bench = 7,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        Self::parse(&text).map_err(|e| e.context(&format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::config(m));
        self.task.validate().map_err(CliError::config_from)?;
        self.cost.validate().map_err(CliError::config_from)?;
        match self.model.kind {
            ModelKind::Toy => {
                let t = &self.model.toy;
                t.validate().map_err(CliError::config_from)?;
                if t.horizon != self.task.horizon || t.action_dim != self.task.action_dim {
                    return bad(format!(
                        "model.toy chunk shape {}x{} differs from the task's {}x{}",
                        t.horizon, t.action_dim, self.task.horizon, self.task.action_dim
                    ));
                }
                if t.visual_dim != 4 || t.instructions != 2 || t.state_dim != self.task.state_dim {
                    return bad("model.toy input sizes must be visual_dim = 4, instructions = 2 and the task's state_dim".into());
                }
                for p in &self.runtime.protocols {
                    if !t.heads.contains(&p.kind()) {
                        return bad(format!(
                            "runtime protocol needs the {} head, which model.toy.heads lacks",
                            p.kind()
                        ));
                    }
                }
                if !t.heads.contains(&self.train.settings.head) {
                    return bad(format!(
                        "train.settings.head {} is not in model.toy.heads",
                        self.train.settings.head
                    ));
                }
            }
            ModelKind::Oracle => {
                let o = OracleConfig {
                    horizon: self.task.horizon,
                    action_dim: self.task.action_dim,
                    ..self.model.oracle.clone()
                };
                o.validate().map_err(CliError::config_from)?;
                if !(self.model.mixture_std > 0.0) {
                    return bad("model.mixture_std must be > 0".into());
                }
            }
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be ≥ 1".into());
        }
        self.train
            .adamw()
            .validate()
            .map_err(CliError::config_from)?;
        self.train
            .settings
            .validate()
            .map_err(CliError::config_from)?;
        if self.runtime.protocols.is_empty() {
            return bad("runtime.protocols is empty".into());
        }
        for p in &self.runtime.protocols {
            p.validate().map_err(CliError::config_from)?;
        }
        if self.calibration.c_grid.is_empty()
            || self
                .calibration
                .c_grid
                .iter()
                .any(|c| !(*c > 0.0 && c.is_finite()))
        {
            return bad("calibration.c_grid must be non-empty with every c > 0".into());
        }
        if let Some(s) = self.calibration.spread {
            if !(s > 0.0 && s.is_finite()) {
                return bad("calibration.spread must be > 0".into());
            }
        }
        for (name, n) in [
            ("train_size", self.task.train_size),
            ("calibration_size", self.task.calibration_size),
            ("eval_size", self.task.eval_size),
        ] {
            if n == 0 {
                return bad(format!("task.{name} must be ≥ 1"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding of the parsed config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn stream(&self, purpose: Purpose) -> RngStream {
        RngStream::new(self.seed).fork(purpose as u64)
    }

    /// Seed for a child purpose that takes a plain `u64`.
    pub fn derived_seed(&self, purpose: Purpose) -> u64 {
        self.stream(purpose).next_u64()
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{CostParams, NetworkProfile};
use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::failure::{self, FailureRateSpec, FailureTrace};
use crate::model::{Activation, BlockInit, ModelSpec, Task};
use crate::pipeline::ScheduleMode;
use crate::recovery::{StrategyConfig, StrategyKind};

/// Iteration time used to convert hourly failure rates at the 5% and 10% settings.
pub const REFERENCE_ITERATION_SECONDS: f64 = 91.32;
/// Iteration time used at the 16% setting.
pub const REFERENCE_ITERATION_SECONDS_16: f64 = 92.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub model_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub num_stages: usize,
    /// Uneven partitions; defaults to an even split.
    pub layers_per_stage: Option<Vec<usize>>,
    pub activation: Activation,
    pub task: Task,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 64,
            model_dim: 32,
            output_dim: 32,
            num_layers: 8,
            num_stages: 4,
            layers_per_stage: None,
            activation: Activation::Tanh,
            task: Task::Regression,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec::new(
            self.input_dim,
            self.hidden_dim,
            self.model_dim,
            self.output_dim,
            self.num_layers,
            self.num_stages,
        )?
        .with_activation(self.activation)
        .with_task(self.task);
        match &self.layers_per_stage {
            None => Ok(spec),
            Some(sizes) => {
                let mut start = 0;
                let ranges = sizes
                    .iter()
                    .map(|&n| {
                        let r = start..start + n;
                        start += n;
                        r
                    })
                    .collect();
                spec.with_partition(ranges)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Scale of the student's block weights at initialization.
    pub init_gain: f64,
    /// Fraction of block-weight variance shared by all layers at initialization.
    pub init_correlation: f64,
    pub batch_size: usize,
    pub num_microbatches: usize,
    /// Executed iterations, rolled-back ones included.
    pub total_iterations: u64,
    pub eval_interval: u64,
    pub target_loss: Option<f64>,
    pub stop_at_target: bool,
    /// Iteration from which CheckFree+ (or `swap = true`) uses the swapped schedule.
    pub swap_from: u64,
    /// Forces the swapped schedule regardless of strategy.
    pub swap: Option<bool>,
}

impl TrainingConfig {
    pub fn block_init(&self) -> Result<BlockInit> {
        BlockInit::new(self.init_gain, self.init_correlation)
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            init_gain: 1.0,
            init_correlation: 0.0,
            batch_size: 256,
            num_microbatches: 8,
            total_iterations: 2000,
            eval_interval: 50,
            target_loss: None,
            stop_at_target: true,
            swap_from: 0,
            swap: None,
        }
    }
}

/// Where failure events come from. At most one of `p_iter`, `p_hour` and `trace`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureConfig {
    pub p_iter: Option<f64>,
    pub p_hour: Option<f64>,
    pub iteration_seconds: f64,
    pub trace: Option<PathBuf>,
    /// Trace seed; the run seed when absent.
    pub seed: Option<u64>,
    /// Whether first and last stages may fail; follows the strategy when absent.
    pub include_edges: Option<bool>,
}

impl Default for FailureConfig {
    fn default() -> Self {
        Self {
            p_iter: None,
            p_hour: None,
            iteration_seconds: REFERENCE_ITERATION_SECONDS,
            trace: None,
            seed: None,
            include_edges: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub training: TrainingConfig,
    pub strategy: StrategyConfig,
    pub failures: FailureConfig,
    pub cost: CostParams,
    /// Network profile file; the synthetic five-site profile when absent.
    pub network: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskConfig {
                label_noise: 0.1,
                ..TaskConfig::default()
            },
            training: TrainingConfig::default(),
            strategy: StrategyConfig::default(),
            failures: FailureConfig::default(),
            cost: CostParams::medium_calibrated(),
            network: None,
            seeds: vec![0],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.model.spec()?;
        self.strategy.validate()?;
        self.cost.validate()?;
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        t.block_init()?;
        if t.batch_size == 0 || t.num_microbatches == 0 {
            return Err(Error::config("batch_size and num_microbatches must be positive"));
        }
        if t.batch_size % t.num_microbatches != 0 {
            return Err(Error::config(format!(
                "batch_size {} is not divisible by num_microbatches {}",
                t.batch_size, t.num_microbatches
            )));
        }
        if t.eval_interval == 0 {
            return Err(Error::config("eval_interval must be positive"));
        }
        if let Some(target) = t.target_loss {
            if !(target > 0.0) {
                return Err(Error::config("target_loss must be positive"));
            }
        }
        if self.schedule_mode() == ScheduleMode::SwappedHalf {
            if t.num_microbatches % 2 != 0 {
                return Err(Error::config(
                    "the swapped schedule needs an even num_microbatches",
                ));
            }
            if spec.num_stages < 4 {
                return Err(Error::config("the swapped schedule needs at least 4 stages"));
            }
        }
        let f = &self.failures;
        let sources = [f.p_iter.is_some(), f.p_hour.is_some(), f.trace.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if sources > 1 {
            return Err(Error::config(
                "set at most one of failures.p_iter, failures.p_hour and failures.trace",
            ));
        }
        if let Some(p) = f.p_iter {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config("p_iter must be in [0, 1)"));
            }
        }
        if let Some(p) = f.p_hour {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config("p_hour must be in [0, 1)"));
            }
        }
        if !(f.iteration_seconds > 0.0) {
            return Err(Error::config("failures.iteration_seconds must be positive"));
        }
        if f.include_edges == Some(true) && !self.strategy.kind.recovers_edges()
            && self.strategy.kind != StrategyKind::NoFailures
        {
            return Err(Error::config(format!(
                "{} cannot recover first or last stages; set failures.include_edges = false",
                self.strategy.kind.name()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        self.model.spec()
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        match self.training.swap {
            Some(true) => ScheduleMode::SwappedHalf,
            Some(false) => ScheduleMode::Standard,
            None => self.strategy.kind.schedule_mode(),
        }
    }

    pub fn with_strategy(&self, kind: StrategyKind) -> Self {
        let mut c = self.clone();
        c.strategy.kind = kind;
        c
    }

    pub fn network_profile(&self) -> Result<NetworkProfile> {
        let s = self.model.num_stages;
        match &self.network {
            Some(path) => NetworkProfile::load(path, s),
            None => Ok(NetworkProfile::geo5(s)),
        }
    }

    fn include_edges(&self) -> bool {
        self.failures
            .include_edges
            .unwrap_or_else(|| self.strategy.kind.recovers_edges())
    }

    /// The trace this run faces: loaded, generated from the rate, or empty.
    pub fn failure_trace(&self, seed: u64) -> Result<FailureTrace> {
        let s = self.model.num_stages;
        let f = &self.failures;
        let n = self.training.total_iterations;
        let eligible = failure::eligible_stages(s, self.include_edges());
        let trace_seed = f.seed.unwrap_or(seed);
        let trace = if let Some(path) = &f.trace {
            FailureTrace::load(path)?
        } else if let Some(p) = f.p_iter {
            FailureTrace::from_per_iteration(p, eligible, trace_seed, n)?
        } else if let Some(p) = f.p_hour {
            let rates = FailureRateSpec::new(p, eligible, trace_seed)?;
            failure::generate_trace(&rates, n, f.iteration_seconds)?
        } else {
            FailureTrace::empty(s)
        };
        trace.validate(Some(s))?;
        Ok(trace)
    }
}

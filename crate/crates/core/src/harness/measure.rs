//! Measurements on trained models: layer-omission sensitivity, stage similarity,
//! the swap and checkpoint-interval ablations, and loss spikes of the reinit
//! strategies on shared failure events.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::compare::desk_target;
use super::config::ExperimentConfig;
use super::record::RunRecord;
use super::run::{run_in_context, validation_loss, Context};
use crate::error::{Error, Result};
use crate::failure::FailureTrace;
use crate::model::{self, Model};
use crate::pipeline::{self, ScheduleMode};
use crate::recovery::{Recoverer, StrategyConfig, StrategyKind, TrainingState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// Omitted layers (zero-based).
    pub omitted: Vec<usize>,
    /// `‖F − m⊙F‖ / ‖F‖` over block parameters.
    pub param_ratio: f64,
    /// `‖f(x) − f_m(x)‖ / ‖f(x)‖` over the probe outputs.
    pub function_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub estimates: Vec<DeltaEstimate>,
    pub delta_param: f64,
    pub delta_function: f64,
}

/// One mask per layer, each omitting exactly that layer (`false` = omitted).
pub fn single_layer_masks(num_layers: usize) -> Vec<Vec<bool>> {
    (0..num_layers)
        .map(|l| (0..num_layers).map(|i| i != l).collect())
        .collect()
}

pub fn estimate_delta(model: &Model, probe: ArrayView2<'_, f64>, masks: &[Vec<bool>]) -> Result<DeltaReport> {
    let spec = &model.spec;
    let order: Vec<usize> = (1..=spec.num_stages).collect();
    let full = model::forward(spec, &model.edges, &model.stages, &order, probe)?.predictions;
    let full_norm = full.iter().map(|v| v * v).sum::<f64>().sqrt();
    let layer_sq: Vec<f64> = (0..spec.num_layers)
        .map(|l| {
            let b = model.block(l);
            b.w1.norm_sq() + b.w2.norm_sq()
        })
        .collect();
    let total_sq: f64 = layer_sq.iter().sum();

    let mut estimates = Vec::with_capacity(masks.len());
    for mask in masks {
        let reduced =
            model::forward_masked(spec, &model.edges, &model.stages, &order, probe, Some(mask))?
                .predictions;
        let diff = full
            .iter()
            .zip(reduced.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let omitted: Vec<usize> = (0..spec.num_layers).filter(|&l| !mask[l]).collect();
        let removed_sq: f64 = omitted.iter().map(|&l| layer_sq[l]).sum();
        estimates.push(DeltaEstimate {
            omitted,
            param_ratio: ratio(removed_sq.sqrt(), total_sq.sqrt()),
            function_ratio: ratio(diff, full_norm),
        });
    }
    Ok(DeltaReport {
        delta_param: estimates.iter().map(|e| e.param_ratio).fold(0.0, f64::max),
        delta_function: estimates.iter().map(|e| e.function_ratio).fold(0.0, f64::max),
        estimates,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Trains a failure-free model for `config` and measures single-layer δ on the probe rows.
pub fn delta_after_training(config: &ExperimentConfig, seed: u64, probe_rows: usize) -> Result<DeltaReport> {
    let cfg = config.with_strategy(StrategyKind::NoFailures);
    let ctx = Context::new(&cfg)?;
    let trace = FailureTrace::empty(cfg.model.num_stages);
    let out = run_in_context(&cfg, seed, &trace, &ctx)?;
    let probe = ctx.dataset.probe(probe_rows);
    estimate_delta(
        &out.state.model,
        probe.inputs.view(),
        &single_layer_masks(cfg.model.num_layers),
    )
}

/// `‖W_a − W_b‖` between two stages of equal size (one-based ids).
pub fn stage_distance(model: &Model, a: usize, b: usize) -> Result<f64> {
    Ok(model
        .stage(a)
        .parameters()
        .distance_sq(&model.stage(b).parameters())?
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub loss: f64,
    pub off_iter: Option<u64>,
    pub on_iter: Option<u64>,
}

impl Milestone {
    /// Iterations the swapped run needed beyond the standard one; `None` if either missed it.
    pub fn gap(&self) -> Option<i64> {
        Some(self.on_iter? as i64 - self.off_iter? as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapAblation {
    pub off: RunRecord,
    pub on: RunRecord,
    pub milestones: Vec<Milestone>,
    /// `‖W_S1 − W_S2‖` at the end of each run.
    pub edge_distance_off: f64,
    pub edge_distance_on: f64,
}

impl SwapAblation {
    /// The swapped run reaches every milestone no earlier than the standard one.
    pub fn swap_not_faster(&self) -> bool {
        self.milestones.iter().all(|m| match (m.on_iter, m.off_iter) {
            (Some(on), Some(off)) => on >= off,
            (None, _) => true,
            (Some(_), None) => false,
        })
    }
}

/// Milestones at these fractions of the standard run's drop in log loss.
pub const MILESTONE_FRACTIONS: [f64; 5] = [0.5, 0.7, 0.8, 0.9, 0.95];

/// Paired failure-free runs with the swapped schedule off and on, same seed.
pub fn ablation_swap(config: &ExperimentConfig, seed: u64) -> Result<SwapAblation> {
    let mut base = config.with_strategy(StrategyKind::NoFailures);
    base.training.target_loss = None;
    let trace = FailureTrace::empty(base.model.num_stages);
    let mut runs = Vec::with_capacity(2);
    for swap in [false, true] {
        let mut cfg = base.clone();
        cfg.training.swap = Some(swap);
        let ctx = Context::new(&cfg)?;
        runs.push(run_in_context(&cfg, seed, &trace, &ctx)?);
    }
    let on = runs.pop().expect("two runs");
    let off = runs.pop().expect("two runs");
    let first = off.record.metrics[0].val_loss;
    let best = off.record.val_losses().into_iter().fold(f64::INFINITY, f64::min);
    let milestones = MILESTONE_FRACTIONS
        .iter()
        .map(|f| {
            let loss = first * (best / first).powf(*f);
            Milestone {
                loss,
                off_iter: off.record.iterations_to(loss),
                on_iter: on.record.iterations_to(loss),
            }
        })
        .collect();
    Ok(SwapAblation {
        edge_distance_off: stage_distance(&off.state.model, 1, 2)?,
        edge_distance_on: stage_distance(&on.state.model, 1, 2)?,
        off: off.record,
        on: on.record,
        milestones,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub strategy: String,
    pub interval: Option<u64>,
    pub iterations_to_target: Option<u64>,
    pub unrecoverable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFrequencyAblation {
    pub target_loss: f64,
    pub rows: Vec<IntervalRow>,
}

/// Checkpointing at each interval and CheckFree+ against one trace, to a shared target.
pub fn ablation_checkpoint_frequency(
    config: &ExperimentConfig,
    seed: u64,
    intervals: &[u64],
    trace: &FailureTrace,
) -> Result<CheckpointFrequencyAblation> {
    let target = match config.training.target_loss {
        Some(t) => t,
        None => {
            let base = config.with_strategy(StrategyKind::NoFailures);
            let ctx = Context::new(&base)?;
            let empty = FailureTrace::empty(base.model.num_stages);
            desk_target(&run_in_context(&base, seed, &empty, &ctx)?.record)?
        }
    };
    let mut kinds: Vec<StrategyKind> = intervals
        .iter()
        .map(|&interval_iters| StrategyKind::Checkpointing { interval_iters })
        .collect();
    kinds.push(StrategyKind::CheckFreePlus);
    let mut rows = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut cfg = config.with_strategy(kind);
        cfg.training.target_loss = Some(target);
        cfg.training.stop_at_target = true;
        let ctx = Context::new(&cfg)?;
        let s = run_in_context(&cfg, seed, trace, &ctx)?.record.summary;
        rows.push(IntervalRow {
            strategy: kind.name().to_string(),
            interval: match kind {
                StrategyKind::Checkpointing { interval_iters } => Some(interval_iters),
                _ => None,
            },
            iterations_to_target: s.iterations_to_target,
            unrecoverable: s.unrecoverable,
        });
    }
    Ok(CheckpointFrequencyAblation {
        target_loss: target,
        rows,
    })
}

/// The reinit strategies compared on identical failures.
pub const REINIT_STRATEGIES: [StrategyKind; 4] = [
    StrategyKind::CheckFree,
    StrategyKind::ReinitUniformAvg,
    StrategyKind::ReinitCopy,
    StrategyKind::ReinitRandom,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEntry {
    pub strategy: String,
    pub reduction_error: f64,
    /// Validation loss right after recovery minus right before.
    pub spike: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub iter: u64,
    pub stage: usize,
    pub entries: Vec<SpikeEntry>,
}

impl SpikeEvent {
    /// Ordering the strategies by reduction error also orders their spikes.
    pub fn is_monotone(&self) -> bool {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| a.reduction_error.total_cmp(&b.reduction_error));
        e.windows(2).all(|w| w[0].spike <= w[1].spike)
    }
}

/// Trains without failures and, at each single-stage event of `trace`, applies every
/// reinit strategy to a copy of the live state and measures the immediate loss spike.
pub fn reinit_spikes(config: &ExperimentConfig, seed: u64, trace: &FailureTrace) -> Result<Vec<SpikeEvent>> {
    let cfg = config.with_strategy(StrategyKind::NoFailures);
    let ctx = Context::new(&cfg)?;
    let spec = cfg.spec()?;
    let schedule =
        pipeline::build_schedule(cfg.training.num_microbatches, ScheduleMode::Standard, spec.num_stages)?;
    let validation = ctx.dataset.validation();
    let mut state = TrainingState::new(Model::init_with(&spec, seed, cfg.training.block_init()?, cfg.training.lr)?);
    let mut out = Vec::new();
    for tick in 0..cfg.training.total_iterations {
        let events = trace.events_at(tick);
        if events.len() == 1 {
            let stage = events[0].stage;
            if stage == 1 || stage == spec.num_stages {
                return Err(Error::config("spike study needs intermediate-stage failures only"));
            }
            let before = validation_loss(&state.model, validation)?;
            let mut entries = Vec::with_capacity(REINIT_STRATEGIES.len());
            for kind in REINIT_STRATEGIES {
                let mut trial = state.clone();
                let strategy = StrategyConfig {
                    kind,
                    ..cfg.strategy
                };
                let mut rec = Recoverer::new(strategy, &trial, seed)?;
                let action = rec.handle_failures(&mut trial, &[stage], tick)?;
                entries.push(SpikeEntry {
                    strategy: kind.name().to_string(),
                    reduction_error: action[0].reduction_error,
                    spike: validation_loss(&trial.model, validation)? - before,
                });
            }
            out.push(SpikeEvent {
                iter: tick,
                stage,
                entries,
            });
        }
        let batch = ctx.dataset.train_batch(state.data_cursor)?;
        pipeline::run_iteration(&mut state.model, &schedule, &batch, tick)?;
        state.progress += 1;
        state.data_cursor += 1;
    }
    Ok(out)
}

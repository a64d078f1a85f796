use std::path::Path;

use ndarray::Array2;

use super::config::ExperimentConfig;
use super::record::{EventDetail, EventRow, MetricRow, RunRecord, RunSummary, FORMAT_VERSION};
use crate::cost::{self, NetworkProfile};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::failure::FailureTrace;
use crate::model::Model;
use crate::pipeline::{self, MicrobatchSchedule, ScheduleMode};
use crate::recovery::{ActionKind, Recoverer, TrainingState};

/// Probe rows used for the function-space error of each recovery.
const PROBE_ROWS: usize = 256;

/// A finished (or aborted) run together with the final training state.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub state: TrainingState,
}

/// Runs `config` for one seed, facing the trace the config describes.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let trace = config.failure_trace(seed)?;
    Ok(run_with_trace(config, seed, &trace)?.record)
}

/// Runs every seed of `config` and writes each record under `output_dir/seed-<n>`.
pub fn run_all_seeds(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let mut out = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let record = run_experiment(config, seed)?;
        if let Some(dir) = &config.output_dir {
            write_run(config, &record, &dir.join(format!("seed-{seed}")))?;
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes the record files and the resolved configuration next to them.
pub fn write_run(config: &ExperimentConfig, record: &RunRecord, dir: &Path) -> Result<()> {
    record.write(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

pub(crate) struct Context {
    pub dataset: Dataset,
    pub profile: NetworkProfile,
    pub iteration_seconds: f64,
}

impl Context {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let dataset = Dataset::new(&spec, config.task.clone(), config.training.batch_size)?;
        let profile = config.network_profile()?;
        let iteration_seconds = cost::iteration_time(config.strategy.kind, &profile, &config.cost);
        Ok(Self {
            dataset,
            profile,
            iteration_seconds,
        })
    }
}

pub(crate) fn validation_loss(model: &Model, batch: &Batch) -> Result<f64> {
    model.loss(batch.inputs.view(), &batch.targets)
}

/// Runs against an explicit trace (which must not depend on the strategy).
pub fn run_with_trace(config: &ExperimentConfig, seed: u64, trace: &FailureTrace) -> Result<RunOutcome> {
    let ctx = Context::new(config)?;
    run_in_context(config, seed, trace, &ctx)
}

pub(crate) fn run_in_context(
    config: &ExperimentConfig,
    seed: u64,
    trace: &FailureTrace,
    ctx: &Context,
) -> Result<RunOutcome> {
    let spec = config.spec()?;
    trace.validate(Some(spec.num_stages))?;
    let kind = config.strategy.kind;
    let t = &config.training;
    let standard = pipeline::build_schedule(t.num_microbatches, ScheduleMode::Standard, spec.num_stages)?;
    let swapped = match config.schedule_mode() {
        ScheduleMode::SwappedHalf => Some(pipeline::build_schedule(
            t.num_microbatches,
            ScheduleMode::SwappedHalf,
            spec.num_stages,
        )?),
        ScheduleMode::Standard => None,
    };
    let schedule_at = |tick: u64| -> &MicrobatchSchedule {
        match &swapped {
            Some(s) if tick >= t.swap_from => s,
            _ => &standard,
        }
    };

    let model = Model::init_with(&spec, seed, t.block_init()?, t.lr)?;
    let mut state = TrainingState::new(model);
    let mut recoverer = Recoverer::new(config.strategy, &state, seed)?;
    let validation = ctx.dataset.validation();
    let probe = ctx.dataset.probe(PROBE_ROWS);

    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut details = Vec::new();
    let mut wall_seconds = 0.0;
    let mut lost = 0u64;
    let mut unrecoverable: Option<String> = None;
    let mut reached: Option<(u64, u64)> = None;

    let first = ctx.dataset.train_batch(0)?;
    let mut train_loss = state.model.loss(first.inputs.view(), &first.targets)?;
    let mut val_loss = validation_loss(&state.model, validation)?;
    metrics.push(MetricRow {
        iter: 0,
        train_loss,
        val_loss,
        wall_hours: 0.0,
    });

    let mut tick = 0u64;
    while tick < t.total_iterations {
        let failed: Vec<usize> = trace.events_at(tick).iter().map(|e| e.stage).collect();
        if !failed.is_empty() {
            let before_val = validation_loss(&state.model, validation)?;
            let before_probe = state.model.predict(probe.inputs.view())?;
            let progress_before = state.progress;
            match recoverer.handle_failures(&mut state, &failed, tick) {
                Ok(actions) => {
                    let mut slowest: f64 = 0.0;
                    for a in &actions {
                        let secs = if a.action == ActionKind::Ignored {
                            0.0
                        } else {
                            cost::recovery_time(kind, &ctx.profile, &config.cost, a.stage)?
                        };
                        slowest = slowest.max(secs);
                        events.push(EventRow {
                            iter: tick,
                            stage: a.stage,
                            action: a.action.as_str().to_string(),
                            reduction_error: a.reduction_error,
                            recovery_s: secs,
                        });
                    }
                    wall_seconds += slowest;
                    lost += progress_before - state.progress;
                    let after_probe = state.model.predict(probe.inputs.view())?;
                    details.push(EventDetail {
                        iter: tick,
                        stages: failed.clone(),
                        val_loss_before: before_val,
                        val_loss_after: validation_loss(&state.model, validation)?,
                        function_error: mean_sq_diff(&before_probe, &after_probe),
                    });
                }
                Err(e) if e.is_unrecoverable() || matches!(e, Error::UnsupportedRecovery { .. }) => {
                    log::error!("run aborted at iteration {tick}: {e}");
                    unrecoverable = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let batch = ctx.dataset.train_batch(state.data_cursor)?;
        let result = pipeline::run_iteration(&mut state.model, schedule_at(tick), &batch, tick)?;
        train_loss = result.train_loss;
        state.progress += 1;
        state.data_cursor += 1;
        recoverer.after_step(&state);
        wall_seconds += ctx.iteration_seconds;
        tick += 1;

        if tick % t.eval_interval == 0 || tick == t.total_iterations {
            val_loss = validation_loss(&state.model, validation)?;
            metrics.push(MetricRow {
                iter: tick,
                train_loss,
                val_loss,
                wall_hours: wall_seconds / 3600.0,
            });
            if let Some(target) = t.target_loss {
                if reached.is_none() && val_loss <= target {
                    reached = Some((tick, state.progress));
                    if t.stop_at_target {
                        break;
                    }
                }
            }
        }
    }

    let summary = RunSummary {
        format_version: FORMAT_VERSION,
        strategy: kind.name().to_string(),
        seed,
        iterations_run: tick,
        progress: state.progress,
        final_train_loss: train_loss,
        final_val_loss: val_loss,
        target_loss: t.target_loss,
        iterations_to_target: reached.map(|r| r.0),
        progress_to_target: reached.map(|r| r.1),
        iteration_seconds: ctx.iteration_seconds,
        total_hours: wall_seconds / 3600.0,
        failures: events.len(),
        lost_iterations: lost,
        unrecoverable: unrecoverable.is_some(),
        unrecoverable_reason: unrecoverable,
        event_details: details,
    };
    Ok(RunOutcome {
        record: RunRecord {
            metrics,
            events,
            summary,
        },
        state,
    })
}

pub(crate) fn mean_sq_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}


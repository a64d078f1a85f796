//! Experiment configuration, training runs under failure traces, strategy
//! comparisons and ablations.

mod compare;
mod config;
mod measure;
mod record;
mod run;

pub use compare::{
    compare_on_trace, compare_strategies, desk_target, ComparisonRow, ComparisonTable,
    TARGET_RUN_FRACTION,
};
pub use config::{
    ExperimentConfig, FailureConfig, ModelConfig, TrainingConfig, REFERENCE_ITERATION_SECONDS,
    REFERENCE_ITERATION_SECONDS_16,
};
pub use measure::{
    ablation_checkpoint_frequency, ablation_swap, delta_after_training, estimate_delta,
    reinit_spikes, single_layer_masks, stage_distance, CheckpointFrequencyAblation, DeltaEstimate,
    DeltaReport, IntervalRow, Milestone, SpikeEntry, SpikeEvent, SwapAblation,
    MILESTONE_FRACTIONS, REINIT_STRATEGIES,
};
pub use record::{EventDetail, EventRow, MetricRow, RunRecord, RunSummary, FORMAT_VERSION};
pub use run::{run_all_seeds, run_experiment, run_with_trace, write_run, RunOutcome};

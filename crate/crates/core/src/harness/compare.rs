use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::record::{csv_or_header, RunRecord};
use super::run::{run_in_context, Context};
use crate::cost;
use crate::error::{Error, Result};
use crate::failure::FailureTrace;
use crate::recovery::StrategyKind;

/// Share of the failure-free baseline run over which the desk-scale target is taken.
pub const TARGET_RUN_FRACTION: f64 = 0.8;

/// Best validation loss the failure-free `baseline` reached within the first
/// `TARGET_RUN_FRACTION` of its iterations.
///
/// The loss falls steeply early on and then saturates, so a target taken from the
/// tail of the run is what separates strategies that lose progress to failures.
pub fn desk_target(baseline: &RunRecord) -> Result<f64> {
    let first = baseline
        .metrics
        .first()
        .ok_or_else(|| Error::Validation("baseline run has no evaluations".into()))?;
    let last_iter = baseline.metrics.last().map_or(0, |m| m.iter);
    let cutoff = (last_iter as f64 * TARGET_RUN_FRACTION).floor() as u64;
    let best = baseline
        .metrics
        .iter()
        .filter(|m| m.iter <= cutoff)
        .map(|m| m.val_loss)
        .fold(f64::INFINITY, f64::min);
    if !(best < first.val_loss) {
        return Err(Error::Validation(
            "baseline validation loss never decreased; cannot derive a target".into(),
        ));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub iteration_seconds: f64,
    pub iterations_to_target: Option<u64>,
    pub progress_to_target: Option<u64>,
    pub train_hours: Option<f64>,
    pub final_val_loss: f64,
    pub failures: usize,
    pub unrecoverable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub target_loss: f64,
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

impl ComparisonTable {
    pub fn row(&self, strategy: StrategyKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy.name())
    }

    pub fn render(&self) -> String {
        let mut out = format!("target validation loss {:.6}\n", self.target_loss);
        let _ = writeln!(
            out,
            "{:<24} {:>12} {:>12} {:>12} {:>12} {:>9}",
            "strategy", "iter time s", "iters", "progress", "train h", "failures"
        );
        let opt = |v: Option<u64>| v.map_or("n/a".to_string(), |v| v.to_string());
        for r in &self.rows {
            let hours = match (r.unrecoverable, r.train_hours) {
                (true, _) => "aborted".to_string(),
                (false, Some(h)) => format!("{h:.2}"),
                (false, None) => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<24} {:>12.2} {:>12} {:>12} {:>12} {:>9}",
                r.strategy,
                r.iteration_seconds,
                opt(r.iterations_to_target),
                opt(r.progress_to_target),
                hours,
                r.failures
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_or_header(
            &self.rows,
            "strategy,iteration_seconds,iterations_to_target,progress_to_target,train_hours,final_val_loss,failures,unrecoverable",
        )
    }
}

/// Everything but the strategy must agree for a comparison to be fair.
fn same_setup(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut b = b.clone();
    b.strategy = a.strategy;
    b.training.swap = a.training.swap;
    b.output_dir.clone_from(&a.output_dir);
    b == *a
}

/// Runs each `(config, trace)` pair to the shared target and prices it with the cost model.
///
/// The target comes from the configs when set, otherwise from a failure-free
/// baseline run via [`desk_target`].
pub fn compare_strategies(runs: &[(ExperimentConfig, &FailureTrace)], seed: u64) -> Result<ComparisonTable> {
    let (first_cfg, first_trace) = runs
        .first()
        .ok_or_else(|| Error::config("nothing to compare"))?;
    for (cfg, trace) in &runs[1..] {
        if *trace != *first_trace {
            return Err(Error::config(
                "strategies must be compared against the same failure trace",
            ));
        }
        if !same_setup(first_cfg, cfg) {
            return Err(Error::config(
                "compared configurations differ in more than the strategy",
            ));
        }
    }

    let target = match first_cfg.training.target_loss {
        Some(t) => t,
        None => {
            let mut base = first_cfg.with_strategy(StrategyKind::NoFailures);
            base.training.swap = None;
            let ctx = Context::new(&base)?;
            let empty = FailureTrace::empty(base.model.num_stages);
            desk_target(&run_in_context(&base, seed, &empty, &ctx)?.record)?
        }
    };

    let mut rows = Vec::with_capacity(runs.len());
    let mut records = Vec::with_capacity(runs.len());
    for (cfg, trace) in runs {
        let mut cfg = cfg.clone();
        cfg.training.target_loss = Some(target);
        cfg.training.stop_at_target = true;
        let ctx = Context::new(&cfg)?;
        let record = run_in_context(&cfg, seed, trace, &ctx)?.record;
        let kind = cfg.strategy.kind;
        let s = &record.summary;
        let train_hours = match (s.unrecoverable, s.progress_to_target) {
            (false, Some(progress)) => {
                let per = cost::iteration_breakdown(kind, &ctx.profile, &cfg.cost);
                Some(cost::train_time(progress, &per, trace, kind, &ctx.profile, &cfg.cost)?.hours)
            }
            _ => None,
        };
        rows.push(ComparisonRow {
            strategy: kind.name().to_string(),
            iteration_seconds: ctx.iteration_seconds,
            iterations_to_target: s.iterations_to_target,
            progress_to_target: s.progress_to_target,
            train_hours,
            final_val_loss: s.final_val_loss,
            failures: s.failures,
            unrecoverable: s.unrecoverable,
        });
        records.push(record);
    }
    Ok(ComparisonTable {
        target_loss: target,
        rows,
        records,
    })
}

/// Compares `kinds` on `base` against one shared trace.
pub fn compare_on_trace(
    base: &ExperimentConfig,
    kinds: &[StrategyKind],
    trace: &FailureTrace,
    seed: u64,
) -> Result<ComparisonTable> {
    let runs: Vec<_> = kinds.iter().map(|&k| (base.with_strategy(k), trace)).collect();
    compare_strategies(&runs, seed)
}

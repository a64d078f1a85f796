mod common;

use checkfree::failure::FailureTrace;
use checkfree::harness::{
    compare_on_trace, compare_strategies, estimate_delta, run_experiment, run_with_trace, single_layer_masks,
};
use checkfree::model::Model;
use checkfree::recovery::StrategyKind;
use common::tiny_config;

#[test]
fn identical_config_and_seed_give_byte_identical_outputs() {
    let mut cfg = tiny_config().with_strategy(StrategyKind::CheckFree);
    cfg.failures.p_iter = Some(0.03);
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        run_experiment(&cfg, 4).unwrap().write(&dir.path().join(name)).unwrap();
    }
    for file in ["metrics.csv", "events.csv", "summary.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let record = run_experiment(&cfg, 4).unwrap();
    assert!(!record.events.is_empty());
}

#[test]
fn records_are_ordered_and_wall_clock_never_decreases() {
    let mut cfg = tiny_config().with_strategy(StrategyKind::Checkpointing { interval_iters: 10 });
    cfg.failures.p_iter = Some(0.02);
    let r = run_experiment(&cfg, 1).unwrap();
    assert!(r.metrics.windows(2).all(|w| w[0].iter < w[1].iter));
    assert!(r.metrics.windows(2).all(|w| w[0].wall_hours <= w[1].wall_hours));
    let csv = r.metrics_csv().unwrap();
    assert!(csv.starts_with("iter,train_loss,val_loss,wall_hours\n"));
}

#[test]
fn iterations_to_target_is_the_first_eval_at_or_below_it() {
    let cfg = tiny_config().with_strategy(StrategyKind::NoFailures);
    let full = run_experiment(&cfg, 0).unwrap();
    let target = full.metrics[full.metrics.len() / 2].val_loss;
    let expected = full.metrics.iter().find(|m| m.val_loss <= target).unwrap().iter;

    let mut stopping = cfg.clone();
    stopping.training.target_loss = Some(target);
    let r = run_experiment(&stopping, 0).unwrap();
    assert_eq!(r.summary.iterations_to_target, Some(expected));
    assert_eq!(r.iterations_to(target), Some(expected));
    assert_eq!(r.summary.iterations_run, expected);
}

#[test]
fn without_failures_every_standard_strategy_matches_the_baseline() {
    let cfg = tiny_config();
    let empty = FailureTrace::empty(4);
    let base = run_with_trace(&cfg.with_strategy(StrategyKind::NoFailures), 3, &empty).unwrap().record;
    for kind in [
        StrategyKind::CheckFree,
        StrategyKind::RedundantComputation,
        StrategyKind::Checkpointing { interval_iters: 7 },
        StrategyKind::ReinitRandom,
        StrategyKind::ReinitCopy,
        StrategyKind::ReinitUniformAvg,
    ] {
        let r = run_with_trace(&cfg.with_strategy(kind), 3, &empty).unwrap().record;
        assert_eq!(r.val_losses(), base.val_losses(), "{}", kind.name());
    }
    let mut plus = cfg.with_strategy(StrategyKind::CheckFreePlus);
    plus.training.swap = Some(false);
    let r = run_with_trace(&plus, 3, &empty).unwrap().record;
    assert_eq!(r.val_losses(), base.val_losses());
}

#[test]
fn comparisons_refuse_different_traces() {
    let mut cfg = tiny_config();
    cfg.training.target_loss = Some(0.5);
    let a = FailureTrace::from_per_iteration(0.02, 2..=3, 1, 60).unwrap();
    let b = FailureTrace::from_per_iteration(0.02, 2..=3, 2, 60).unwrap();
    let runs = [
        (cfg.with_strategy(StrategyKind::CheckFree), &a),
        (cfg.with_strategy(StrategyKind::ReinitCopy), &b),
    ];
    assert!(matches!(compare_strategies(&runs, 0), Err(checkfree::Error::Config(_))));

    let mut other = cfg.with_strategy(StrategyKind::ReinitCopy);
    other.training.lr *= 2.0;
    let runs = [(cfg.with_strategy(StrategyKind::CheckFree), &a), (other, &a)];
    assert!(matches!(compare_strategies(&runs, 0), Err(checkfree::Error::Config(_))));
}

#[test]
fn comparison_table_has_one_row_per_strategy() {
    let mut cfg = tiny_config();
    cfg.training.target_loss = Some(0.9);
    let trace = FailureTrace::from_per_iteration(0.02, 1..=4, 3, 60).unwrap();
    let one = compare_on_trace(&cfg, &[StrategyKind::CheckFreePlus], &trace, 0).unwrap();
    assert_eq!(one.rows.len(), 1);

    let kinds = [
        StrategyKind::Checkpointing { interval_iters: 10 },
        StrategyKind::RedundantComputation,
        StrategyKind::CheckFree,
        StrategyKind::CheckFreePlus,
    ];
    let table = compare_on_trace(&cfg, &kinds, &trace, 0).unwrap();
    assert_eq!(table.rows.len(), 4);
    let csv = table.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(table.render().contains("redundant-computation"));
    if trace.events().iter().any(|e| e.stage == 1 || e.stage == 4) {
        assert!(table.row(StrategyKind::CheckFree).unwrap().unrecoverable);
    }
}

#[test]
fn zero_blocks_have_zero_delta() {
    let cfg = tiny_config();
    let spec = cfg.spec().unwrap();
    let mut model = Model::init(&spec, 0, 1e-3).unwrap();
    for stage in &mut model.stages {
        for block in &mut stage.blocks {
            block.w1.values_mut().fill(0.0);
            block.w2.values_mut().fill(0.0);
        }
    }
    let probe = ndarray::Array2::from_shape_fn((8, spec.input_dim), |(i, j)| (i + j) as f64 * 0.1);
    let report = estimate_delta(&model, probe.view(), &single_layer_masks(spec.num_layers)).unwrap();
    assert_eq!(report.delta_function, 0.0);
    assert_eq!(report.delta_param, 0.0);

    let keep_all = vec![vec![true; spec.num_layers]];
    let trained = Model::init(&spec, 0, 1e-3).unwrap();
    let report = estimate_delta(&trained, probe.view(), &keep_all).unwrap();
    assert_eq!(report.delta_function, 0.0);
}

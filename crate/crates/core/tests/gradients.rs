mod common;

use checkfree::model::{self, Model, ModelSpec, StageState};
use checkfree::pipeline::{self, build_schedule, effective_function, ExecutionOrder, ScheduleMode};
use common::{finite_difference_error, small_case};

#[test]
fn analytic_gradients_match_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..12 {
        let case = small_case(seed, 2);
        let schedule = build_schedule(2, ScheduleMode::Standard, case.model.spec.num_stages).unwrap();
        worst = worst.max(finite_difference_error(&case.model, &schedule, &case.batch));
    }
    for seed in 100..112 {
        let case = small_case(seed, 4);
        let schedule = build_schedule(2, ScheduleMode::SwappedHalf, case.model.spec.num_stages).unwrap();
        worst = worst.max(finite_difference_error(&case.model, &schedule, &case.batch));
    }
    assert!(worst <= 1e-4, "worst relative gradient error {worst:e}");
}

#[test]
fn pipeline_matches_a_single_stage_model() {
    for seed in 0..8 {
        let case = small_case(seed, 2);
        let m = &case.model;
        let mono_spec = ModelSpec {
            num_stages: 1,
            partition: vec![0..m.spec.num_layers],
            ..m.spec.clone()
        };
        let blocks = m.stages.iter().flat_map(|s| s.blocks.clone()).collect();
        let mono = Model::assemble(mono_spec, m.edges.clone(), vec![StageState::new(1, blocks, m.base_lr)], m.base_lr)
            .unwrap();

        let x = case.batch.inputs.view();
        assert_eq!(m.predict(x).unwrap(), mono.predict(x).unwrap());

        let staged = model::forward(&m.spec, &m.edges, &m.stages, &(1..=m.spec.num_stages).collect::<Vec<_>>(), x)
            .unwrap();
        let (g_staged, l_staged) = model::backward(&m.spec, &m.edges, &m.stages, &staged, &case.batch.targets).unwrap();
        let whole = model::forward(&mono.spec, &mono.edges, &mono.stages, &[1], x).unwrap();
        let (g_whole, l_whole) =
            model::backward(&mono.spec, &mono.edges, &mono.stages, &whole, &case.batch.targets).unwrap();
        assert_eq!(l_staged, l_whole);
        assert_eq!(g_staged.flatten(), g_whole.flatten());
    }
}

#[test]
fn microbatch_accumulation_equals_full_batch() {
    for seed in 0..8 {
        let case = small_case(seed, 2);
        let s = case.model.spec.num_stages;
        let rows = case.batch.rows();
        let whole = build_schedule(1, ScheduleMode::Standard, s).unwrap();
        let (g1, l1) = pipeline::accumulate_gradients(&case.model, &whole, &case.batch).unwrap();
        for k in [2, rows / 2, rows] {
            let split = build_schedule(k, ScheduleMode::Standard, s).unwrap();
            let (gk, lk) = pipeline::accumulate_gradients(&case.model, &split, &case.batch).unwrap();
            assert!((l1 - lk).abs() <= 1e-10 * l1.abs().max(1.0));
            let (a, b) = (g1.flatten(), gk.flatten());
            let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-10 * scale, "seed {seed}, k {k}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn every_order_applies_each_layer_once() {
    for (layers, stages) in [(4, 4), (8, 4), (9, 5), (12, 6), (7, 7)] {
        let spec = ModelSpec::new(2, 2, 2, 2, layers, stages).unwrap();
        let standard = effective_function(&ExecutionOrder::standard(stages), &spec).layers;
        assert_eq!(standard, (0..layers).collect::<Vec<_>>());

        let swapped = effective_function(&ExecutionOrder::swapped(stages).unwrap(), &spec).layers;
        let mut sorted = swapped.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..layers).collect::<Vec<_>>());
        let p = &spec.partition;
        let expected: Vec<usize> = p[1]
            .clone()
            .chain(p[0].clone())
            .chain(p[2..stages - 2].iter().flat_map(|r| r.clone()))
            .chain(p[stages - 1].clone())
            .chain(p[stages - 2].clone())
            .collect();
        assert_eq!(swapped, expected);
    }
}

#[test]
fn swapped_half_runs_each_order_equally_often() {
    for s in 4..9 {
        for k in (2..=16).step_by(2) {
            let schedule = build_schedule(k, ScheduleMode::SwappedHalf, s).unwrap();
            assert_eq!(schedule.swapped_count() * 2, k);
            assert!(schedule.orders().iter().all(ExecutionOrder::is_legal));
        }
    }
}


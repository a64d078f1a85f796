#![allow(dead_code)]

use std::path::PathBuf;

use checkfree::data::Batch;
use checkfree::harness::ExperimentConfig;
use checkfree::model::{Activation, BlockInit, Model, ModelSpec, Targets, Task};
use checkfree::pipeline::{self, MicrobatchSchedule};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn desk_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("desk config parses")
}

/// A small config that trains in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.input_dim = 6;
    c.model.model_dim = 6;
    c.model.output_dim = 6;
    c.model.hidden_dim = 8;
    c.model.num_layers = 4;
    c.model.num_stages = 4;
    c.training.batch_size = 16;
    c.training.num_microbatches = 2;
    c.training.total_iterations = 60;
    c.training.eval_interval = 10;
    c.training.init_correlation = 0.5;
    c.task.validation_size = 64;
    c
}

pub struct SmallCase {
    pub model: Model,
    pub batch: Batch,
}

/// Random model and batch; `min_stages` bounds the stage count from below.
pub fn small_case(seed: u64, min_stages: usize) -> SmallCase {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dim = r.random_range(2..=5);
    let input_dim = r.random_range(2..=5);
    let hidden = r.random_range(2..=6);
    let layers = r.random_range(min_stages.max(2)..=8);
    let stages = r.random_range(min_stages.max(2)..=layers);
    let task = if r.random_bool(0.3) { Task::Classification } else { Task::Regression };
    let activation = if r.random_bool(0.8) { Activation::Tanh } else { Activation::Identity };
    let output_dim = match task {
        Task::Classification => r.random_range(2..=4),
        Task::Regression => r.random_range(1..=4),
    };
    let spec = ModelSpec::new(input_dim, hidden, dim, output_dim, layers, stages)
        .unwrap()
        .with_activation(activation)
        .with_task(task);
    let block_init = BlockInit::new(r.random_range(0.5..1.5), r.random_range(0.0..0.9)).unwrap();
    let model = Model::init_with(&spec, seed, block_init, 1e-3).unwrap();
    let rows = 2 * r.random_range(2..=4);
    let inputs = Array2::from_shape_fn((rows, input_dim), |_| r.random_range(-1.0..1.0));
    let targets = match task {
        Task::Regression => {
            Targets::Values(Array2::from_shape_fn((rows, output_dim), |_| r.random_range(-1.0..1.0)))
        }
        Task::Classification => Targets::Classes((0..rows).map(|_| r.random_range(0..output_dim)).collect()),
    };
    SmallCase {
        model,
        batch: Batch { inputs, targets },
    }
}

/// Visits every trainable scalar in the layout of `Gradients::flatten`.
pub fn param_mut(model: &mut Model, mut index: usize) -> &mut f64 {
    let e = model.edges.embedding.len();
    if index < e {
        return &mut model.edges.embedding.values_mut()[index];
    }
    index -= e;
    for stage in &mut model.stages {
        for block in &mut stage.blocks {
            for w in [&mut block.w1, &mut block.w2] {
                if index < w.len() {
                    return &mut w.values_mut()[index];
                }
                index -= w.len();
            }
        }
    }
    &mut model.edges.deembedding.values_mut()[index]
}

/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` with central differences
/// of the mean microbatch loss under `schedule`.
pub fn finite_difference_error(model: &Model, schedule: &MicrobatchSchedule, batch: &Batch) -> f64 {
    let (grads, _) = pipeline::accumulate_gradients(model, schedule, batch).unwrap();
    let analytic = grads.flatten();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let orig = *param_mut(&mut probe, i);
        *param_mut(&mut probe, i) = orig + h;
        let up = pipeline::accumulate_gradients(&probe, schedule, batch).unwrap().1;
        *param_mut(&mut probe, i) = orig - h;
        let down = pipeline::accumulate_gradients(&probe, schedule, batch).unwrap().1;
        *param_mut(&mut probe, i) = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// The gradient-weighted average written out entry by entry.
pub fn checkfree_oracle(prev: &[f64], next: &[f64], omega_prev: f64, omega_next: f64) -> Vec<f64> {
    let mut out = vec![0.0; prev.len()];
    for j in 0..prev.len() {
        let (a, b) = (prev[j], next[j]);
        out[j] = if omega_prev == omega_next {
            (a + b) / 2.0
        } else {
            let v = (omega_prev * a + omega_next * b) / (omega_prev + omega_next);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        };
    }
    out
}

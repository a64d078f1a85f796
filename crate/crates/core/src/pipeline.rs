//! Stage ordering per microbatch and the accumulate-then-step training iteration.
//!
//! Out-of-order pipelining runs half of the microbatches with the first two
//! and the last two stages transposed, `(2, 1, 3, …, s−2, s, s−1)`, so that
//! `S2` learns to stand in for `S1` and `S(s−1)` for `Ss`. Both orders feed
//! the same per-stage gradient buffers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{self, Gradients, Model, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    #[default]
    Standard,
    SwappedHalf,
}

/// Stage ids (one-based) in execution order. `E` always runs first and `E⁻¹` last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionOrder(Vec<usize>);

impl ExecutionOrder {
    pub fn standard(num_stages: usize) -> Self {
        Self((1..=num_stages).collect())
    }

    /// `(2, 1, 3, …, s−2, s, s−1)`. Needs four stages so the two transpositions are disjoint.
    pub fn swapped(num_stages: usize) -> Result<Self> {
        if num_stages < 4 {
            return Err(Error::config(format!(
                "swapped execution needs at least 4 stages, got {num_stages}"
            )));
        }
        let mut seq: Vec<usize> = (1..=num_stages).collect();
        seq.swap(0, 1);
        seq.swap(num_stages - 2, num_stages - 1);
        Ok(Self(seq))
    }

    pub fn stages(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_standard(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &s)| s == i + 1)
    }

    /// True for the standard order and the swapped order only.
    pub fn is_legal(&self) -> bool {
        let s = self.0.len();
        self.is_standard() || ExecutionOrder::swapped(s).is_ok_and(|w| w == *self)
    }
}

impl fmt::Display for ExecutionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicrobatchSchedule {
    orders: Vec<ExecutionOrder>,
}

impl MicrobatchSchedule {
    pub fn num_microbatches(&self) -> usize {
        self.orders.len()
    }

    pub fn orders(&self) -> &[ExecutionOrder] {
        &self.orders
    }

    pub fn swapped_count(&self) -> usize {
        self.orders.iter().filter(|o| !o.is_standard()).count()
    }
}

/// Swapped microbatches sit at even positions `0, 2, 4, …`.
pub fn build_schedule(
    num_microbatches: usize,
    mode: ScheduleMode,
    num_stages: usize,
) -> Result<MicrobatchSchedule> {
    if num_microbatches == 0 {
        return Err(Error::config("need at least one microbatch"));
    }
    let standard = ExecutionOrder::standard(num_stages);
    let orders = match mode {
        ScheduleMode::Standard => vec![standard; num_microbatches],
        ScheduleMode::SwappedHalf => {
            if num_microbatches % 2 != 0 {
                return Err(Error::config(format!(
                    "swapped schedule needs an even microbatch count, got {num_microbatches}"
                )));
            }
            let swapped = ExecutionOrder::swapped(num_stages)?;
            (0..num_microbatches)
                .map(|i| {
                    if i % 2 == 0 {
                        swapped.clone()
                    } else {
                        standard.clone()
                    }
                })
                .collect()
        }
    };
    Ok(MicrobatchSchedule { orders })
}

/// Layer application sequence of the network run in a given order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeFunction {
    /// Zero-based layer indices, in application order (after `E`, before `E⁻¹`).
    pub layers: Vec<usize>,
}

pub fn effective_function(order: &ExecutionOrder, spec: &ModelSpec) -> CompositeFunction {
    CompositeFunction {
        layers: order
            .stages()
            .iter()
            .flat_map(|&s| spec.partition[s - 1].clone())
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: u64,
    pub train_loss: f64,
    pub omegas: Vec<f64>,
}

/// Gradients averaged over microbatches, and the mean microbatch loss.
pub fn accumulate_gradients(
    model: &Model,
    schedule: &MicrobatchSchedule,
    batch: &Batch,
) -> Result<(Gradients, f64)> {
    let k = schedule.num_microbatches();
    let rows = batch.rows();
    if rows % k != 0 {
        return Err(Error::config(format!(
            "batch of {rows} rows is not divisible into {k} microbatches"
        )));
    }
    let size = rows / k;
    let mut total = Gradients::zeros(&model.spec);
    let mut loss_sum = 0.0;
    for (i, order) in schedule.orders().iter().enumerate() {
        let mb = batch.slice(i * size..(i + 1) * size);
        let cache = model::forward(
            &model.spec,
            &model.edges,
            &model.stages,
            order.stages(),
            mb.inputs.view(),
        )?;
        let (g, loss) =
            model::backward(&model.spec, &model.edges, &model.stages, &cache, &mb.targets)?;
        total.add_assign(&g);
        loss_sum += loss;
    }
    total.scale(1.0 / k as f64);
    Ok((total, loss_sum / k as f64))
}

/// One Adam step per stage (at the stage's own learning rate) and per edge layer.
pub fn apply_gradients(model: &mut Model, grads: &Gradients) -> Result<()> {
    let lr = model.base_lr;
    model
        .embedding_opt
        .update([model.edges.embedding.values_mut()], &grads.embedding, lr)?;
    model
        .deembedding_opt
        .update([model.edges.deembedding.values_mut()], &grads.deembedding, lr)?;
    for (stage, g) in model.stages.iter_mut().zip(&grads.stages) {
        let lr = stage.lr;
        stage.adam_step(g, lr)?;
    }
    Ok(())
}

/// Forward/backward over every microbatch, then a single optimizer step.
pub fn run_iteration(
    model: &mut Model,
    schedule: &MicrobatchSchedule,
    batch: &Batch,
    iteration: u64,
) -> Result<IterationResult> {
    let (grads, loss) =
        accumulate_gradients(model, schedule, batch).map_err(|e| e.at_iteration(iteration))?;
    apply_gradients(model, &grads).map_err(|e| e.at_iteration(iteration))?;
    Ok(IterationResult {
        iteration,
        train_loss: loss,
        omegas: model.stages.iter().map(|s| s.omega).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_schedule() {
        let s = build_schedule(4, ScheduleMode::Standard, 6).unwrap();
        assert_eq!(s.num_microbatches(), 4);
        assert!(s.orders().iter().all(ExecutionOrder::is_standard));
    }

    #[test]
    fn swapped_schedule_six_stages() {
        let s = build_schedule(4, ScheduleMode::SwappedHalf, 6).unwrap();
        assert_eq!(s.orders()[0].stages(), &[2, 1, 3, 4, 6, 5]);
        assert_eq!(s.orders()[2].stages(), &[2, 1, 3, 4, 6, 5]);
        assert_eq!(s.orders()[1].stages(), &[1, 2, 3, 4, 5, 6]);
        assert_eq!(s.orders()[3].stages(), &[1, 2, 3, 4, 5, 6]);
        assert_eq!(s.swapped_count(), 2);
    }

    #[test]
    fn swapped_schedule_four_stages() {
        let s = build_schedule(2, ScheduleMode::SwappedHalf, 4).unwrap();
        assert_eq!(s.orders()[0].stages(), &[2, 1, 4, 3]);
        assert!(s.orders()[1].is_standard());
    }

    #[test]
    fn odd_count_and_short_pipelines_are_rejected() {
        assert!(matches!(
            build_schedule(3, ScheduleMode::SwappedHalf, 6),
            Err(Error::Config(_))
        ));
        assert!(build_schedule(2, ScheduleMode::SwappedHalf, 3).is_err());
        assert!(build_schedule(3, ScheduleMode::Standard, 3).is_ok());
    }

    #[test]
    fn effective_function_unfolds_partition() {
        let spec = ModelSpec::new(2, 2, 2, 2, 4, 2).unwrap();
        let f = effective_function(&ExecutionOrder::standard(2), &spec);
        assert_eq!(f.layers, vec![0, 1, 2, 3]);

        let spec = ModelSpec::new(2, 2, 2, 2, 8, 4).unwrap();
        let f = effective_function(&ExecutionOrder::swapped(4).unwrap(), &spec);
        assert_eq!(f.layers, vec![2, 3, 0, 1, 6, 7, 4, 5]);

        let spec = ModelSpec::new(2, 2, 2, 2, 6, 6).unwrap();
        let f = effective_function(&ExecutionOrder::swapped(6).unwrap(), &spec);
        assert_eq!(f.layers, vec![1, 0, 2, 3, 5, 4]);
    }

    #[test]
    fn legality() {
        assert!(ExecutionOrder::standard(5).is_legal());
        assert!(ExecutionOrder::swapped(5).unwrap().is_legal());
        assert!(!ExecutionOrder(vec![1, 3, 2, 4, 5]).is_legal());
        assert_eq!(ExecutionOrder::swapped(4).unwrap().to_string(), "(2,1,4,3)");
    }
}

//! Stage-failure recovery strategies.
//!
//! The neighbor-based strategies rebuild a lost stage `i` from the surviving
//! stages `i−1` and `i+1`:
//!
//! - gradient-weighted average (CheckFree): `(ω₋·W₋ + ω₊·W₊) / (ω₋ + ω₊)` where
//!   `ω` is the squared norm of the neighbor's latest gradient, followed by a
//!   learning-rate bump on the recovered stage;
//! - the baselines: uniform average, copy of the previous stage, fresh random init.
//!
//! CheckFree+ additionally recovers the first (last) stage by copying the second
//! (second-to-last) one, which swapped microbatches train to play both roles, and
//! restores `E` / `E⁻¹` from replicas held by those neighbors.
//!
//! The exact baselines are checkpoint rollback and redundant computation, where
//! every node keeps an always-current copy of the following stage.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Model, ModelSpec, StageState};
use crate::optim::AdamState;
use crate::param::ParameterVector;
use crate::pipeline::ScheduleMode;
use crate::rng::{self, Domain};

pub const DEFAULT_LR_BUMP: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategyKind {
    Checkpointing { interval_iters: u64 },
    RedundantComputation,
    #[serde(rename = "checkfree")]
    CheckFree,
    #[serde(rename = "checkfree-plus")]
    CheckFreePlus,
    ReinitRandom,
    ReinitCopy,
    ReinitUniformAvg,
    NoFailures,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Checkpointing { .. } => "checkpointing",
            StrategyKind::RedundantComputation => "redundant-computation",
            StrategyKind::CheckFree => "checkfree",
            StrategyKind::CheckFreePlus => "checkfree-plus",
            StrategyKind::ReinitRandom => "reinit-random",
            StrategyKind::ReinitCopy => "reinit-copy",
            StrategyKind::ReinitUniformAvg => "reinit-uniform-avg",
            StrategyKind::NoFailures => "no-failures",
        }
    }

    /// Parses the CLI spelling; checkpointing takes its interval from `checkpoint_interval`.
    pub fn parse(name: &str, checkpoint_interval: u64) -> Result<Self> {
        Ok(match name {
            "checkpointing" | "checkpoint" => StrategyKind::Checkpointing {
                interval_iters: checkpoint_interval,
            },
            "redundant-computation" | "rc" => StrategyKind::RedundantComputation,
            "checkfree" => StrategyKind::CheckFree,
            "checkfree-plus" | "checkfree+" => StrategyKind::CheckFreePlus,
            "reinit-random" | "random" => StrategyKind::ReinitRandom,
            "reinit-copy" | "copy" => StrategyKind::ReinitCopy,
            "reinit-uniform-avg" | "uniform-avg" => StrategyKind::ReinitUniformAvg,
            "no-failures" | "none" => StrategyKind::NoFailures,
            other => return Err(Error::config(format!("unknown strategy `{other}`"))),
        })
    }

    /// Whether first and last stages can be recovered.
    pub fn recovers_edges(&self) -> bool {
        matches!(
            self,
            StrategyKind::Checkpointing { .. }
                | StrategyKind::RedundantComputation
                | StrategyKind::CheckFreePlus
        )
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        match self {
            StrategyKind::CheckFreePlus => ScheduleMode::SwappedHalf,
            _ => ScheduleMode::Standard,
        }
    }

    pub fn eligible_stages(&self, num_stages: usize) -> BTreeSet<usize> {
        crate::failure::eligible_stages(num_stages, self.recovers_edges())
    }
}

/// What a recovered stage does with its optimizer moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerOnRecovery {
    /// Zeroed moments and step counter, as on a freshly started node.
    #[default]
    Fresh,
    /// Moments combined with the same weights as the parameters.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    #[serde(flatten)]
    pub kind: StrategyKind,
    #[serde(default = "default_lr_bump")]
    pub lr_bump: f64,
    #[serde(default)]
    pub optimizer_on_recovery: OptimizerOnRecovery,
}

fn default_lr_bump() -> f64 {
    DEFAULT_LR_BUMP
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::new(StrategyKind::CheckFree)
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            lr_bump: DEFAULT_LR_BUMP,
            optimizer_on_recovery: OptimizerOnRecovery::Fresh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategyKind::Checkpointing { interval_iters: 0 } = self.kind {
            return Err(Error::config("checkpoint interval must be positive"));
        }
        if !(self.lr_bump > 0.0 && self.lr_bump.is_finite()) {
            return Err(Error::config("lr_bump must be positive"));
        }
        Ok(())
    }
}

/// Gradient-norm-weighted average of the neighbor stages.
///
/// Equal weights give the uniform average exactly. When both weights are zero
/// (failure before any backward pass) this is the uniform average too.
pub fn recover_checkfree(
    w_prev: &ParameterVector,
    w_next: &ParameterVector,
    omega_prev: f64,
    omega_next: f64,
) -> Result<ParameterVector> {
    w_prev.check_same_len(w_next)?;
    if !(omega_prev >= 0.0 && omega_next >= 0.0) || !(omega_prev + omega_next).is_finite() {
        return Err(Error::config(format!(
            "gradient-norm weights must be finite and nonnegative, got {omega_prev}, {omega_next}"
        )));
    }
    if omega_prev == omega_next {
        if omega_prev == 0.0 {
            log::warn!("both neighbor gradient norms are zero; falling back to the uniform average");
        }
        return reinit_uniform_avg(w_prev, w_next);
    }
    let total = omega_prev + omega_next;
    // Rounding can land one ulp outside the segment; clamp so the result is a
    // convex combination and equal neighbors reproduce themselves exactly.
    let values = w_prev
        .values()
        .iter()
        .zip(w_next.values())
        .map(|(&a, &b)| ((omega_prev * a + omega_next * b) / total).clamp(a.min(b), a.max(b)))
        .collect();
    ParameterVector::new(values, w_prev.shape().to_vec())
}

pub fn bump_lr(lr: f64, factor: f64) -> f64 {
    lr * factor
}

/// Fresh weights for a stage of `num_blocks` blocks, using the model's init scheme.
pub fn reinit_random(spec: &ModelSpec, num_blocks: usize, seed: u64, gain: f64) -> ParameterVector {
    let blocks: Vec<_> = (0..num_blocks)
        .map(|b| model::init_block(spec, seed, Domain::Reinit, b, gain))
        .collect();
    ParameterVector::concat(blocks.iter().flat_map(|b| [&b.w1, &b.w2]))
}

pub fn reinit_copy(w_prev: &ParameterVector) -> ParameterVector {
    w_prev.clone()
}

pub fn reinit_uniform_avg(w_prev: &ParameterVector, w_next: &ParameterVector) -> Result<ParameterVector> {
    w_prev.check_same_len(w_next)?;
    let values = w_prev
        .values()
        .iter()
        .zip(w_next.values())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    ParameterVector::new(values, w_prev.shape().to_vec())
}

/// `‖recover_checkfree(W₋, W₊, ω₋, ω₊) − W_failed‖²`: how far the gradient-weighted
/// initialization lands from the weights that were lost.
pub fn reduction_error(
    w_prev: &ParameterVector,
    w_failed: &ParameterVector,
    w_next: &ParameterVector,
    omega_prev: f64,
    omega_next: f64,
) -> Result<f64> {
    recover_checkfree(w_prev, w_next, omega_prev, omega_next)?.distance_sq(w_failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeSide {
    First,
    Last,
}

/// Copies of `E` (held beside stage 2) and `E⁻¹` (held beside stage s−1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeReplica {
    pub embedding: Option<ParameterVector>,
    pub deembedding: Option<ParameterVector>,
    /// Iterations since the last refresh.
    pub staleness: u64,
}

impl EdgeReplica {
    pub fn bytes(&self) -> usize {
        8 * (self.embedding.as_ref().map_or(0, ParameterVector::len)
            + self.deembedding.as_ref().map_or(0, ParameterVector::len))
    }
}

pub fn refresh_edge_replicas(edges: &model::EdgeLayers, replicas: &mut EdgeReplica) {
    replicas.embedding = Some(edges.embedding.clone());
    replicas.deembedding = Some(edges.deembedding.clone());
    replicas.staleness = 0;
}

/// CheckFree+ recovery of the first or last stage: copy the inner neighbor and
/// restore the lost edge layer from its replica.
pub fn recover_edge_stage(
    strategy: &StrategyConfig,
    failed: EdgeSide,
    neighbor: &StageState,
    replicas: &EdgeReplica,
) -> Result<(ParameterVector, ParameterVector)> {
    let stage = match failed {
        EdgeSide::First => 1,
        EdgeSide::Last => neighbor.stage_id + 1,
    };
    if strategy.kind != StrategyKind::CheckFreePlus {
        return Err(Error::UnsupportedRecovery {
            kind: strategy.kind.name(),
            stage,
            reason: "averaging needs two neighbors; first and last stages need CheckFree+".into(),
        });
    }
    let replica = match failed {
        EdgeSide::First => replicas.embedding.as_ref(),
        EdgeSide::Last => replicas.deembedding.as_ref(),
    };
    let replica = replica.ok_or_else(|| {
        Error::Usage(format!("no edge replica available to recover stage {stage}"))
    })?;
    if replicas.staleness > 0 {
        log::warn!(
            "restoring edge layer from a replica {} iterations stale",
            replicas.staleness
        );
    }
    Ok((neighbor.parameters(), replica.clone()))
}

/// Full training state: everything a checkpoint must capture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: Model,
    /// Optimizer steps applied to the model.
    pub progress: u64,
    /// Index of the next training batch.
    pub data_cursor: u64,
}

impl TrainingState {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            progress: 0,
            data_cursor: 0,
        }
    }
}

const CKPT_MAGIC: &[u8] = b"ckfree-ckpt v1\n";

/// Serialized training state taken at `iteration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointSnapshot {
    pub iteration: u64,
    pub bytes: Vec<u8>,
}

fn write_array(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_array(input: &mut &[u8], expected: Option<usize>, what: &str) -> Result<Vec<f64>> {
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::Checkpoint(format!("truncated before {what}")))?;
    let n = u64::from_le_bytes(len) as usize;
    if let Some(e) = expected {
        if n != e {
            return Err(Error::Checkpoint(format!("{what}: expected {e} values, found {n}")));
        }
    }
    if input.len() < n * 8 {
        return Err(Error::Checkpoint(format!("truncated inside {what}")));
    }
    let (head, rest) = input.split_at(n * 8);
    *input = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Encodes `state` as: header, then length-prefixed little-endian `f64` arrays for
/// the edge layers (weights then Adam moments), every stage's weights, every stage's
/// moments, and a trailing counter array (data cursor, progress, step counters,
/// gradient norms, learning rates).
pub fn checkpoint_save(state: &TrainingState) -> CheckpointSnapshot {
    let m = &state.model;
    let mut out = Vec::with_capacity(CKPT_MAGIC.len() + 8 * 4 * m.spec.total_param_count());
    out.extend_from_slice(CKPT_MAGIC);
    write_array(&mut out, m.edges.embedding.values());
    write_array(&mut out, m.edges.deembedding.values());
    for opt in [&m.embedding_opt, &m.deembedding_opt] {
        write_array(&mut out, &opt.m);
        write_array(&mut out, &opt.v);
    }
    for s in &m.stages {
        write_array(&mut out, s.parameters().values());
    }
    for s in &m.stages {
        write_array(&mut out, &s.optimizer.m);
        write_array(&mut out, &s.optimizer.v);
    }
    let mut counters = vec![
        state.data_cursor as f64,
        state.progress as f64,
        m.embedding_opt.step as f64,
        m.deembedding_opt.step as f64,
        m.base_lr,
    ];
    for s in &m.stages {
        counters.extend([s.optimizer.step as f64, s.omega, s.lr]);
    }
    write_array(&mut out, &counters);
    CheckpointSnapshot {
        iteration: state.progress,
        bytes: out,
    }
}

/// Rebuilds the training state saved by [`checkpoint_save`] for a model of shape `spec`.
pub fn checkpoint_restore(snapshot: &CheckpointSnapshot, spec: &ModelSpec) -> Result<TrainingState> {
    let mut input: &[u8] = &snapshot.bytes;
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing header".into()))?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad header, expected `ckfree-ckpt v1`".into()));
    }
    let e_len = spec.input_dim * spec.model_dim;
    let d_len = spec.model_dim * spec.output_dim;
    let embedding = ParameterVector::new(
        read_array(&mut input, Some(e_len), "embedding")?,
        vec![spec.input_dim, spec.model_dim],
    )?;
    let deembedding = ParameterVector::new(
        read_array(&mut input, Some(d_len), "deembedding")?,
        vec![spec.model_dim, spec.output_dim],
    )?;
    let mut embedding_opt = AdamState::new(e_len);
    embedding_opt.m = read_array(&mut input, Some(e_len), "embedding moments")?;
    embedding_opt.v = read_array(&mut input, Some(e_len), "embedding moments")?;
    let mut deembedding_opt = AdamState::new(d_len);
    deembedding_opt.m = read_array(&mut input, Some(d_len), "deembedding moments")?;
    deembedding_opt.v = read_array(&mut input, Some(d_len), "deembedding moments")?;

    let mut stages = Vec::with_capacity(spec.num_stages);
    for s in 0..spec.num_stages {
        let n = spec.stage_param_count(s);
        let flat = ParameterVector::from_vec(read_array(&mut input, Some(n), "stage weights")?)?;
        let mut stage = StageState::new(
            s + 1,
            vec![model::ResidualBlock::zeros(spec); spec.partition[s].len()],
            1.0,
        );
        stage.set_parameters(&flat)?;
        stages.push(stage);
    }
    for (s, stage) in stages.iter_mut().enumerate() {
        let n = spec.stage_param_count(s);
        stage.optimizer.m = read_array(&mut input, Some(n), "stage moments")?;
        stage.optimizer.v = read_array(&mut input, Some(n), "stage moments")?;
    }
    let counters = read_array(&mut input, Some(5 + 3 * spec.num_stages), "counters")?;
    if !input.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", input.len())));
    }
    let edges = model::EdgeLayers {
        embedding,
        deembedding,
    };
    let mut model = Model::assemble(spec.clone(), edges, stages, counters[4])?;
    model.embedding_opt = embedding_opt;
    model.deembedding_opt = deembedding_opt;
    model.embedding_opt.step = counters[2] as u64;
    model.deembedding_opt.step = counters[3] as u64;
    for (i, stage) in model.stages.iter_mut().enumerate() {
        stage.optimizer.step = counters[5 + 3 * i] as u64;
        stage.omega = counters[6 + 3 * i];
        stage.lr = counters[7 + 3 * i];
    }
    Ok(TrainingState {
        model,
        data_cursor: counters[0] as u64,
        progress: counters[1] as u64,
    })
}

impl CheckpointSnapshot {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.bytes)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, spec: &ModelSpec) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let snap = Self { iteration: 0, bytes };
        let state = checkpoint_restore(&snap, spec)?;
        Ok(Self {
            iteration: state.progress,
            ..snap
        })
    }
}

/// Copy of a stage kept by the node running the previous stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantCopy {
    pub stage: StageState,
    /// `E` travels with stage 1's copy, `E⁻¹` with stage s's copy.
    pub edge: Option<(ParameterVector, AdamState)>,
}

pub fn redundant_recover(copy: &RedundantCopy) -> StageState {
    copy.stage.clone()
}

/// Node holding the redundant copy of `stage` (wrapping around the pipeline).
pub fn redundant_holder(stage: usize, num_stages: usize) -> usize {
    if stage == 1 {
        num_stages
    } else {
        stage - 1
    }
}

/// What was done about one failed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryAction {
    pub stage: usize,
    pub action: ActionKind,
    /// Squared distance between the recovered stage weights and the lost ones.
    pub reduction_error: f64,
    /// Progress the run was rolled back to, for checkpoint restores.
    pub rolled_back_to: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    GradientAverage,
    UniformAverage,
    Copy,
    Random,
    EdgeCopy,
    RedundantCopy,
    Rollback,
    Restart,
    Ignored,
}

impl ActionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::GradientAverage => "gradient-average",
            ActionKind::UniformAverage => "uniform-average",
            ActionKind::Copy => "copy",
            ActionKind::Random => "random",
            ActionKind::EdgeCopy => "edge-copy",
            ActionKind::RedundantCopy => "redundant-copy",
            ActionKind::Rollback => "rollback",
            ActionKind::Restart => "restart",
            ActionKind::Ignored => "ignored",
        }
    }
}

/// Per-run recovery machinery: replicas, redundant copies, checkpoint store.
#[derive(Debug, Clone)]
pub struct Recoverer {
    config: StrategyConfig,
    init_seed: u64,
    replicas: EdgeReplica,
    redundant: Vec<RedundantCopy>,
    last_snapshot: Option<CheckpointSnapshot>,
    snapshots_taken: u64,
}

impl Recoverer {
    /// Sets up the strategy's redundancy for `state` (initial snapshot, replicas, copies).
    pub fn new(config: StrategyConfig, state: &TrainingState, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if config.kind == StrategyKind::CheckFreePlus && state.model.spec.num_stages < 4 {
            return Err(Error::config("CheckFree+ needs at least 4 stages"));
        }
        let mut r = Self {
            config,
            init_seed,
            replicas: EdgeReplica::default(),
            redundant: Vec::new(),
            last_snapshot: None,
            snapshots_taken: 0,
        };
        r.after_step(state);
        Ok(r)
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn replicas(&self) -> &EdgeReplica {
        &self.replicas
    }

    pub fn last_snapshot(&self) -> Option<&CheckpointSnapshot> {
        self.last_snapshot.as_ref()
    }

    pub fn snapshots_taken(&self) -> u64 {
        self.snapshots_taken
    }

    /// Drops the stored checkpoint, as if the store had never received one.
    pub fn clear_snapshot(&mut self) {
        self.last_snapshot = None;
    }

    /// Refreshes redundancy once an optimizer step has completed (or at start).
    pub fn after_step(&mut self, state: &TrainingState) {
        match self.config.kind {
            StrategyKind::CheckFreePlus => {
                refresh_edge_replicas(&state.model.edges, &mut self.replicas);
            }
            StrategyKind::RedundantComputation => {
                let m = &state.model;
                let s = m.spec.num_stages;
                self.redundant = m
                    .stages
                    .iter()
                    .map(|st| RedundantCopy {
                        stage: st.clone(),
                        edge: if st.stage_id == 1 {
                            Some((m.edges.embedding.clone(), m.embedding_opt.clone()))
                        } else if st.stage_id == s {
                            Some((m.edges.deembedding.clone(), m.deembedding_opt.clone()))
                        } else {
                            None
                        },
                    })
                    .collect();
            }
            StrategyKind::Checkpointing { interval_iters } => {
                if state.progress % interval_iters == 0
                    && self.last_snapshot.as_ref().map(|s| s.iteration) != Some(state.progress)
                {
                    self.last_snapshot = Some(checkpoint_save(state));
                    self.snapshots_taken += 1;
                }
            }
            _ => {}
        }
    }

    /// Marks the passage of one iteration without a refresh.
    pub fn tick_without_refresh(&mut self) {
        self.replicas.staleness += 1;
    }

    /// Recovers every stage in `failed` (one-based, lost at the boundary before
    /// `iteration`). Returns one action per failed stage.
    pub fn handle_failures(
        &mut self,
        state: &mut TrainingState,
        failed: &[usize],
        iteration: u64,
    ) -> Result<Vec<RecoveryAction>> {
        if failed.is_empty() {
            return Ok(Vec::new());
        }
        let s = state.model.spec.num_stages;
        let dead: BTreeSet<usize> = failed.iter().copied().collect();
        if let Some(bad) = dead.iter().find(|&&i| i == 0 || i > s) {
            return Err(Error::Validation(format!("failed stage {bad} out of range 1..={s}")));
        }
        let before: Vec<ParameterVector> = dead
            .iter()
            .map(|&i| state.model.stage(i).parameters())
            .collect();

        let kinds = match self.config.kind {
            StrategyKind::NoFailures => vec![ActionKind::Ignored; dead.len()],
            StrategyKind::Checkpointing { .. } => {
                let kind = self.rollback(state);
                vec![kind; dead.len()]
            }
            StrategyKind::RedundantComputation => self.redundant_all(state, &dead, iteration)?,
            _ => self.neighbor_all(state, &dead, iteration)?,
        };

        let mut actions = Vec::with_capacity(dead.len());
        for ((&stage, old), action) in dead.iter().zip(&before).zip(kinds) {
            let now = state.model.stage(stage).parameters();
            actions.push(RecoveryAction {
                stage,
                action,
                reduction_error: now.distance_sq(old)?,
                rolled_back_to: matches!(action, ActionKind::Rollback | ActionKind::Restart)
                    .then_some(state.progress),
            });
        }
        // A replaced node starts without the replica it used to hold.
        if self.config.kind == StrategyKind::CheckFreePlus {
            if dead.contains(&2) {
                self.replicas.embedding = None;
            }
            if dead.contains(&(s - 1)) {
                self.replicas.deembedding = None;
            }
        }
        Ok(actions)
    }

    fn rollback(&mut self, state: &mut TrainingState) -> ActionKind {
        let spec = state.model.spec.clone();
        match self
            .last_snapshot
            .as_ref()
            .map(|snap| checkpoint_restore(snap, &spec))
        {
            Some(Ok(mut restored)) => {
                restored.model.block_init = state.model.block_init;
                *state = restored;
                ActionKind::Rollback
            }
            other => {
                if let Some(Err(e)) = other {
                    log::error!("checkpoint restore failed: {e}");
                }
                log::warn!("no checkpoint available; restarting from initialization");
                let model = Model::init_with(
                    &spec,
                    self.init_seed,
                    state.model.block_init,
                    state.model.base_lr,
                )
                .expect("spec and init already validated");
                *state = TrainingState::new(model);
                self.last_snapshot = None;
                self.after_step(state);
                ActionKind::Restart
            }
        }
    }

    fn redundant_all(
        &mut self,
        state: &mut TrainingState,
        dead: &BTreeSet<usize>,
        iteration: u64,
    ) -> Result<Vec<ActionKind>> {
        let s = state.model.spec.num_stages;
        for &i in dead {
            let holder = redundant_holder(i, s);
            if dead.contains(&holder) {
                return Err(Error::Unrecoverable {
                    iteration,
                    reason: format!(
                        "stage {i} and the node holding its redundant copy (stage {holder}) failed together"
                    ),
                });
            }
        }
        for &i in dead {
            let copy = self
                .redundant
                .get(i - 1)
                .ok_or_else(|| Error::Usage("redundant copies were never populated".into()))?;
            *state.model.stage_mut(i) = redundant_recover(copy);
            match (&copy.edge, i) {
                (Some((w, opt)), 1) => {
                    state.model.edges.embedding = w.clone();
                    state.model.embedding_opt = opt.clone();
                }
                (Some((w, opt)), _) if i == s => {
                    state.model.edges.deembedding = w.clone();
                    state.model.deembedding_opt = opt.clone();
                }
                _ => {}
            }
        }
        Ok(vec![ActionKind::RedundantCopy; dead.len()])
    }

    fn neighbor_all(
        &mut self,
        state: &mut TrainingState,
        dead: &BTreeSet<usize>,
        iteration: u64,
    ) -> Result<Vec<ActionKind>> {
        let s = state.model.spec.num_stages;
        let kind = self.config.kind;
        for &i in dead {
            let edge = i == 1 || i == s;
            if edge && !kind.recovers_edges() {
                return Err(Error::UnsupportedRecovery {
                    kind: kind.name(),
                    stage: i,
                    reason: "averaging needs two neighbors; first and last stages need CheckFree+"
                        .into(),
                });
            }
            if dead.contains(&(i + 1)) {
                return Err(Error::Unrecoverable {
                    iteration,
                    reason: format!("consecutive stages {i} and {} failed together", i + 1),
                });
            }
        }

        // Everything below reads only surviving stages.
        let mut plans = Vec::with_capacity(dead.len());
        for &i in dead {
            plans.push(self.plan_neighbor(&state.model, i, iteration)?);
        }
        let base_lr = state.model.base_lr;
        let mut kinds = Vec::with_capacity(dead.len());
        for (&i, plan) in dead.iter().zip(plans) {
            let stage = state.model.stage_mut(i);
            stage.set_parameters(&plan.weights)?;
            stage.reset_optimizer();
            if let Some(opt) = plan.optimizer {
                stage.optimizer = opt;
            }
            stage.lr = bump_lr(base_lr, self.config.lr_bump);
            if let Some((side, w)) = plan.edge {
                match side {
                    EdgeSide::First => {
                        state.model.edges.embedding = w.reshaped(vec![
                            state.model.spec.input_dim,
                            state.model.spec.model_dim,
                        ])?;
                        state.model.embedding_opt = AdamState::new(state.model.edges.embedding.len());
                    }
                    EdgeSide::Last => {
                        state.model.edges.deembedding = w.reshaped(vec![
                            state.model.spec.model_dim,
                            state.model.spec.output_dim,
                        ])?;
                        state.model.deembedding_opt =
                            AdamState::new(state.model.edges.deembedding.len());
                    }
                }
            }
            kinds.push(plan.kind);
        }
        Ok(kinds)
    }

    fn plan_neighbor(&self, model: &Model, i: usize, iteration: u64) -> Result<Plan> {
        let s = model.spec.num_stages;
        if self.config.kind == StrategyKind::CheckFreePlus && (i == 1 || i == s) {
            let (side, neighbor) = if i == 1 {
                (EdgeSide::First, model.stage(2))
            } else {
                (EdgeSide::Last, model.stage(s - 1))
            };
            let (weights, edge) = recover_edge_stage(&self.config, side, neighbor, &self.replicas)?;
            let optimizer = (self.config.optimizer_on_recovery == OptimizerOnRecovery::Average)
                .then(|| neighbor.optimizer.clone());
            return Ok(Plan {
                weights,
                optimizer,
                edge: Some((side, edge)),
                kind: ActionKind::EdgeCopy,
            });
        }

        let prev = model.stage(i - 1);
        let next = model.stage(i + 1);
        let (w_prev, w_next) = (prev.parameters(), next.parameters());
        let average = self.config.optimizer_on_recovery == OptimizerOnRecovery::Average;
        let (weights, optimizer, kind) = match self.config.kind {
            StrategyKind::CheckFree | StrategyKind::CheckFreePlus => {
                let (wp, wn) = if prev.omega + next.omega > 0.0 {
                    (prev.omega, next.omega)
                } else {
                    (1.0, 1.0)
                };
                (
                    recover_checkfree(&w_prev, &w_next, prev.omega, next.omega)?,
                    average.then(|| average_moments(&prev.optimizer, &next.optimizer, wp, wn)),
                    ActionKind::GradientAverage,
                )
            }
            StrategyKind::ReinitUniformAvg => (
                reinit_uniform_avg(&w_prev, &w_next)?,
                average.then(|| average_moments(&prev.optimizer, &next.optimizer, 1.0, 1.0)),
                ActionKind::UniformAverage,
            ),
            StrategyKind::ReinitCopy => (
                reinit_copy(&w_prev),
                average.then(|| prev.optimizer.clone()),
                ActionKind::Copy,
            ),
            StrategyKind::ReinitRandom => {
                let seed = rng::counter_u64(self.init_seed, &[iteration, i as u64]);
                (
                    reinit_random(&model.spec, model.spec.partition[i - 1].len(), seed, model.block_init.gain),
                    None,
                    ActionKind::Random,
                )
            }
            other => unreachable!("{} is not a neighbor-based strategy", other.name()),
        };
        Ok(Plan {
            weights,
            optimizer,
            edge: None,
            kind,
        })
    }
}

struct Plan {
    weights: ParameterVector,
    optimizer: Option<AdamState>,
    edge: Option<(EdgeSide, ParameterVector)>,
    kind: ActionKind,
}

fn average_moments(a: &AdamState, b: &AdamState, wa: f64, wb: f64) -> AdamState {
    let total = wa + wb;
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(p, q)| (wa * p + wb * q) / total).collect()
    };
    AdamState {
        m: mix(&a.m, &b.m),
        v: mix(&a.v, &b.v),
        step: a.step.max(b.step),
    }
}

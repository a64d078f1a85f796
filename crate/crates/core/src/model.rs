//! Residual MLP model split into pipeline stages.
//!
//! The network is `E⁻¹ ∘ (I + f_L) ∘ … ∘ (I + f_1) ∘ E` where each block is
//! `f(x) = act(x·W1)·W2`. Activations are row-major `batch × dim` matrices.
//! Blocks belong to stages through [`ModelSpec::partition`]; the caller
//! decides the order in which stages run.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, AdamState};
use crate::param::ParameterVector;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Teacher-student regression, mean squared error.
    #[default]
    Regression,
    /// Argmax-of-teacher classification, mean cross-entropy.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub model_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub num_stages: usize,
    /// Zero-based, half-open layer ranges, one per stage.
    pub partition: Vec<Range<usize>>,
    pub activation: Activation,
    pub task: Task,
}

impl ModelSpec {
    /// Spec with layers split as evenly as possible, earlier stages taking the remainder.
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        model_dim: usize,
        output_dim: usize,
        num_layers: usize,
        num_stages: usize,
    ) -> Result<Self> {
        if num_stages == 0 || num_stages > num_layers {
            return Err(Error::config(format!(
                "stage count {num_stages} must be in [1, {num_layers}]"
            )));
        }
        let spec = Self {
            input_dim,
            hidden_dim,
            model_dim,
            output_dim,
            num_layers,
            num_stages,
            partition: even_partition(num_layers, num_stages),
            activation: Activation::default(),
            task: Task::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_partition(mut self, partition: Vec<Range<usize>>) -> Result<Self> {
        self.num_stages = partition.len();
        self.partition = partition;
        self.validate()?;
        Ok(self)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    /// Checks dimensions and that the partition covers every layer exactly once, in order.
    ///
    /// A single stage is accepted so that a monolithic reference model can be
    /// expressed with the same types; pipeline runs require at least two.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("model_dim", self.model_dim),
            ("output_dim", self.output_dim),
            ("num_layers", self.num_layers),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.num_stages == 0 || self.num_stages > self.num_layers {
            return Err(Error::config(format!(
                "stage count {} must be in [1, {}]",
                self.num_stages, self.num_layers
            )));
        }
        if self.partition.len() != self.num_stages {
            return Err(Error::config(format!(
                "partition has {} ranges for {} stages",
                self.partition.len(),
                self.num_stages
            )));
        }
        let mut next = 0;
        for (i, r) in self.partition.iter().enumerate() {
            if r.start != next || r.end <= r.start {
                return Err(Error::config(format!(
                    "partition range {} ({:?}) is empty or not contiguous",
                    i + 1,
                    r
                )));
            }
            next = r.end;
        }
        if next != self.num_layers {
            return Err(Error::config(format!(
                "partition covers {next} layers, model has {}",
                self.num_layers
            )));
        }
        if self.task == Task::Classification && self.output_dim < 2 {
            return Err(Error::config("classification needs at least two classes"));
        }
        Ok(())
    }

    pub fn layers_in_stage(&self, stage_index: usize) -> Range<usize> {
        self.partition[stage_index].clone()
    }

    pub fn block_param_count(&self) -> usize {
        2 * self.model_dim * self.hidden_dim
    }

    pub fn stage_param_count(&self, stage_index: usize) -> usize {
        self.partition[stage_index].len() * self.block_param_count()
    }

    pub fn edge_param_count(&self) -> usize {
        self.input_dim * self.model_dim + self.model_dim * self.output_dim
    }

    pub fn total_param_count(&self) -> usize {
        self.edge_param_count() + self.num_layers * self.block_param_count()
    }
}

pub fn even_partition(num_layers: usize, num_stages: usize) -> Vec<Range<usize>> {
    let base = num_layers / num_stages;
    let extra = num_layers % num_stages;
    let mut start = 0;
    (0..num_stages)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// `x ↦ x + act(x·W1)·W2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    /// `model_dim × hidden_dim`
    pub w1: ParameterVector,
    /// `hidden_dim × model_dim`
    pub w2: ParameterVector,
}

impl ResidualBlock {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            w1: ParameterVector::zeros(&[spec.model_dim, spec.hidden_dim]),
            w2: ParameterVector::zeros(&[spec.hidden_dim, spec.model_dim]),
        }
    }

    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: init_matrix(spec.model_dim, spec.hidden_dim, 1.0, rng),
            w2: init_matrix(spec.hidden_dim, spec.model_dim, 1.0, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn forward(&self, h: ArrayView2<'_, f64>, act: Activation) -> Array2<f64> {
        let z = h.dot(&self.w1.matrix());
        let a = z.mapv(|v| act.apply(v));
        &h + &a.dot(&self.w2.matrix())
    }
}

/// Uniform in `[-a, a]` with `a = gain * sqrt(6 / (fan_in + fan_out))`.
pub fn init_matrix(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> ParameterVector {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    ParameterVector::new(values, vec![rows, cols]).expect("finite init")
}

/// Weights, optimizer state and bookkeeping for one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    /// One-based.
    pub stage_id: usize,
    pub blocks: Vec<ResidualBlock>,
    pub optimizer: AdamState,
    /// Squared norm of the most recent gradient; zero before the first backward pass.
    pub omega: f64,
    pub lr: f64,
}

impl StageState {
    pub fn new(stage_id: usize, blocks: Vec<ResidualBlock>, lr: f64) -> Self {
        let n = blocks.iter().map(ResidualBlock::param_count).sum();
        Self {
            stage_id,
            blocks,
            optimizer: AdamState::new(n),
            omega: 0.0,
            lr,
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::param_count).sum()
    }

    /// Flat weights in block order, `W1` before `W2` within each block.
    pub fn parameters(&self) -> ParameterVector {
        ParameterVector::concat(self.blocks.iter().flat_map(|b| [&b.w1, &b.w2]))
    }

    /// Overwrites the weights from a flat vector laid out like [`parameters`](Self::parameters).
    pub fn set_parameters(&mut self, flat: &ParameterVector) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config(format!(
                "stage {} expects {} parameters, got {}",
                self.stage_id,
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.param_slices_mut() {
            let n = p.len();
            p.copy_from_slice(&flat.values()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub(crate) fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [b.w1.values_mut(), b.w2.values_mut()])
    }

    /// Adam step on this stage's blocks; records `omega = ‖grads‖²`.
    pub fn adam_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        optim::check_finite(grads)?;
        let mut optimizer = std::mem::replace(&mut self.optimizer, AdamState::new(0));
        let res = optimizer.update(self.param_slices_mut(), grads, lr);
        self.optimizer = optimizer;
        res?;
        self.omega = optim::grad_norm_sq(grads);
        Ok(())
    }

    /// Drops optimizer moments and the gradient-norm record, as on a fresh node.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::new(self.param_count());
        self.omega = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLayers {
    /// `input_dim × model_dim`
    pub embedding: ParameterVector,
    /// `model_dim × output_dim`
    pub deembedding: ParameterVector,
}

impl EdgeLayers {
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        Self {
            embedding: ParameterVector::new(eye.clone(), vec![dim, dim]).expect("finite"),
            deembedding: ParameterVector::new(eye, vec![dim, dim]).expect("finite"),
        }
    }

    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embedding: init_matrix(spec.input_dim, spec.model_dim, 1.0, rng),
            deembedding: init_matrix(spec.model_dim, spec.output_dim, 1.0, rng),
        }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.embedding.shape() != [spec.input_dim, spec.model_dim]
            || self.deembedding.shape() != [spec.model_dim, spec.output_dim]
        {
            return Err(Error::config(format!(
                "edge layer shapes {:?}/{:?} inconsistent with model spec",
                self.embedding.shape(),
                self.deembedding.shape()
            )));
        }
        Ok(())
    }
}

/// Whole model: edges, stages, and edge optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub edges: EdgeLayers,
    pub embedding_opt: AdamState,
    pub deembedding_opt: AdamState,
    pub stages: Vec<StageState>,
    /// Learning rate of the edge layers and of stages that were never recovered.
    pub base_lr: f64,
    /// How blocks were drawn at initialization; fresh stages reuse the scale.
    pub block_init: BlockInit,
}

/// Distribution of block weights at initialization.
///
/// Each block is `√ρ·W_shared + √(1−ρ)·W_own` scaled by `gain`, where `W_shared`
/// is one draw common to every layer and `ρ` is `correlation`. The marginal
/// distribution of every entry does not depend on `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockInit {
    pub gain: f64,
    pub correlation: f64,
}

impl Default for BlockInit {
    fn default() -> Self {
        Self {
            gain: 1.0,
            correlation: 0.0,
        }
    }
}

impl BlockInit {
    pub fn new(gain: f64, correlation: f64) -> Result<Self> {
        let b = Self { gain, correlation };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::config("init gain must be positive"));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("init correlation must be in [0, 1]"));
        }
        Ok(())
    }
}

impl Model {
    /// Random init from the student init stream of `seed`.
    pub fn init(spec: &ModelSpec, seed: u64, lr: f64) -> Result<Self> {
        Self::init_with(spec, seed, BlockInit::default(), lr)
    }

    pub fn init_with(spec: &ModelSpec, seed: u64, block_init: BlockInit, lr: f64) -> Result<Self> {
        Self::init_from_stream(spec, seed, Domain::StudentInit, block_init, lr)
    }

    /// Random init; every layer draws from its own stream so a single stage can be
    /// regenerated without touching the others.
    pub fn init_from_stream(
        spec: &ModelSpec,
        seed: u64,
        domain: Domain,
        block_init: BlockInit,
        lr: f64,
    ) -> Result<Self> {
        spec.validate()?;
        block_init.validate()?;
        let mut edge_rng = rng::stream(seed, domain, u64::MAX);
        let edges = EdgeLayers::init(spec, &mut edge_rng);
        let rho = block_init.correlation;
        let shared = (rho > 0.0).then(|| init_block(spec, seed, domain, SHARED_BLOCK_STREAM, 1.0));
        let stages = (0..spec.num_stages)
            .map(|s| {
                let blocks = spec
                    .layers_in_stage(s)
                    .map(|layer| {
                        let own = init_block(spec, seed, domain, layer, 1.0);
                        let mix = |own: &ParameterVector, common: Option<&ParameterVector>| {
                            let values = match common {
                                None => own.values().iter().map(|v| block_init.gain * v).collect(),
                                Some(c) => own
                                    .values()
                                    .iter()
                                    .zip(c.values())
                                    .map(|(o, c)| {
                                        block_init.gain * (rho.sqrt() * c + (1.0 - rho).sqrt() * o)
                                    })
                                    .collect(),
                            };
                            ParameterVector::new(values, own.shape().to_vec())
                                .expect("finite mix of finite draws")
                        };
                        ResidualBlock {
                            w1: mix(&own.w1, shared.as_ref().map(|b| &b.w1)),
                            w2: mix(&own.w2, shared.as_ref().map(|b| &b.w2)),
                        }
                    })
                    .collect();
                StageState::new(s + 1, blocks, lr)
            })
            .collect();
        let mut model = Self::assemble(spec.clone(), edges, stages, lr)?;
        model.block_init = block_init;
        Ok(model)
    }

    pub fn assemble(
        spec: ModelSpec,
        edges: EdgeLayers,
        stages: Vec<StageState>,
        lr: f64,
    ) -> Result<Self> {
        spec.validate()?;
        edges.check(&spec)?;
        if stages.len() != spec.num_stages {
            return Err(Error::config("stage count does not match spec"));
        }
        for (i, st) in stages.iter().enumerate() {
            if st.blocks.len() != spec.partition[i].len() {
                return Err(Error::config(format!(
                    "stage {} holds {} blocks, partition says {}",
                    i + 1,
                    st.blocks.len(),
                    spec.partition[i].len()
                )));
            }
        }
        Ok(Self {
            embedding_opt: AdamState::new(edges.embedding.len()),
            deembedding_opt: AdamState::new(edges.deembedding.len()),
            spec,
            edges,
            stages,
            base_lr: lr,
            block_init: BlockInit::default(),
        })
    }

    /// All block weights in layer order.
    pub fn block_parameters(&self) -> ParameterVector {
        ParameterVector::concat(
            self.stages
                .iter()
                .flat_map(|s| s.blocks.iter())
                .flat_map(|b| [&b.w1, &b.w2]),
        )
    }

    /// Edge and block weights: `E`, blocks in layer order, `E⁻¹`.
    pub fn all_parameters(&self) -> ParameterVector {
        let blocks = self.block_parameters();
        ParameterVector::concat([&self.edges.embedding, &blocks, &self.edges.deembedding])
    }

    pub fn stage(&self, stage_id: usize) -> &StageState {
        &self.stages[stage_id - 1]
    }

    pub fn stage_mut(&mut self, stage_id: usize) -> &mut StageState {
        &mut self.stages[stage_id - 1]
    }

    pub fn block(&self, layer: usize) -> &ResidualBlock {
        let (s, b) = self.locate_layer(layer);
        &self.stages[s].blocks[b]
    }

    fn locate_layer(&self, layer: usize) -> (usize, usize) {
        let s = self
            .spec
            .partition
            .iter()
            .position(|r| r.contains(&layer))
            .expect("layer index in range");
        (s, layer - self.spec.partition[s].start)
    }

    /// Standard-order predictions.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let order: Vec<usize> = (1..=self.spec.num_stages).collect();
        Ok(forward(&self.spec, &self.edges, &self.stages, &order, inputs)?.predictions)
    }

    /// Standard-order loss on one batch.
    pub fn loss(&self, inputs: ArrayView2<'_, f64>, targets: &Targets) -> Result<f64> {
        let preds = self.predict(inputs)?;
        loss_value(self.spec.task, preds.view(), targets)
    }
}

/// Stream index of the draw shared by all layers under correlated init.
const SHARED_BLOCK_STREAM: usize = usize::MAX - 1;

pub fn init_block(
    spec: &ModelSpec,
    seed: u64,
    domain: Domain,
    layer: usize,
    gain: f64,
) -> ResidualBlock {
    let mut r = rng::stream(seed, domain, layer as u64);
    ResidualBlock {
        w1: init_matrix(spec.model_dim, spec.hidden_dim, gain, &mut r),
        w2: init_matrix(spec.hidden_dim, spec.model_dim, gain, &mut r),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `batch × output_dim`
    Values(Array2<f64>),
    /// Class index per row.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn rows(&self) -> usize {
        match self {
            Targets::Values(v) => v.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Targets {
        match self {
            Targets::Values(v) => Targets::Values(v.slice(ndarray::s![range, ..]).to_owned()),
            Targets::Classes(c) => Targets::Classes(c[range].to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockRecord {
    stage_index: usize,
    block_index: usize,
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Activations kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Array2<f64>,
    records: Vec<BlockRecord>,
    final_hidden: Array2<f64>,
    pub predictions: Array2<f64>,
    /// Stage ids in the order they ran.
    pub order: Vec<usize>,
    /// Activation entering each stage, in execution order, followed by the final hidden state.
    pub stage_boundaries: Vec<Array2<f64>>,
}

fn check_order(spec: &ModelSpec, order: &[usize]) -> Result<()> {
    let mut seen = vec![false; spec.num_stages];
    if order.len() != spec.num_stages {
        return Err(Error::config(format!(
            "execution order has {} entries for {} stages",
            order.len(),
            spec.num_stages
        )));
    }
    for &s in order {
        if s == 0 || s > spec.num_stages || seen[s - 1] {
            return Err(Error::config(format!(
                "execution order {order:?} is not a permutation of 1..={}",
                spec.num_stages
            )));
        }
        seen[s - 1] = true;
    }
    Ok(())
}

/// Runs `E`, then each stage of `order` (one-based ids), then `E⁻¹`.
pub fn forward(
    spec: &ModelSpec,
    edges: &EdgeLayers,
    stages: &[StageState],
    order: &[usize],
    inputs: ArrayView2<'_, f64>,
) -> Result<ForwardCache> {
    forward_masked(spec, edges, stages, order, inputs, None)
}

/// [`forward`] with layers whose mask entry is `false` replaced by the identity.
pub fn forward_masked(
    spec: &ModelSpec,
    edges: &EdgeLayers,
    stages: &[StageState],
    order: &[usize],
    inputs: ArrayView2<'_, f64>,
    mask: Option<&[bool]>,
) -> Result<ForwardCache> {
    check_order(spec, order)?;
    edges.check(spec)?;
    if stages.len() != spec.num_stages {
        return Err(Error::config("stage list does not match spec"));
    }
    if inputs.ncols() != spec.input_dim {
        return Err(Error::config(format!(
            "batch has {} columns, model expects {}",
            inputs.ncols(),
            spec.input_dim
        )));
    }
    if let Some(m) = mask {
        if m.len() != spec.num_layers {
            return Err(Error::config(format!(
                "mask has {} entries for {} layers",
                m.len(),
                spec.num_layers
            )));
        }
    }

    let act = spec.activation;
    let mut h = inputs.dot(&edges.embedding.matrix());
    let mut records = Vec::with_capacity(spec.num_layers);
    let mut stage_boundaries = Vec::with_capacity(order.len() + 1);
    for &stage_id in order {
        let si = stage_id - 1;
        let stage = &stages[si];
        if stage.blocks.len() != spec.partition[si].len() {
            return Err(Error::config(format!(
                "stage {stage_id} block count does not match partition"
            )));
        }
        stage_boundaries.push(h.clone());
        for (bi, block) in stage.blocks.iter().enumerate() {
            let layer = spec.partition[si].start + bi;
            if mask.is_some_and(|m| !m[layer]) {
                continue;
            }
            let pre = h.dot(&block.w1.matrix());
            let a = pre.mapv(|v| act.apply(v));
            let out = &h + &a.dot(&block.w2.matrix());
            records.push(BlockRecord {
                stage_index: si,
                block_index: bi,
                input: h,
                pre,
                act: a,
            });
            h = out;
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence("non-finite hidden activation"));
    }
    stage_boundaries.push(h.clone());
    let predictions = h.dot(&edges.deembedding.matrix());
    if predictions.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence("non-finite prediction"));
    }
    Ok(ForwardCache {
        inputs: inputs.to_owned(),
        records,
        final_hidden: h,
        predictions,
        order: order.to_vec(),
        stage_boundaries,
    })
}

/// Gradients of the mean loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Vec<f64>,
    pub deembedding: Vec<f64>,
    /// Indexed by stage position (stage id − 1), laid out like [`StageState::parameters`].
    pub stages: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            embedding: vec![0.0; spec.input_dim * spec.model_dim],
            deembedding: vec![0.0; spec.model_dim * spec.output_dim],
            stages: (0..spec.num_stages)
                .map(|s| vec![0.0; spec.stage_param_count(s)])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        add_into(&mut self.embedding, &other.embedding);
        add_into(&mut self.deembedding, &other.deembedding);
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            add_into(a, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .stages
            .iter_mut()
            .flat_map(|s| s.iter_mut())
            .chain(self.embedding.iter_mut())
            .chain(self.deembedding.iter_mut())
        {
            *v *= factor;
        }
    }

    /// Flat vector: `E`, blocks in layer order, `E⁻¹`; matches [`Model::all_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.embedding.clone();
        for s in &self.stages {
            out.extend_from_slice(s);
        }
        out.extend_from_slice(&self.deembedding);
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Mean squared error or mean cross-entropy, depending on the task.
pub fn loss_value(task: Task, predictions: ArrayView2<'_, f64>, targets: &Targets) -> Result<f64> {
    Ok(loss_and_grad(task, predictions, targets, false)?.0)
}

fn loss_and_grad(
    task: Task,
    predictions: ArrayView2<'_, f64>,
    targets: &Targets,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let rows = predictions.nrows();
    if targets.rows() != rows {
        return Err(Error::config(format!(
            "{} targets for {rows} predictions",
            targets.rows()
        )));
    }
    match (task, targets) {
        (Task::Regression, Targets::Values(t)) => {
            if t.dim() != predictions.dim() {
                return Err(Error::config("target shape differs from prediction shape"));
            }
            let diff = &predictions - t;
            let n = diff.len() as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            let grad = want_grad.then(|| diff.mapv(|d| 2.0 * d / n));
            Ok((loss, grad))
        }
        (Task::Classification, Targets::Classes(classes)) => {
            let k = predictions.ncols();
            let mut loss = 0.0;
            let mut grad = want_grad.then(|| Array2::zeros(predictions.dim()));
            for (r, row) in predictions.axis_iter(Axis(0)).enumerate() {
                let c = classes[r];
                if c >= k {
                    return Err(Error::config(format!("class {c} out of range for {k} outputs")));
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[c];
                if let Some(g) = grad.as_mut() {
                    for j in 0..k {
                        let p = (row[j] - log_z).exp();
                        g[[r, j]] = (p - if j == c { 1.0 } else { 0.0 }) / rows as f64;
                    }
                }
            }
            Ok((loss / rows as f64, grad))
        }
        _ => Err(Error::config("target kind does not match task")),
    }
}

/// Gradients of the mean loss for the batch cached by [`forward`].
///
/// Must be given the same weights that produced the cache.
pub fn backward(
    spec: &ModelSpec,
    edges: &EdgeLayers,
    stages: &[StageState],
    cache: &ForwardCache,
    targets: &Targets,
) -> Result<(Gradients, f64)> {
    if targets.rows() != cache.inputs.nrows() {
        return Err(Error::Usage(format!(
            "cached activations are for a batch of {} rows, got {} targets",
            cache.inputs.nrows(),
            targets.rows()
        )));
    }
    if cache.order.len() != stages.len() {
        return Err(Error::Usage("cached activations belong to a different model".into()));
    }
    let (loss, dy) = loss_and_grad(spec.task, cache.predictions.view(), targets, true)?;
    let dy = dy.expect("gradient requested");
    let act = spec.activation;

    let mut grads = Gradients::zeros(spec);
    grads.deembedding = cache.final_hidden.t().dot(&dy).iter().copied().collect();
    let mut dh = dy.dot(&edges.deembedding.matrix().t());

    let block_len = spec.block_param_count();
    let w1_len = spec.model_dim * spec.hidden_dim;
    for rec in cache.records.iter().rev() {
        let block = &stages[rec.stage_index].blocks[rec.block_index];
        let d_w2 = rec.act.t().dot(&dh);
        let mut dz = dh.dot(&block.w2.matrix().t());
        ndarray::Zip::from(&mut dz)
            .and(&rec.pre)
            .for_each(|d, &z| *d *= act.derivative(z));
        let d_w1 = rec.input.t().dot(&dz);
        dh = &dh + &dz.dot(&block.w1.matrix().t());

        let off = rec.block_index * block_len;
        let g = &mut grads.stages[rec.stage_index];
        copy_standard_layout(&d_w1, &mut g[off..off + w1_len]);
        copy_standard_layout(&d_w2, &mut g[off + w1_len..off + block_len]);
    }
    grads.embedding = cache.inputs.t().dot(&dh).iter().copied().collect();

    if !loss.is_finite() {
        return Err(Error::divergence("non-finite loss"));
    }
    Ok((grads, loss))
}

fn copy_standard_layout(src: &Array2<f64>, dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
}

/// Loss of the standard-order model with masked-out layers (`false`) replaced by the identity.
pub fn layer_omission_loss(
    spec: &ModelSpec,
    edges: &EdgeLayers,
    stages: &[StageState],
    mask: &[bool],
    inputs: ArrayView2<'_, f64>,
    targets: &Targets,
) -> Result<f64> {
    let order: Vec<usize> = (1..=spec.num_stages).collect();
    let cache = forward_masked(spec, edges, stages, &order, inputs, Some(mask))?;
    loss_value(spec.task, cache.predictions.view(), targets)
}

//! Analytic accounting of iteration time, recovery time and wall-clock train time
//! over a geo-distributed network profile.
//!
//! Each stage runs on one site. A microbatch crosses every stage boundary once
//! forward (activations) and once backward (activation gradients); a transfer
//! of `n` bytes over a link costs `latency + n / bandwidth`. Transfers that
//! happen on distinct links at the same time are charged as their maximum.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::failure::FailureTrace;
use crate::recovery::StrategyKind;

const NET_MAGIC: &str = "ckfree-net v1";

/// Megabits per second to bytes per second.
pub fn mbps(v: f64) -> f64 {
    v * 1e6 / 8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub sites: Vec<String>,
    /// Seconds, `sites × sites`.
    pub latency: Vec<Vec<f64>>,
    /// Bytes per second, `sites × sites`.
    pub bandwidth: Vec<Vec<f64>>,
    /// Site index of each stage (index 0 is stage 1).
    pub assignment: Vec<usize>,
    /// Site hosting the checkpoint store.
    pub storage_site: usize,
}

impl NetworkProfile {
    /// Five synthetic sites: 50–150 ms and 100–500 Mb/s between sites, 1 ms and
    /// 10 Gb/s within a site. Stages are assigned round-robin.
    pub fn geo5(num_stages: usize) -> Self {
        let sites = ["us-central", "us-east", "europe-west", "asia-east", "australia-se"];
        // Upper triangles; symmetric.
        let lat_ms = [
            [1.0, 50.0, 100.0, 130.0, 150.0],
            [50.0, 1.0, 80.0, 150.0, 140.0],
            [100.0, 80.0, 1.0, 120.0, 150.0],
            [130.0, 150.0, 120.0, 1.0, 70.0],
            [150.0, 140.0, 150.0, 70.0, 1.0],
        ];
        let bw_mbps = [
            [10_000.0, 500.0, 300.0, 200.0, 100.0],
            [500.0, 10_000.0, 400.0, 150.0, 120.0],
            [300.0, 400.0, 10_000.0, 250.0, 100.0],
            [200.0, 150.0, 250.0, 10_000.0, 350.0],
            [100.0, 120.0, 100.0, 350.0, 10_000.0],
        ];
        Self {
            sites: sites.iter().map(|s| s.to_string()).collect(),
            latency: lat_ms
                .iter()
                .map(|r| r.iter().map(|ms| ms / 1e3).collect())
                .collect(),
            bandwidth: bw_mbps
                .iter()
                .map(|r| r.iter().map(|&b| mbps(b)).collect())
                .collect(),
            assignment: (0..num_stages).map(|i| i % sites.len()).collect(),
            storage_site: 0,
        }
    }

    /// One site with every link uniform: handy for closed-form checks.
    pub fn uniform(num_stages: usize, latency: f64, bandwidth: f64) -> Self {
        Self {
            sites: vec!["site".into()],
            latency: vec![vec![latency]],
            bandwidth: vec![vec![bandwidth]],
            assignment: vec![0; num_stages],
            storage_site: 0,
        }
    }

    /// Zero latency, infinite bandwidth.
    pub fn free(num_stages: usize) -> Self {
        Self::uniform(num_stages, 0.0, f64::INFINITY)
    }

    pub fn num_stages(&self) -> usize {
        self.assignment.len()
    }

    pub fn with_assignment(mut self, assignment: Vec<usize>) -> Result<Self> {
        self.assignment = assignment;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sites.len();
        if n == 0 {
            return Err(Error::config("network profile has no sites"));
        }
        for (name, m) in [("latency", &self.latency), ("bandwidth", &self.bandwidth)] {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::config(format!("{name} matrix must be {n}×{n}")));
            }
        }
        if self.latency.iter().flatten().any(|&l| !(l >= 0.0) || l.is_infinite()) {
            return Err(Error::config("latencies must be finite and nonnegative"));
        }
        if self.bandwidth.iter().flatten().any(|&b| !(b > 0.0)) {
            return Err(Error::config("bandwidths must be positive"));
        }
        if let Some(bad) = self.assignment.iter().find(|&&a| a >= n) {
            return Err(Error::config(format!("stage assigned to unknown site {bad}")));
        }
        if self.storage_site >= n {
            return Err(Error::config("storage site out of range"));
        }
        Ok(())
    }

    fn site(&self, stage: usize) -> usize {
        self.assignment[stage - 1]
    }

    /// Seconds to move `bytes` from `from` to `to` (site indices).
    pub fn transfer_between_sites(&self, from: usize, to: usize, bytes: f64) -> f64 {
        let bw = self.bandwidth[from][to];
        self.latency[from][to] + if bytes == 0.0 { 0.0 } else { bytes / bw }
    }

    /// Seconds to move `bytes` between the nodes of two stages (one-based).
    pub fn transfer(&self, from_stage: usize, to_stage: usize, bytes: f64) -> f64 {
        self.transfer_between_sites(self.site(from_stage), self.site(to_stage), bytes)
    }

    fn storage_transfer(&self, stage: usize, bytes: f64) -> f64 {
        self.transfer_between_sites(self.site(stage), self.storage_site, bytes)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{NET_MAGIC}\nsites {}\n", self.sites.join(" "));
        for m in [&self.latency, &self.bandwidth] {
            for row in m {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{}", cells.join(" "));
            }
        }
        out
    }

    /// Parses the site list and matrices; stages are assigned round-robin.
    pub fn parse(text: &str, path: &Path, num_stages: usize) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, NET_MAGIC)) => {}
            Some((n, other)) => return Err(perr(n, format!("expected `{NET_MAGIC}`, got `{other}`"))),
            None => return Err(perr(1, "empty network profile".into())),
        }
        let (n_line, site_line) = lines.next().ok_or_else(|| perr(2, "missing site list".into()))?;
        let mut words = site_line.split_whitespace();
        if words.next() != Some("sites") {
            return Err(perr(n_line, "expected `sites <name> …`".into()));
        }
        let sites: Vec<String> = words.map(str::to_string).collect();
        let n = sites.len();
        if n == 0 {
            return Err(perr(n_line, "site list is empty".into()));
        }
        let mut rows = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| perr(n_line, format!("expected {} matrix rows", 2 * n)))?;
            let row: std::result::Result<Vec<f64>, _> =
                l.split_whitespace().map(str::parse::<f64>).collect();
            let row = row.map_err(|e| perr(ln, format!("invalid number: {e}")))?;
            if row.len() != n {
                return Err(perr(ln, format!("expected {n} columns, got {}", row.len())));
            }
            rows.push(row);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "unexpected trailing content".into()));
        }
        let bandwidth = rows.split_off(n);
        let profile = Self {
            sites,
            latency: rows,
            bandwidth,
            assignment: (0..num_stages).map(|i| i % n).collect(),
            storage_site: 0,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path, num_stages: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path, num_stages)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointMode {
    /// Upload cost spread evenly over the iterations between snapshots.
    #[default]
    Amortized,
    /// Training pauses for the whole upload at every snapshot.
    Blocking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineTiming {
    /// Microbatches traverse the pipeline one after another.
    #[default]
    Sequential,
    /// `(M + s − 1)` slots of the slowest stage on the critical path.
    FillDrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub fwd_seconds_per_stage_per_microbatch: f64,
    pub bwd_seconds_per_stage_per_microbatch: f64,
    pub activation_bytes: f64,
    pub stage_weight_bytes: f64,
    /// Size of one edge layer (`E` or `E⁻¹`).
    pub edge_weight_bytes: f64,
    /// Weights plus optimizer state of the whole model.
    pub full_model_bytes: f64,
    pub num_microbatches: usize,
    pub checkpoint_mode: CheckpointMode,
    pub timing: PipelineTiming,
}

impl Default for CostParams {
    fn default() -> Self {
        Self::medium_calibrated()
    }
}

impl CostParams {
    /// Roughly a 500M-parameter, 6-stage model on the `geo5` profile: about 91 s per
    /// iteration without redundancy and about 1.65× that with redundant computation.
    ///
    /// Stage weights are 80M fp16 parameters; the full model with fp32 Adam moments
    /// is 500M × (2 + 8) bytes; a microbatch carries 1024 tokens of width 1024.
    pub fn medium_calibrated() -> Self {
        Self {
            fwd_seconds_per_stage_per_microbatch: 0.81,
            bwd_seconds_per_stage_per_microbatch: 0.81,
            activation_bytes: 1024.0 * 1024.0 * 2.0,
            stage_weight_bytes: 80e6 * 2.0,
            edge_weight_bytes: 25e6 * 2.0,
            full_model_bytes: 500e6 * 10.0,
            num_microbatches: 8,
            checkpoint_mode: CheckpointMode::Amortized,
            timing: PipelineTiming::Sequential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fwd_seconds_per_stage_per_microbatch;
        let b = self.bwd_seconds_per_stage_per_microbatch;
        if !(f > 0.0 && b > 0.0) {
            return Err(Error::config("compute times must be positive"));
        }
        if b < f {
            return Err(Error::config("backward time must be at least the forward time"));
        }
        for (name, v) in [
            ("activation_bytes", self.activation_bytes),
            ("stage_weight_bytes", self.stage_weight_bytes),
            ("edge_weight_bytes", self.edge_weight_bytes),
            ("full_model_bytes", self.full_model_bytes),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.num_microbatches == 0 {
            return Err(Error::config("num_microbatches must be positive"));
        }
        if self.edge_weight_bytes >= self.stage_weight_bytes {
            log::warn!(
                "edge layers ({} B) are not much smaller than a stage ({} B)",
                self.edge_weight_bytes,
                self.stage_weight_bytes
            );
        }
        Ok(())
    }
}

/// Seconds, by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub compute: f64,
    pub communication: f64,
    pub checkpoint_overhead: f64,
    pub recovery: f64,
    pub rollback_lost: f64,
}

impl TimeBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.communication + self.checkpoint_overhead + self.recovery + self.rollback_lost
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            compute: self.compute * factor,
            communication: self.communication * factor,
            checkpoint_overhead: self.checkpoint_overhead * factor,
            recovery: self.recovery * factor,
            rollback_lost: self.rollback_lost * factor,
        }
    }
}

/// Seconds to push one checkpoint, every stage uploading its share in parallel.
pub fn checkpoint_upload_seconds(profile: &NetworkProfile, params: &CostParams) -> f64 {
    let s = profile.num_stages();
    let share = params.full_model_bytes / s as f64;
    (1..=s)
        .map(|i| profile.storage_transfer(i, share))
        .fold(0.0, f64::max)
}

fn pipeline_cost(
    profile: &NetworkProfile,
    params: &CostParams,
    microbatches: f64,
    stage_compute: f64,
    activation_bytes: f64,
) -> (f64, f64) {
    let s = profile.num_stages();
    let boundary: Vec<f64> = (1..s)
        .map(|i| {
            profile.transfer(i, i + 1, activation_bytes) + profile.transfer(i + 1, i, activation_bytes)
        })
        .collect();
    match params.timing {
        PipelineTiming::Sequential => (
            microbatches * s as f64 * stage_compute,
            microbatches * boundary.iter().sum::<f64>(),
        ),
        PipelineTiming::FillDrain => {
            let slots = microbatches + s as f64 - 1.0;
            (
                slots * stage_compute,
                slots * boundary.iter().copied().fold(0.0, f64::max),
            )
        }
    }
}

/// Steady-state seconds per iteration, by category (recovery and rollback are zero).
pub fn iteration_breakdown(
    strategy: StrategyKind,
    profile: &NetworkProfile,
    params: &CostParams,
) -> TimeBreakdown {
    let s = profile.num_stages();
    let f = params.fwd_seconds_per_stage_per_microbatch;
    let b = params.bwd_seconds_per_stage_per_microbatch;
    let m = params.num_microbatches as f64;
    let mut out = TimeBreakdown::default();
    match strategy {
        StrategyKind::RedundantComputation => {
            // Half-size microbatches, twice as many, plus the next stage's forward.
            let (compute, comm) =
                pipeline_cost(profile, params, 2.0 * m, f / 2.0 + f / 2.0 + b / 2.0, params.activation_bytes / 2.0);
            // Every node receives the following stage's fresh weights.
            let refresh = (1..=s)
                .map(|i| profile.transfer(i % s + 1, i, params.stage_weight_bytes))
                .fold(0.0, f64::max);
            out.compute = compute;
            out.communication = comm + refresh;
        }
        _ => {
            let (compute, comm) = pipeline_cost(profile, params, m, f + b, params.activation_bytes);
            out.compute = compute;
            out.communication = comm;
        }
    }
    match strategy {
        StrategyKind::CheckFreePlus => {
            let e = params.edge_weight_bytes;
            out.communication += profile.transfer(1, 2, e).max(profile.transfer(s, s - 1, e));
        }
        StrategyKind::Checkpointing { interval_iters } => {
            if params.checkpoint_mode == CheckpointMode::Amortized {
                out.checkpoint_overhead =
                    checkpoint_upload_seconds(profile, params) / interval_iters as f64;
            }
        }
        _ => {}
    }
    out
}

pub fn iteration_time(strategy: StrategyKind, profile: &NetworkProfile, params: &CostParams) -> f64 {
    iteration_breakdown(strategy, profile, params).total()
}

/// Extra bytes moved per iteration purely for fault tolerance.
pub fn redundancy_bytes_per_iteration(
    strategy: StrategyKind,
    num_stages: usize,
    params: &CostParams,
) -> f64 {
    match strategy {
        StrategyKind::CheckFreePlus => 2.0 * params.edge_weight_bytes,
        StrategyKind::Checkpointing { interval_iters } => {
            params.full_model_bytes / interval_iters as f64
        }
        StrategyKind::RedundantComputation => num_stages as f64 * params.stage_weight_bytes,
        _ => 0.0,
    }
}

/// Seconds until the replacement for `failed_stage` (one-based) can train.
pub fn recovery_time(
    strategy: StrategyKind,
    profile: &NetworkProfile,
    params: &CostParams,
    failed_stage: usize,
) -> Result<f64> {
    let s = profile.num_stages();
    if failed_stage == 0 || failed_stage > s {
        return Err(Error::config(format!("stage {failed_stage} out of range 1..={s}")));
    }
    let i = failed_stage;
    let edge = i == 1 || i == s;
    let w = params.stage_weight_bytes;
    let unsupported = || Error::UnsupportedRecovery {
        kind: strategy.name(),
        stage: i,
        reason: "first and last stages have a single neighbor".into(),
    };
    Ok(match strategy {
        StrategyKind::NoFailures => 0.0,
        StrategyKind::Checkpointing { .. } => {
            profile.transfer_between_sites(profile.storage_site, profile.site(i), params.full_model_bytes)
        }
        StrategyKind::RedundantComputation => {
            let holder = crate::recovery::redundant_holder(i, s);
            let bytes = w + if edge { params.edge_weight_bytes } else { 0.0 };
            profile.transfer(holder, i, bytes)
        }
        StrategyKind::CheckFreePlus if edge => {
            let neighbor = if i == 1 { 2 } else { s - 1 };
            profile.transfer(neighbor, i, w + params.edge_weight_bytes)
        }
        _ if edge => return Err(unsupported()),
        StrategyKind::CheckFree | StrategyKind::CheckFreePlus | StrategyKind::ReinitUniformAvg => {
            // Weights plus one scalar gradient norm from each neighbor, in parallel.
            profile
                .transfer(i - 1, i, w + 8.0)
                .max(profile.transfer(i + 1, i, w + 8.0))
        }
        StrategyKind::ReinitCopy => profile.transfer(i - 1, i, w),
        StrategyKind::ReinitRandom => 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTime {
    pub hours: f64,
    pub breakdown: TimeBreakdown,
    /// Iterations executed, including those later rolled back.
    pub executed_iterations: u64,
    pub lost_iterations: u64,
    /// Failure boundaries that hit the run before the target was reached.
    pub recoveries: u64,
}

/// Wall-clock time to make `iterations_to_target` optimizer steps of progress while
/// the failures in `trace` strike.
///
/// Failures are indexed by executed iteration. Stages lost at the same boundary
/// recover in parallel. Under checkpointing, progress falls back to the last
/// multiple of the interval and the lost steps are re-executed.
pub fn train_time(
    iterations_to_target: u64,
    per_iteration: &TimeBreakdown,
    trace: &FailureTrace,
    strategy: StrategyKind,
    profile: &NetworkProfile,
    params: &CostParams,
) -> Result<TrainTime> {
    let iteration_seconds = per_iteration.total();
    let mut progress = 0u64;
    let mut tick = 0u64;
    let mut lost = 0u64;
    let mut recoveries = 0u64;
    let mut recovery = 0.0;

    let events = trace.events();
    let mut idx = 0;
    while idx < events.len() {
        let boundary = events[idx].iteration;
        let end = idx + events[idx..].partition_point(|e| e.iteration == boundary);
        if boundary >= tick {
            let advance = boundary - tick;
            if progress + advance >= iterations_to_target {
                break;
            }
            progress += advance;
            tick = boundary;
            let mut slowest: f64 = 0.0;
            for e in &events[idx..end] {
                slowest = slowest.max(recovery_time(strategy, profile, params, e.stage)?);
            }
            recovery += slowest;
            recoveries += 1;
            if let StrategyKind::Checkpointing { interval_iters } = strategy {
                let back = progress % interval_iters;
                progress -= back;
                lost += back;
            }
        }
        idx = end;
    }

    let mut breakdown = per_iteration.scaled(iterations_to_target as f64);
    breakdown.recovery = recovery;
    breakdown.rollback_lost = lost as f64 * iteration_seconds;
    if let StrategyKind::Checkpointing { interval_iters } = strategy {
        if params.checkpoint_mode == CheckpointMode::Blocking {
            let snapshots = iterations_to_target / interval_iters + 1;
            breakdown.checkpoint_overhead += snapshots as f64 * checkpoint_upload_seconds(profile, params);
        }
    }
    Ok(TrainTime {
        hours: breakdown.total() / 3600.0,
        breakdown,
        executed_iterations: iterations_to_target + lost,
        lost_iterations: lost,
        recoveries,
    })
}

//! Seeded whole-stage failure traces.
//!
//! A trace is generated once and shared by every strategy under comparison, so
//! it never depends on what a strategy does. An event `(k, i)` means stage `i`
//! is lost at the boundary before iteration `k` runs; the replacement node is
//! available for iteration `k` itself.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const TRACE_MAGIC: &str = "checkfree-trace";
const TRACE_VERSION: &str = "v1";

/// `1 − (1 − p_hour)^(iteration_seconds / 3600)`.
pub fn hourly_to_per_iteration(p_hour: f64, iteration_seconds: f64) -> f64 {
    assert!((0.0..1.0).contains(&p_hour), "p_hour must be in [0, 1)");
    assert!(iteration_seconds > 0.0, "iteration time must be positive");
    -((1.0 - p_hour).ln() * iteration_seconds / 3600.0).exp_m1()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRateSpec {
    pub p_hour: f64,
    /// One-based stage ids that may fail.
    pub eligible_stages: BTreeSet<usize>,
    pub seed: u64,
}

impl FailureRateSpec {
    pub fn new(p_hour: f64, eligible_stages: impl IntoIterator<Item = usize>, seed: u64) -> Result<Self> {
        let spec = Self {
            p_hour,
            eligible_stages: eligible_stages.into_iter().collect(),
            seed,
        };
        spec.validate(None)?;
        Ok(spec)
    }

    pub fn validate(&self, num_stages: Option<usize>) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_hour) {
            return Err(Error::Validation(format!(
                "failure probability {} must be in [0, 1)",
                self.p_hour
            )));
        }
        if self.eligible_stages.contains(&0) {
            return Err(Error::Validation("stage ids are 1-based".into()));
        }
        if let Some(s) = num_stages {
            if let Some(bad) = self.eligible_stages.iter().find(|&&i| i > s) {
                return Err(Error::Validation(format!(
                    "eligible stage {bad} exceeds stage count {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Stages that may fail under a given recovery capability.
pub fn eligible_stages(num_stages: usize, include_edges: bool) -> BTreeSet<usize> {
    if include_edges {
        (1..=num_stages).collect()
    } else {
        (2..num_stages).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FailureEvent {
    pub iteration: u64,
    /// One-based.
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub rates: FailureRateSpec,
    pub iteration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTrace {
    events: Vec<FailureEvent>,
    meta: TraceMeta,
}

/// Two adjacent stages dead at the same boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsecutiveFailure {
    pub iteration: u64,
    pub lower_stage: usize,
}

/// Each `(iteration, eligible stage)` fails independently with the per-iteration
/// probability, drawn from a hash of `(seed, iteration, stage)`.
pub fn generate_trace(
    rates: &FailureRateSpec,
    num_iterations: u64,
    iteration_seconds: f64,
) -> Result<FailureTrace> {
    rates.validate(None)?;
    if num_iterations == 0 {
        return Err(Error::config("trace needs at least one iteration"));
    }
    if !(iteration_seconds > 0.0 && iteration_seconds.is_finite()) {
        return Err(Error::config("iteration time must be positive"));
    }
    let p_iter = hourly_to_per_iteration(rates.p_hour, iteration_seconds);
    let mut events = Vec::new();
    if p_iter > 0.0 {
        for iteration in 0..num_iterations {
            for &stage in &rates.eligible_stages {
                if rng::counter_uniform(rates.seed, &[iteration, stage as u64]) < p_iter {
                    events.push(FailureEvent { iteration, stage });
                }
            }
        }
    }
    Ok(FailureTrace {
        events,
        meta: TraceMeta {
            rates: rates.clone(),
            iteration_seconds,
        },
    })
}

impl FailureTrace {
    /// Trace from a per-iteration probability. Stored as a one-hour iteration, where
    /// the hourly and per-iteration probabilities coincide.
    pub fn from_per_iteration(
        p_iter: f64,
        eligible_stages: impl IntoIterator<Item = usize>,
        seed: u64,
        num_iterations: u64,
    ) -> Result<Self> {
        let rates = FailureRateSpec::new(p_iter, eligible_stages, seed)?;
        generate_trace(&rates, num_iterations, 3600.0)
    }

    /// Trace with no events.
    pub fn empty(num_stages: usize) -> Self {
        Self {
            events: Vec::new(),
            meta: TraceMeta {
                rates: FailureRateSpec {
                    p_hour: 0.0,
                    eligible_stages: (1..=num_stages).collect(),
                    seed: 0,
                },
                iteration_seconds: 3600.0,
            },
        }
    }

    pub fn from_events(events: Vec<FailureEvent>, meta: TraceMeta) -> Result<Self> {
        let trace = Self { events, meta };
        trace.validate(None)?;
        Ok(trace)
    }

    pub fn events(&self) -> &[FailureEvent] {
        &self.events
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-iteration probability the trace was drawn with.
    pub fn p_iter(&self) -> f64 {
        hourly_to_per_iteration(self.meta.rates.p_hour, self.meta.iteration_seconds)
    }

    /// Events whose boundary is `iteration`.
    pub fn events_at(&self, iteration: u64) -> &[FailureEvent] {
        let lo = self.events.partition_point(|e| e.iteration < iteration);
        let hi = self.events.partition_point(|e| e.iteration <= iteration);
        &self.events[lo..hi]
    }

    /// Events before `iteration`.
    pub fn truncated(&self, iteration: u64) -> FailureTrace {
        let hi = self.events.partition_point(|e| e.iteration < iteration);
        Self {
            events: self.events[..hi].to_vec(),
            meta: self.meta.clone(),
        }
    }

    /// Adjacent stages dead at the same boundary; neighbor-based recovery cannot handle these.
    pub fn consecutive_failures(&self) -> Vec<ConsecutiveFailure> {
        let mut out = Vec::new();
        for w in self.events.windows(2) {
            if w[0].iteration == w[1].iteration && w[1].stage == w[0].stage + 1 {
                out.push(ConsecutiveFailure {
                    iteration: w[0].iteration,
                    lower_stage: w[0].stage,
                });
            }
        }
        out
    }

    pub fn has_consecutive_failures(&self) -> bool {
        !self.consecutive_failures().is_empty()
    }

    /// Checks ordering, uniqueness, 1-based ids and eligibility.
    pub fn validate(&self, num_stages: Option<usize>) -> Result<()> {
        self.meta.rates.validate(num_stages)?;
        for (i, e) in self.events.iter().enumerate() {
            if e.stage == 0 {
                return Err(Error::Validation(format!(
                    "event {} targets stage 0; stage ids are 1-based",
                    i + 1
                )));
            }
            if !self.meta.rates.eligible_stages.contains(&e.stage) {
                return Err(Error::Validation(format!(
                    "event {} targets stage {} outside the eligible set",
                    i + 1,
                    e.stage
                )));
            }
            if i > 0 && self.events[i - 1] >= *e {
                return Err(Error::Validation(format!(
                    "event {} ({},{}) is out of order or duplicated",
                    i + 1,
                    e.iteration,
                    e.stage
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self
            .meta
            .rates
            .eligible_stages
            .iter()
            .map(usize::to_string)
            .collect();
        let mut out = format!(
            "{TRACE_MAGIC} {TRACE_VERSION} seed={} p_hour={} iter_s={} stages={}\n",
            self.meta.rates.seed,
            self.meta.rates.p_hour,
            self.meta.iteration_seconds,
            stages.join(",")
        );
        for e in &self.events {
            let _ = writeln!(out, "{},{}", e.iteration, e.stage);
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "empty trace file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(TRACE_MAGIC) {
            return Err(perr(1, format!("expected `{TRACE_MAGIC}` header")));
        }
        match fields.next() {
            Some(TRACE_VERSION) => {}
            other => return Err(perr(1, format!("unsupported trace version {other:?}"))),
        }
        let (mut seed, mut p_hour, mut iter_s, mut stages) = (None, None, None, None);
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| perr(1, format!("malformed header field `{f}`")))?;
            let bad = |what: &str| perr(1, format!("invalid {what} `{v}`"));
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
                "p_hour" => p_hour = Some(v.parse::<f64>().map_err(|_| bad("p_hour"))?),
                "iter_s" => iter_s = Some(v.parse::<f64>().map_err(|_| bad("iter_s"))?),
                "stages" => {
                    let set: std::result::Result<BTreeSet<usize>, _> = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::parse::<usize>)
                        .collect();
                    stages = Some(set.map_err(|_| bad("stage list"))?);
                }
                _ => return Err(perr(1, format!("unknown header field `{k}`"))),
            }
        }
        let missing = |name: &str| perr(1, format!("header is missing `{name}`"));
        let meta = TraceMeta {
            rates: FailureRateSpec {
                p_hour: p_hour.ok_or_else(|| missing("p_hour"))?,
                eligible_stages: stages.ok_or_else(|| missing("stages"))?,
                seed: seed.ok_or_else(|| missing("seed"))?,
            },
            iteration_seconds: iter_s.ok_or_else(|| missing("iter_s"))?,
        };
        if !(meta.iteration_seconds > 0.0) {
            return Err(perr(1, "iter_s must be positive".into()));
        }

        let mut events = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let n = idx + 1;
            let (it, st) = line
                .split_once(',')
                .ok_or_else(|| perr(n, format!("expected `iter,stage`, got `{line}`")))?;
            let iteration = it
                .trim()
                .parse::<u64>()
                .map_err(|_| perr(n, format!("invalid iteration `{it}`")))?;
            let stage = st
                .trim()
                .parse::<usize>()
                .map_err(|_| perr(n, format!("invalid stage `{st}`")))?;
            events.push(FailureEvent { iteration, stage });
        }
        let trace = Self { events, meta };
        trace.validate(None)?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

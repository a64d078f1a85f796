//! Command-line driver: runs, strategy comparisons, trace generation and ablations.
//!
//! Exit codes: 0 on success, 1 on I/O or numeric errors, 2 on configuration or
//! usage errors, 3 when a run hit a failure its strategy could not recover.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use checkfree::failure::{self, FailureRateSpec, FailureTrace};
use checkfree::harness::{
    ablation_checkpoint_frequency, ablation_swap, compare_on_trace, delta_after_training,
    run_experiment, write_run, ExperimentConfig,
};
use checkfree::recovery::StrategyKind;
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNRECOVERABLE: i32 = 3;

/// Strategies `--strategies all` expands to.
const ALL_STRATEGIES: [&str; 4] = ["checkpointing", "redundant-computation", "checkfree", "checkfree-plus"];

#[derive(Debug, Parser)]
#[command(name = "checkfree", version, about = "Simulate stage-failure recovery in pipeline-parallel training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one strategy under failures and write its metrics.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Run several strategies against one trace and price them with the cost model.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated strategy names, or `all`.
        #[arg(long, default_value = "all")]
        strategies: String,
    },
    /// Write a failure trace.
    TraceGen(TraceGenArgs),
    /// Train without failures and measure how much dropping single layers perturbs the model.
    Delta {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 256)]
        probe_rows: usize,
    },
    /// Failure-free runs with the swapped schedule off and on.
    AblateSwap {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Checkpointing at several intervals against CheckFree+ on one trace.
    AblateCheckpointFreq {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [100u64, 50, 10])]
        intervals: Vec<u64>,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Failure trace file; replaces any rate in the config.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    p_hour: Option<f64>,
    #[arg(long)]
    p_iter: Option<f64>,
    /// Iteration time used to turn `--p-hour` into a per-iteration probability.
    #[arg(long)]
    iter_seconds: Option<f64>,
    #[arg(long)]
    iters: Option<u64>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    checkpoint_interval: u64,
    #[arg(long)]
    target_loss: Option<f64>,
    /// Output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TraceGenArgs {
    #[arg(long, conflicts_with = "p_iter", required_unless_present = "p_iter")]
    p_hour: Option<f64>,
    #[arg(long)]
    p_iter: Option<f64>,
    #[arg(long)]
    iters: u64,
    #[arg(long, default_value_t = checkfree::harness::REFERENCE_ITERATION_SECONDS)]
    iter_seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    /// Only intermediate stages fail.
    #[arg(long)]
    interior_only: bool,
    /// Trace file; printed to stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> i32 {
    use checkfree::Error;
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Usage(_) | Error::Parse { .. } | Error::Validation(_)) => EXIT_CONFIG,
        Some(Error::Unrecoverable { .. } | Error::UnsupportedRecovery { .. }) => EXIT_UNRECOVERABLE,
        _ => EXIT_ERROR,
    }
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Run { common, strategy } => {
            let mut config = common.resolve()?;
            if let Some(name) = strategy {
                config.strategy.kind = StrategyKind::parse(&name, common.checkpoint_interval)?;
            }
            config.validate()?;
            cmd_run(&config)
        }
        Command::Compare { common, strategies } => {
            let config = common.resolve()?;
            let kinds = parse_strategies(&strategies, common.checkpoint_interval)?;
            cmd_compare(&config, &kinds)
        }
        Command::TraceGen(args) => cmd_trace_gen(&args),
        Command::Delta { common, probe_rows } => {
            let config = common.resolve()?;
            cmd_delta(&config, probe_rows)
        }
        Command::AblateSwap { common } => {
            let config = common.resolve()?;
            cmd_ablate_swap(&config)
        }
        Command::AblateCheckpointFreq { common, intervals } => {
            let config = common.resolve()?;
            cmd_ablate_checkpoint_freq(&config, &intervals)
        }
    }
}

impl CommonArgs {
    /// Loads the config file (or defaults) and applies the flag overrides.
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let f = &mut config.failures;
        if let Some(path) = &self.trace {
            f.trace = Some(path.clone());
            f.p_hour = None;
            f.p_iter = None;
        }
        if let Some(p) = self.p_hour {
            f.p_hour = Some(p);
            f.p_iter = None;
            f.trace = None;
        }
        if let Some(p) = self.p_iter {
            f.p_iter = Some(p);
            f.p_hour = None;
            f.trace = None;
        }
        if let Some(s) = self.iter_seconds {
            f.iteration_seconds = s;
        }
        if let Some(n) = self.iters {
            config.training.total_iterations = n;
        }
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(t) = self.target_loss {
            config.training.target_loss = Some(t);
        }
        if let Some(dir) = &self.output {
            config.output_dir = Some(dir.clone());
        }
        Ok(config)
    }
}

fn parse_strategies(list: &str, checkpoint_interval: u64) -> checkfree::Result<Vec<StrategyKind>> {
    let names: Vec<&str> = if list.trim() == "all" {
        ALL_STRATEGIES.to_vec()
    } else {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    };
    if names.is_empty() {
        return Err(checkfree::Error::config("no strategies given"));
    }
    names
        .into_iter()
        .map(|n| StrategyKind::parse(n, checkpoint_interval))
        .collect()
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_run(config: &ExperimentConfig) -> anyhow::Result<i32> {
    let mut code = EXIT_OK;
    for &seed in &config.seeds {
        let record = run_experiment(config, seed)?;
        let s = &record.summary;
        match &config.output_dir {
            Some(dir) => {
                let dir = if config.seeds.len() > 1 {
                    dir.join(format!("seed-{seed}"))
                } else {
                    dir.clone()
                };
                write_run(config, &record, &dir)?;
                log::info!("wrote run records to {}", dir.display());
            }
            None => println!("{}", record.summary_json()?),
        }
        eprintln!(
            "{} seed {seed}: {} iterations, final val loss {:.6}, {} failures, {:.2} h",
            s.strategy, s.iterations_run, s.final_val_loss, s.failures, s.total_hours
        );
        if s.unrecoverable {
            eprintln!(
                "run aborted: {}",
                s.unrecoverable_reason.as_deref().unwrap_or("unrecoverable failure")
            );
            code = EXIT_UNRECOVERABLE;
        }
    }
    Ok(code)
}

fn cmd_compare(config: &ExperimentConfig, kinds: &[StrategyKind]) -> anyhow::Result<i32> {
    for &seed in &config.seeds {
        let mut trace_cfg = config.clone();
        // Edge failures stay in the trace so every strategy faces the same events.
        if trace_cfg.failures.include_edges.is_none() {
            trace_cfg.failures.include_edges = Some(kinds.iter().any(|k| k.recovers_edges()));
        }
        let trace = trace_cfg.with_strategy(StrategyKind::NoFailures).failure_trace(seed)?;
        let table = compare_on_trace(config, kinds, &trace, seed)?;
        println!("seed {seed}, {} failure events", trace.len());
        print!("{}", table.render());
        if let Some(dir) = &config.output_dir {
            let dir = dir.join(format!("seed-{seed}"));
            write_file(&dir.join("comparison.csv"), &table.to_csv()?)?;
            write_file(&dir.join("comparison.json"), &serde_json::to_string_pretty(&table)?)?;
            write_file(&dir.join("trace.txt"), &trace.to_text())?;
            for (kind, record) in kinds.iter().zip(&table.records) {
                record.write(&dir.join(kind.name()))?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn cmd_trace_gen(args: &TraceGenArgs) -> anyhow::Result<i32> {
    let eligible = failure::eligible_stages(args.stages, !args.interior_only);
    let trace = match (args.p_hour, args.p_iter) {
        (Some(p), None) => {
            let rates = FailureRateSpec::new(p, eligible, args.seed)?;
            failure::generate_trace(&rates, args.iters, args.iter_seconds)?
        }
        (None, Some(p)) => FailureTrace::from_per_iteration(p, eligible, args.seed, args.iters)?,
        _ => unreachable!("clap enforces exactly one rate"),
    };
    match &args.output {
        Some(path) => {
            write_file(path, &trace.to_text())?;
            eprintln!(
                "{} events over {} iterations (p_iter {:.6}) written to {}",
                trace.len(),
                args.iters,
                trace.p_iter(),
                path.display()
            );
        }
        None => print!("{}", trace.to_text()),
    }
    Ok(EXIT_OK)
}

fn cmd_delta(config: &ExperimentConfig, probe_rows: usize) -> anyhow::Result<i32> {
    for &seed in &config.seeds {
        let report = delta_after_training(config, seed, probe_rows)?;
        let mut out = format!("seed {seed}\n{:>6} {:>12} {:>12}\n", "layer", "param", "function");
        for e in &report.estimates {
            let layers: Vec<String> = e.omitted.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{:>6} {:>12.6} {:>12.6}", layers.join("+"), e.param_ratio, e.function_ratio);
        }
        let _ = writeln!(out, "{:>6} {:>12.6} {:>12.6}", "max", report.delta_param, report.delta_function);
        print!("{out}");
        if let Some(dir) = &config.output_dir {
            write_file(
                &dir.join(format!("delta-seed-{seed}.json")),
                &serde_json::to_string_pretty(&report)?,
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_ablate_swap(config: &ExperimentConfig) -> anyhow::Result<i32> {
    let opt = |v: Option<u64>| v.map_or("n/a".to_string(), |v| v.to_string());
    for &seed in &config.seeds {
        let a = ablation_swap(config, seed)?;
        println!(
            "seed {seed}: final val loss off {:.6} on {:.6}; |W_S1 - W_S2| off {:.4} on {:.4}",
            a.off.summary.final_val_loss,
            a.on.summary.final_val_loss,
            a.edge_distance_off,
            a.edge_distance_on
        );
        println!("{:>12} {:>10} {:>10}", "milestone", "off", "on");
        for m in &a.milestones {
            println!("{:>12.6} {:>10} {:>10}", m.loss, opt(m.off_iter), opt(m.on_iter));
        }
        if let Some(dir) = &config.output_dir {
            let dir = dir.join(format!("seed-{seed}"));
            a.off.write(&dir.join("swap-off"))?;
            a.on.write(&dir.join("swap-on"))?;
            write_file(&dir.join("milestones.json"), &serde_json::to_string_pretty(&a.milestones)?)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_ablate_checkpoint_freq(config: &ExperimentConfig, intervals: &[u64]) -> anyhow::Result<i32> {
    for &seed in &config.seeds {
        let mut trace_cfg = config.with_strategy(StrategyKind::CheckFreePlus);
        trace_cfg.failures.include_edges.get_or_insert(true);
        let trace = trace_cfg.failure_trace(seed)?;
        let ablation = ablation_checkpoint_frequency(config, seed, intervals, &trace)?;
        println!("seed {seed}, target validation loss {:.6}", ablation.target_loss);
        for row in &ablation.rows {
            let label = match row.interval {
                Some(i) => format!("{} every {i}", row.strategy),
                None => row.strategy.clone(),
            };
            let iters = match (row.unrecoverable, row.iterations_to_target) {
                (true, _) => "aborted".to_string(),
                (false, Some(n)) => n.to_string(),
                (false, None) => "n/a".to_string(),
            };
            println!("{label:<28} {iters:>10}");
        }
        if let Some(dir) = &config.output_dir {
            write_file(
                &dir.join(format!("checkpoint-freq-seed-{seed}.json")),
                &serde_json::to_string_pretty(&ablation)?,
            )?;
        }
    }
    Ok(EXIT_OK)
}

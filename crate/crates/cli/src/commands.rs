use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use scout_core::agent::{
    run_exploration, ConfigError, RawConfig, RunConfig, RunLog, RunOptions, RunSummary,
};
use scout_core::envs::Env;
use scout_core::export::{
    aggregate, read_buffer_edges, write_aggregate_csv,
    write_buffer_ndjson, write_heatmap_csv, write_metrics_csv, write_representation_csv,
    write_transitions_csv,
};
use scout_core::metrics::{compute_coverage, heatmap};
use scout_core::nets::{load_checkpoint, save_checkpoint};

use crate::{Command, ExportKind, RunArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_FILE: &str = "runlog.ndjson";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const BUFFER_FILE: &str = "buffer.ndjson";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "plan_trace.ndjson";
pub const REPRESENTATION_FILE: &str = "representation.csv";
pub const TRANSITIONS_FILE: &str = "transitions.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub enum Failure {
    /// Bad invocation: exit code 2.
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            run,
            seed,
            plan_trace,
        } => {
            let config = resolve(&run, seed)?;
            run_into(&config, &run.out, plan_trace)?;
            Ok(())
        }
        Command::Sweep { run, seed, seeds } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be at least 1".into()));
            }
            let base = resolve(&run, Some(seed))?;
            sweep(&base, seeds, &run.out)?;
            Ok(())
        }
        Command::Metrics { run, out } => {
            let out = out.unwrap_or_else(|| run.join(METRICS_FILE));
            replay_metrics(&run, &out)?;
            Ok(())
        }
        Command::Export { run, what, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            export(&run, what, &out)?;
            Ok(())
        }
    }
}

/// Config file (if any) with command-line overrides applied. A missing or
/// invalid config is a usage error.
fn resolve(args: &RunArgs, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut raw = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            RawConfig::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => RawConfig::default(),
    };
    if args.env.is_some() {
        raw.env = args.env;
    }
    if args.policy.is_some() {
        raw.policy = args.policy;
    }
    if args.depth.is_some() {
        raw.depth = args.depth;
    }
    if seed.is_some() {
        raw.seed = seed;
    }
    raw.resolve().map_err(|e: ConfigError| Failure::Usage(e.to_string()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Runs one episode and writes every artifact into `dir`.
pub fn run_into(config: &RunConfig, dir: &Path, plan_trace: bool) -> anyhow::Result<RunSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), config.to_json() + "\n")?;
    log::info!(
        "{} / {} seed {}: up to {} steps",
        config.env,
        config.policy,
        config.seed,
        config.n_max
    );
    let mut trace = if plan_trace {
        Some(create(&dir.join(TRACE_FILE))?)
    } else {
        None
    };
    let options = RunOptions {
        plan_trace: trace.as_mut().map(|w| w as &mut dyn Write),
        ..RunOptions::default()
    };
    let result = run_exploration(config, options);
    if let Some(mut w) = trace {
        w.flush()?;
    }
    let out = match result {
        Ok(out) => out,
        Err(abort) => {
            // keep the partial log for inspection
            abort.log.write_ndjson(create(&dir.join(LOG_FILE))?)?;
            bail!(abort);
        }
    };
    out.log.write_ndjson(create(&dir.join(LOG_FILE))?)?;
    write_metrics_csv(&out.log, create(&dir.join(METRICS_FILE))?)?;
    let mut summary = serde_json::to_string_pretty(&out.summary)?;
    summary.push('\n');
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    let env = Env::new(config.env);
    write_heatmap_csv(&heatmap(&env, &out.log.arrivals()), create(&dir.join(HEATMAP_FILE))?)?;
    write_buffer_ndjson(&out.buffer, out.params.as_ref(), create(&dir.join(BUFFER_FILE))?)?;
    if let Some(params) = &out.params {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), params)?;
    }
    log::info!(
        "seed {}: {} steps, coverage {:.3}, goal {:?}",
        config.seed,
        out.summary.steps,
        out.summary.coverage_fraction,
        out.summary.steps_to_goal
    );
    Ok(out.summary)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn sweep(base: &RunConfig, seeds: u64, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let configs: Vec<RunConfig> = (0..seeds)
        .map(|i| RunConfig {
            seed: base.seed + i,
            ..base.clone()
        })
        .collect();
    let results: Vec<anyhow::Result<RunSummary>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || run_into(c, &seed_dir(out, c.seed), false)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("run panicked"))))
            .collect()
    });
    let mut summaries = Vec::new();
    for (c, r) in configs.iter().zip(results) {
        summaries.push(r.with_context(|| format!("seed {}", c.seed))?);
    }
    write_aggregate_csv(&aggregate(&summaries), create(&out.join(AGGREGATE_FILE))?)?;
    Ok(())
}

fn load_run(dir: &Path) -> anyhow::Result<(RunConfig, RunLog)> {
    let config = scout_core::agent::parse_config(&dir.join(CONFIG_FILE))?;
    let path = dir.join(LOG_FILE);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let log = RunLog::read_ndjson(BufReader::new(f))?;
    Ok((config, log))
}

/// Recomputes coverage from the logged trajectory and writes the metrics
/// CSV. Fails if the recomputed values disagree with the logged ones.
fn replay_metrics(dir: &Path, out: &Path) -> anyhow::Result<()> {
    let (config, log) = load_run(dir)?;
    let env = Env::new(config.env);
    let mean_r_intr: Vec<f64> = log.steps.iter().map(|s| s.mean_r_intr).collect();
    let metrics = compute_coverage(&env, &log.arrivals(), &mean_r_intr);
    for (s, m) in log.steps.iter().zip(&metrics) {
        if s.unique_visited != m.unique_visited
            || s.coverage_fraction != m.coverage_fraction
            || s.visited_once_fraction != m.visited_once_fraction
        {
            bail!("step {}: logged coverage differs from the replay", s.t);
        }
    }
    write_metrics_csv(&log, create(out)?)?;
    if let Some(last) = metrics.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn export(dir: &Path, what: ExportKind, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let (config, log) = load_run(dir)?;
    let env = Env::new(config.env);
    if matches!(what, ExportKind::Heatmap | ExportKind::All) {
        write_heatmap_csv(&heatmap(&env, &log.arrivals()), create(&out.join(HEATMAP_FILE))?)?;
    }
    if matches!(what, ExportKind::Representation | ExportKind::All) {
        let ckpt = dir.join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            if what == ExportKind::All {
                return Ok(());
            }
            bail!("{} has no model checkpoint ({} policy)", dir.display(), config.policy);
        }
        let params = load_checkpoint(&ckpt)?;
        let f = File::open(dir.join(BUFFER_FILE)).context("opening buffer dump")?;
        let edges = read_buffer_edges(BufReader::new(f))?;
        let states = edges.iter().flat_map(|e| [e.state, e.next_state]).collect();
        write_representation_csv(&env, &params, &states, create(&out.join(REPRESENTATION_FILE))?)?;
        write_transitions_csv(&edges, create(&out.join(TRANSITIONS_FILE))?)?;
    }
    Ok(())
}

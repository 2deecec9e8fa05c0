//! Experiment runner: single runs, failure sweeps, and cross-run
//! verification.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{FileStore, MemoryStore};
use crate::config::{FailureSpec, RunConfig};
use crate::error::{ConfigError, RunError};
use crate::metrics::{metric_hex, Metrics, CSV_HEADER};
use crate::sim::{Hooks, Observations, World};

/// Everything observable about one completed run.
#[derive(Debug)]
pub struct RunReport {
    pub config: RunConfig,
    pub metrics: Metrics,
    pub final_metric_bits: u64,
    pub obs: Observations,
    pub trace_jsonl: String,
}

#[derive(Debug, Default, Clone)]
pub struct RunOptions {
    /// When set, the run writes `config.json`, `metrics.csv`,
    /// `trace.jsonl`, and checkpoints under this directory.
    pub out_dir: Option<PathBuf>,
    /// Capture the event trace (implied by `out_dir`).
    pub trace: bool,
    pub hooks: Hooks,
}

/// Runs one configuration in memory with tracing enabled.
pub fn run(config: &RunConfig) -> Result<RunReport, RunError> {
    run_with(
        config,
        RunOptions {
            trace: true,
            ..RunOptions::default()
        },
    )
}

pub fn run_with(config: &RunConfig, opts: RunOptions) -> Result<RunReport, RunError> {
    config.validate()?;
    let trace_enabled = opts.trace || opts.out_dir.is_some();
    let mut world = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let store = FileStore::new(&dir.join("ckpt"), config.kernel.name())?;
            World::new(config.clone(), Box::new(store), trace_enabled)
        }
        None => World::new(
            config.clone(),
            Box::new(MemoryStore::default()),
            trace_enabled,
        ),
    };
    world.set_hooks(opts.hooks);
    world.run_to_completion()?;
    let metric = world.final_metric()?;
    let metrics = build_metrics(config, &world.obs, metric);
    let trace_jsonl = world.trace.to_jsonl();
    if let Some(dir) = &opts.out_dir {
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?.as_bytes())?;
        fs::write(
            dir.join("metrics.csv"),
            format!("{CSV_HEADER}\n{}\n", metrics.csv_row()),
        )?;
        fs::write(dir.join("trace.jsonl"), trace_jsonl.as_bytes())?;
    }
    Ok(RunReport {
        config: config.clone(),
        metrics,
        final_metric_bits: metric.to_bits(),
        obs: world.obs,
        trace_jsonl,
    })
}

fn build_metrics(config: &RunConfig, obs: &Observations, metric: f64) -> Metrics {
    let join = |f: &dyn Fn(&FailureSpec) -> String| -> String {
        if config.failures.is_empty() {
            "none".to_string()
        } else {
            config
                .failures
                .iter()
                .map(f)
                .collect::<Vec<_>>()
                .join(";")
        }
    };
    Metrics {
        run_id: config.run_id(),
        kernel: config.kernel.name().to_string(),
        n_procs: config.procs,
        cp_int: config.cp_int,
        log_size: config.log_size,
        fail_rank: join(&|s| s.rank.to_string()),
        fail_iter: join(&|s| s.iter.to_string()),
        fail_phase: join(&|s| s.phase.to_string()),
        mode_taken: if obs.modes.is_empty() {
            "none".to_string()
        } else {
            obs.modes
                .iter()
                .map(|m| m.name().to_string())
                .collect::<Vec<_>>()
                .join(";")
        },
        recompute_iters_total: obs.recompute_total,
        recompute_iters_failed_rank: obs.recompute_failed,
        replayed_msgs: obs.replayed_msgs,
        payload_bytes_peak: obs.payload_bytes_peak.iter().copied().max().unwrap_or(0),
        final_metric_hex: metric_hex(metric),
    }
}

/// One failure point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub spec: FailureSpec,
}

/// Sweep template: one run per (failure iteration, kill point) pair for a
/// fixed victim rank.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    /// Base configuration; its failure list must be empty.
    pub base: RunConfig,
    pub fail_rank: usize,
    pub fail_iters: Vec<u64>,
    pub fail_phases: Vec<u8>,
}

impl SweepSpec {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut pts = Vec::new();
        for &iter in &self.fail_iters {
            for &phase in &self.fail_phases {
                pts.push(SweepPoint {
                    spec: FailureSpec {
                        rank: self.fail_rank,
                        iter,
                        phase,
                    },
                });
            }
        }
        pts
    }
}

/// Runs every sweep point (in parallel, each with its own world) and
/// returns the reports in deterministic point order.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<RunReport>, RunError> {
    if !spec.base.failures.is_empty() {
        return Err(
            ConfigError::Invalid("sweep base config must not carry failures".into()).into(),
        );
    }
    let points = spec.points();
    let results: Vec<Result<RunReport, RunError>> = points
        .par_iter()
        .map(|pt| {
            let mut cfg = spec.base.clone();
            cfg.failures = vec![pt.spec];
            run_with(&cfg, RunOptions::default())
        })
        .collect();
    results.into_iter().collect()
}

pub fn sweep_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.metrics.csv_row());
        out.push('\n');
    }
    out
}

/// Compares the final verification values of two completed run
/// directories. Both runs must have used the same kernel, seed, problem
/// size, process count, and iteration count.
pub fn verify(dir_a: &Path, dir_b: &Path) -> Result<bool, RunError> {
    let cfg_a = load_config(dir_a)?;
    let cfg_b = load_config(dir_b)?;
    let same = |x: bool, what: &str| -> Result<(), RunError> {
        if x {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("runs differ in {what}; not comparable")).into())
        }
    };
    same(cfg_a.kernel == cfg_b.kernel, "kernel")?;
    same(cfg_a.seed == cfg_b.seed, "seed")?;
    same(cfg_a.procs == cfg_b.procs, "procs")?;
    same(cfg_a.iters == cfg_b.iters, "iters")?;
    same(cfg_a.resolved_size() == cfg_b.resolved_size(), "size")?;
    let hex_a = load_metric_hex(dir_a)?;
    let hex_b = load_metric_hex(dir_b)?;
    Ok(hex_a == hex_b)
}

fn load_config(dir: &Path) -> Result<RunConfig, RunError> {
    let raw = fs::read_to_string(dir.join("config.json"))?;
    serde_json::from_str(&raw)
        .map_err(|e| ConfigError::Invalid(format!("bad config.json in {dir:?}: {e}")).into())
}

fn load_metric_hex(dir: &Path) -> Result<String, RunError> {
    let raw = fs::read_to_string(dir.join("metrics.csv"))?;
    let header_cols: Vec<&str> = CSV_HEADER.split(',').collect();
    let idx = header_cols
        .iter()
        .position(|c| *c == "final_metric_hex")
        .expect("schema has final_metric_hex");
    let row = raw
        .lines()
        .nth(1)
        .ok_or_else(|| ConfigError::Invalid(format!("no metrics row in {dir:?}")))?;
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != header_cols.len() {
        return Err(ConfigError::Invalid(format!("malformed metrics row in {dir:?}")).into());
    }
    Ok(cols[idx].to_string())
}

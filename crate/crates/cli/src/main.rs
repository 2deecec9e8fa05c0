//! Command-line experiment runner for the message-logging rollback
//! simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 i/o error,
//! 4 verification mismatch, 5 protocol bug (missing log entry).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlsim_core::harness::{self, RunOptions, SweepSpec};
use mlsim_core::{FailureSpec, KernelKind, RollbackPolicy, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "mlsim", version, about = "Message-logging local-rollback simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Kernel: cg | stencil
    #[arg(long, default_value = "cg")]
    kernel: String,
    /// Virtual process count (cg: square power-of-two grid; stencil: cube)
    #[arg(long, default_value_t = 16)]
    procs: usize,
    /// Total iterations
    #[arg(long, default_value_t = 50)]
    iters: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Checkpoint interval (iterations)
    #[arg(long)]
    cp_int: Option<u64>,
    /// Payload log capacity (iterations)
    #[arg(long)]
    log_size: Option<u64>,
    /// Rollback mode: local | global | hybrid
    #[arg(long, default_value = "hybrid")]
    mode: String,
    /// Problem size: matrix dimension (cg) or cells per rank side (stencil)
    #[arg(long)]
    size: Option<usize>,
    /// Load the run configuration from a JSON file (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self, matches: &clap::ArgMatches) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let raw = fs::read_to_string(path)?;
                serde_json::from_str::<RunConfig>(&raw)?
            }
            None => RunConfig::new(self.kernel.parse::<KernelKind>()?, self.procs, self.iters),
        };
        let explicit = |id: &str| matches.value_source(id) == Some(clap::parser::ValueSource::CommandLine);
        if self.config.is_none() || explicit("kernel") {
            cfg.kernel = self.kernel.parse::<KernelKind>()?;
        }
        if self.config.is_none() || explicit("procs") {
            cfg.procs = self.procs;
        }
        if self.config.is_none() || explicit("iters") {
            cfg.iters = self.iters;
        }
        if self.config.is_none() || explicit("seed") {
            cfg.seed = self.seed;
        }
        if let Some(v) = self.cp_int {
            cfg.cp_int = v;
        }
        if let Some(v) = self.log_size {
            cfg.log_size = v;
        }
        if self.config.is_none() || explicit("mode") {
            cfg.mode = self.mode.parse::<RollbackPolicy>()?;
        }
        if let Some(v) = self.size {
            cfg.size = Some(v);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write metrics, trace, and checkpoints
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fail-stop injection `rank:iter:phase` (repeatable)
        #[arg(long = "fail")]
        failures: Vec<String>,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one failure per (iteration, kill point) pair and aggregate a CSV
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Victim rank
        #[arg(long, default_value_t = 0)]
        fail_rank: usize,
        /// Failure iterations `lo..=hi` (defaults to the interval after
        /// the first checkpoint)
        #[arg(long)]
        fail_iters: Option<String>,
        /// Kill points (defaults to all of them)
        #[arg(long)]
        fail_phases: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare the final verification values of two run directories
    Verify { dir_a: PathBuf, dir_b: PathBuf },
}

fn parse_range(s: &str) -> anyhow::Result<Vec<u64>> {
    let (lo, hi) = s
        .split_once("..=")
        .ok_or_else(|| anyhow::anyhow!("range must be lo..=hi, got '{s}'"))?;
    let lo: u64 = lo.trim().parse()?;
    let hi: u64 = hi.trim().parse()?;
    if lo > hi {
        anyhow::bail!("empty range '{s}'");
    }
    Ok((lo..=hi).collect())
}

fn exit_code_for(err: &RunError) -> u8 {
    match err {
        RunError::Config(_) => 2,
        RunError::Io(_) | RunError::Checkpoint(_) => 3,
        RunError::Verification(_) => 4,
        RunError::Protocol(_) => 5,
    }
}

fn main() -> ExitCode {
    let matches = <Cli as clap::CommandFactory>::command().get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run_command(cli, &matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<RunError>()
                .map(exit_code_for)
                .unwrap_or(2);
            ExitCode::from(code)
        }
    }
}

fn run_command(cli: Cli, matches: &clap::ArgMatches) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            failures,
            out,
        } => {
            let sub = matches.subcommand_matches("run").expect("run matches");
            let mut cfg = config.build(sub)?;
            for f in &failures {
                cfg.failures.push(f.parse::<FailureSpec>()?);
            }
            let report = harness::run_with(
                &cfg,
                RunOptions {
                    out_dir: Some(out.clone()),
                    trace: true,
                    ..RunOptions::default()
                },
            )?;
            println!(
                "run {}: kernel={} procs={} iters={} mode_taken={} recompute={} replayed={} work_units={} metric={} ({})",
                report.metrics.run_id,
                report.metrics.kernel,
                report.metrics.n_procs,
                cfg.iters,
                report.metrics.mode_taken,
                report.metrics.recompute_iters_total,
                report.metrics.replayed_msgs,
                report.obs.work_units,
                report.metrics.final_metric(),
                report.metrics.final_metric_hex,
            );
            println!("outputs in {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            fail_rank,
            fail_iters,
            fail_phases,
            out,
        } => {
            let sub = matches.subcommand_matches("sweep").expect("sweep matches");
            let base = config.build(sub)?;
            base.validate().map_err(RunError::Config)?;
            let fail_iters = match fail_iters {
                Some(s) => parse_range(&s)?,
                None => (base.cp_int + 1..=base.cp_int * 2).collect(),
            };
            let max_phase = mlsim_core::kernels::comm_phase_count(base.kernel) as u8;
            let fail_phases = match fail_phases {
                Some(s) => parse_range(&s)?.into_iter().map(|v| v as u8).collect(),
                None => (0..=max_phase).collect(),
            };
            let spec = SweepSpec {
                base,
                fail_rank,
                fail_iters,
                fail_phases,
            };
            let reports = harness::sweep(&spec)?;
            fs::create_dir_all(&out)?;
            let csv = harness::sweep_csv(&reports);
            let path = out.join("sweep.csv");
            fs::write(&path, csv.as_bytes())?;
            let local = reports
                .iter()
                .filter(|r| r.metrics.mode_taken == "local")
                .count();
            println!(
                "sweep: {} runs ({} local, {} global) -> {}",
                reports.len(),
                local,
                reports.len() - local,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { dir_a, dir_b } => {
            let same = harness::verify(&dir_a, &dir_b)?;
            if same {
                println!("verification OK: final metrics are bitwise-identical");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verification FAILED: final metrics differ");
                Ok(ExitCode::from(4))
            }
        }
    }
}

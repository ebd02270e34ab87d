//! `streamplan`: plan, simulate and compare weight-streaming schedules.
//!
//! Exit codes: 0 success, 1 input error, 2 supplied plan violates constraints.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{ConstraintFailure, GenerateArgs, GraphKind};
use config::{RunConfig, SolverChoice, StrategyName};

#[derive(Parser)]
#[command(name = "streamplan", version, about = "Overlap plans for streaming model weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for an overlap plan and write plan.json.
    Plan,
    /// Replay a plan or baseline strategy; writes report.json and timeline CSVs.
    Simulate,
    /// Run every strategy plus a preload-ratio sweep; writes compare.csv.
    Compare,
    /// Run a manifest of models back to back; writes workload.json.
    Workload,
    /// Fit a latency model from a profiling CSV.
    Fit,
    /// Print the resolved settings as TOML, usable as a `--config` file.
    Config,
    /// Write a synthetic graph to graph.json.
    Generate {
        #[arg(long, value_enum, default_value = "transformer")]
        kind: GraphKind,
        /// Blocks, stages or layers, depending on the kind.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        weight_bytes: Option<u64>,
        #[arg(long)]
        activation_bytes: Option<u64>,
    },
}

/// Every flag overrides the matching key of `--config`.
#[derive(Args, Default)]
struct Flags {
    /// TOML or JSON file with any of the settings below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    #[arg(long, global = true)]
    latency_model: Option<PathBuf>,
    #[arg(long, global = true)]
    hardware: Option<PathBuf>,
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Profiling CSV for `fit`.
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Workload manifest for `workload`.
    #[arg(long, global = true)]
    workload: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Peak bytes streamed per layer.
    #[arg(long, global = true)]
    m_peak: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    solver: Option<SolverChoice>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    soft_factor: Option<f64>,
    /// Solver time limit in seconds.
    #[arg(long, global = true)]
    time_limit: Option<f64>,
    #[arg(long, global = true)]
    oracle_bound: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    max_rounds: Option<usize>,
    /// Disable adaptive fusion.
    #[arg(long, global = true)]
    no_fusion: bool,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyName>,
    /// Comma-separated preload ratios for `compare`.
    #[arg(long, global = true, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Also write an SVG memory timeline.
    #[arg(long, global = true)]
    svg: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Flags {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        macro_rules! take_opt {
            ($($f:ident),*) => { $( if self.$f.is_some() { c.$f = self.$f; } )* };
        }
        take_opt!(graph, latency_model, hardware, plan, profile, workload);
        take!(out, m_peak, lambda, solver, window, soft_factor, time_limit, oracle_bound);
        take!(alpha, max_rounds, strategy, ratios, seed);
        if self.no_fusion {
            c.fusion = false;
        }
        if self.svg {
            c.svg = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.flags.resolve()?;
    match cli.command {
        Command::Plan => commands::cmd_plan(&cfg),
        Command::Simulate => commands::cmd_simulate(&cfg),
        Command::Compare => commands::cmd_compare(&cfg),
        Command::Workload => commands::cmd_workload(&cfg),
        Command::Fit => commands::cmd_fit(&cfg),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Generate {
            kind,
            size,
            weight_bytes,
            activation_bytes,
        } => commands::cmd_generate(
            &cfg,
            &GenerateArgs {
                kind,
                size,
                weight_bytes,
                activation_bytes,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(v) = e.downcast_ref::<ConstraintFailure>() {
                eprintln!("error: {v}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

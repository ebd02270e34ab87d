use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use streamplan::capacity::{
    capacity_profile, fit_model_with_summary, read_profile_csv, LatencyModel,
    ThresholdConfig,
};
use streamplan::fixtures::{conv_chain, over_fused, random_graph, t1, transformer, TransformerSpec};
use streamplan::fusion::{adaptive_fusion, SolveSetup};
use streamplan::graph::{load_model, ModelGraph};
use streamplan::simulator::{
    break_even_iterations, normalize_ratios, preload_ratio_plan, simulate, simulate_workload,
    timeline_csv, timeline_svg, HardwareConfig, SimReport, Strategy, WorkloadEntry,
    WorkloadOptions,
};
use streamplan::solver::{
    apply_adjustments, build_instance, check_constraints_with, solve_exact, solve_lcopg,
    OverlapPlan, PlanFile, SolveOutcome,
};

use crate::config::{parse_document, read_file, RunConfig, SolverChoice, StrategyName};

/// A supplied plan violates the instance constraints (exit code 2).
#[derive(Debug)]
pub struct ConstraintFailure(pub Vec<String>);

impl std::fmt::Display for ConstraintFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "plan violates {} constraint(s):", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConstraintFailure {}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("missing --{flag}"))
}

fn graph(cfg: &RunConfig) -> Result<ModelGraph> {
    let path = require(&cfg.graph, "graph")?;
    Ok(load_model(path)?)
}

fn latency_model(path: Option<&Path>) -> Result<LatencyModel> {
    let Some(path) = path else {
        return Ok(LatencyModel::default());
    };
    let m = LatencyModel::from_json(&read_file(path)?)
        .with_context(|| format!("{}: invalid latency model", path.display()))?;
    if !m.is_valid() {
        bail!("{}: latency model parameters out of range", path.display());
    }
    Ok(m)
}

fn hardware(cfg: &RunConfig) -> Result<HardwareConfig> {
    match &cfg.hardware {
        None => Ok(HardwareConfig::default()),
        Some(p) => HardwareConfig::from_json(&read_file(p)?)
            .map_err(|e| anyhow!("{}: invalid hardware config: {e}", p.display())),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn strategy_of(name: StrategyName, plan: impl FnOnce() -> Result<OverlapPlan>) -> Result<Strategy> {
    Ok(match name {
        StrategyName::Plan => Strategy::Plan(plan()?),
        StrategyName::FullPreload => Strategy::FullPreload,
        StrategyName::AlwaysNext => Strategy::AlwaysNext,
        StrategyName::SameOpType => Strategy::SameOpType,
    })
}

// ---------------------------------------------------------------------------
// Solving
// ---------------------------------------------------------------------------

pub struct Solved {
    /// The graph the plan refers to; differs from the input after fusion splits.
    pub graph: ModelGraph,
    pub outcome: SolveOutcome,
    pub solver: &'static str,
    pub splits: Vec<String>,
}

pub fn solve(graph: &ModelGraph, model: &LatencyModel, cfg: &RunConfig) -> Result<Solved> {
    let thresholds = ThresholdConfig::default();
    if cfg.fusion && graph.has_fused_nodes() && cfg.solver != SolverChoice::Exact {
        let setup = SolveSetup {
            model: model.clone(),
            thresholds,
            m_peak: cfg.m_peak,
            lambda: cfg.lambda,
            lcopg: cfg.lcopg(),
        };
        let out = adaptive_fusion(graph, &setup, &cfg.fusion_config())?;
        let splits = out
            .splits
            .iter()
            .map(|s| format!("layer {} ({}) at {}: {} + {} vs {}", s.layer, s.kind, s.at, s.c1, s.c2, s.c_fused))
            .collect();
        return Ok(Solved {
            graph: out.graph,
            outcome: out.outcome,
            solver: "lcopg+fusion",
            splits,
        });
    }
    let caps = capacity_profile(graph, model, &thresholds);
    let inst = build_instance(graph, &caps, cfg.m_peak, cfg.lambda)?;
    let exact = match cfg.solver {
        SolverChoice::Exact => true,
        SolverChoice::Lcopg => false,
        SolverChoice::Auto => inst.streamable_chunks() <= cfg.oracle_bound,
    };
    let (outcome, solver) = if exact {
        (solve_exact(&inst, cfg.exact())?, "exact")
    } else {
        (solve_lcopg(&inst, &cfg.lcopg()), "lcopg")
    };
    Ok(Solved {
        graph: graph.clone(),
        outcome,
        solver,
        splits: Vec::new(),
    })
}

/// Loads a plan file and checks it against `graph` under the configured
/// limits. Reference errors are input errors; constraint violations are
/// reported as [`ConstraintFailure`].
fn load_plan(path: &Path, graph: &ModelGraph, model: &LatencyModel, cfg: &RunConfig) -> Result<OverlapPlan> {
    let file = PlanFile::from_json(&read_file(path)?)
        .with_context(|| format!("{}: cannot load plan", path.display()))?;
    file.check_references(graph)
        .with_context(|| format!("{}: plan does not fit {}", path.display(), graph.name))?;
    let caps = capacity_profile(graph, model, &ThresholdConfig::default());
    let inst = build_instance(graph, &caps, cfg.m_peak, cfg.lambda)?;
    let effective = apply_adjustments(&caps, &file.meta.capacity_adjustments);
    let violations = check_constraints_with(&inst, &file.plan, &effective);
    if !violations.is_empty() {
        return Err(ConstraintFailure(violations.iter().map(|v| format!("{v:?}")).collect()).into());
    }
    Ok(file.plan)
}

fn plan_for(graph: &ModelGraph, model: &LatencyModel, cfg: &RunConfig) -> Result<OverlapPlan> {
    match &cfg.plan {
        Some(p) => load_plan(p, graph, model, cfg),
        None => {
            let solved = solve(graph, model, cfg)?;
            if solved.graph != *graph {
                bail!("fusion changed the graph; run `plan` first and use the fused_graph.json it writes");
            }
            Ok(solved.outcome.plan)
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_plan(cfg: &RunConfig) -> Result<()> {
    let g = graph(cfg)?;
    let model = latency_model(cfg.latency_model.as_deref())?;
    let solved = solve(&g, &model, cfg)?;
    let out = &solved.outcome;
    let path = write(&cfg.out, "plan.json", &out.to_plan_file().to_json())?;
    if !solved.splits.is_empty() {
        write(&cfg.out, "fused_graph.json", &solved.graph.to_json())?;
    }
    let total = solved.graph.total_weight_bytes();
    let preloaded = out.plan.preloaded_bytes(&solved.graph);
    let tiers: Vec<String> = out.diagnostics.tiers_fired.iter().map(|t| format!("{t:?}")).collect();
    println!("plan written to {}", path.display());
    println!("solver: {}  status: {:?}", solved.solver, out.status);
    println!("objective: {:.6}", out.objective);
    println!(
        "preloaded: {} of {} bytes ({:.1}%), {} weights streamed",
        preloaded,
        total,
        if total == 0 { 0.0 } else { 100.0 * preloaded as f64 / total as f64 },
        out.plan.streams.len()
    );
    println!("tiers fired: {}", if tiers.is_empty() { "-".into() } else { tiers.join(", ") });
    for (layer, c) in &out.diagnostics.capacity_adjustments {
        println!("soft capacity: layer {layer} -> {c} chunks");
    }
    for s in &solved.splits {
        println!("split {s}");
    }
    Ok(())
}

fn layers_csv(r: &SimReport) -> String {
    let mut s = String::from("layer,kind,activate_us,start_us,end_us,stall_us,extra_bytes\n");
    for l in &r.layers {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.layer, l.kind, l.activate_us, l.start_us, l.end_us, l.stall_us, l.extra_bytes
        );
    }
    s
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let g = graph(cfg)?;
    let model = latency_model(cfg.latency_model.as_deref())?;
    let hw = hardware(cfg)?;
    let strategy = strategy_of(cfg.strategy, || plan_for(&g, &model, cfg))?;
    let r = simulate(&g, &model, &strategy, &hw)?;
    write(&cfg.out, "report.json", &r.to_json())?;
    write(&cfg.out, "timeline.csv", &timeline_csv(&r.timeline, false))?;
    write(&cfg.out, "layers.csv", &layers_csv(&r))?;
    if cfg.svg {
        let title = format!("{} / {}", r.model, r.strategy);
        write(&cfg.out, "timeline.svg", &timeline_svg(&r.memory_timeline(), &title))?;
    }
    println!("{} / {} on {}", r.model, r.strategy, r.hardware);
    println!(
        "latency us: total {:.3}  init {:.3}  exec {:.3}  stall {:.3}",
        r.total_latency_us, r.init_latency_us, r.exec_latency_us, r.total_stall_us
    );
    println!("memory bytes: peak {}  avg {:.1}", r.peak_memory_bytes, r.avg_memory_bytes);
    Ok(())
}

const BREAK_EVEN_LIMIT: u64 = 1000;

pub fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let g = graph(cfg)?;
    let model = latency_model(cfg.latency_model.as_deref())?;
    let hw = hardware(cfg)?;
    let plan = plan_for(&g, &model, cfg)?;

    let mut rows: Vec<(&str, String, Strategy)> = vec![
        ("strategy", "plan".into(), Strategy::Plan(plan.clone())),
        ("strategy", "full-preload".into(), Strategy::FullPreload),
        ("strategy", "always-next".into(), Strategy::AlwaysNext),
        ("strategy", "same-op-type".into(), Strategy::SameOpType),
    ];
    for r in normalize_ratios(&cfg.ratios) {
        rows.push(("ratio", r.to_string(), Strategy::Plan(preload_ratio_plan(&g, &plan, r))));
    }

    // independent runs; results kept in row order
    let reports: Vec<SimReport> = std::thread::scope(|scope| {
        let handles: Vec<_> = rows
            .iter()
            .map(|(_, _, s)| scope.spawn(|| simulate(&g, &model, s, &hw)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect::<Result<_, _>>()
    })?;

    let full = &reports[1];
    let mut csv = String::from(
        "kind,label,init_us,exec_us,total_us,peak_bytes,avg_bytes,break_even_iterations\n",
    );
    for ((kind, label, _), r) in rows.iter().zip(&reports) {
        let be = if r.exec_latency_us > full.exec_latency_us {
            break_even_iterations(r, full, BREAK_EVEN_LIMIT).map_or(String::new(), |k| k.to_string())
        } else {
            String::new()
        };
        let _ = writeln!(
            csv,
            "{kind},{label},{},{},{},{},{},{be}",
            r.init_latency_us, r.exec_latency_us, r.total_latency_us, r.peak_memory_bytes, r.avg_memory_bytes
        );
    }
    let path = write(&cfg.out, "compare.csv", &csv)?;
    print!("{csv}");
    eprintln!("comparison written to {}", path.display());
    Ok(())
}

/// One entry of a workload manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModel {
    pub graph: PathBuf,
    #[serde(default)]
    pub latency_model: Option<PathBuf>,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyName,
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

fn default_strategy() -> StrategyName {
    StrategyName::Plan
}

fn default_iterations() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub cache_streamed: bool,
    pub models: Vec<ManifestModel>,
}

pub fn cmd_workload(cfg: &RunConfig) -> Result<()> {
    let path = require(&cfg.workload, "workload")?;
    let manifest: Manifest = parse_document(path, &read_file(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let hw = hardware(cfg)?;

    // load and check every member before simulating anything
    let mut entries = Vec::with_capacity(manifest.models.len());
    for (i, m) in manifest.models.iter().enumerate() {
        let g = load_model(&base.join(&m.graph)).with_context(|| format!("workload model {i}"))?;
        let model = latency_model(m.latency_model.as_ref().map(|p| base.join(p)).as_deref())
            .with_context(|| format!("workload model {i}"))?;
        let member = RunConfig {
            plan: m.plan.as_ref().map(|p| base.join(p)),
            ..cfg.clone()
        };
        let strategy = strategy_of(m.strategy, || plan_for(&g, &model, &member))
            .with_context(|| format!("workload model {i} ({})", g.name))?;
        entries.push(WorkloadEntry {
            graph: g,
            model,
            strategy,
            iterations: m.iterations,
        });
    }

    let options = WorkloadOptions {
        cache_streamed: manifest.cache_streamed,
    };
    let report = simulate_workload(&entries, &hw, options)?;
    for name in &report.skipped {
        eprintln!("warning: {name} has zero iterations; skipped");
    }
    let with_model = entries.len() > 1;
    write(&cfg.out, "workload.json", &report.to_json())?;
    write(&cfg.out, "timeline.csv", &timeline_csv(&report.timeline, with_model))?;
    let mut models = String::from(
        "index,model,strategy,iterations,start_us,end_us,init_us,mean_exec_us,peak_bytes,avg_bytes,persistent_bytes,streamed_weight_bytes\n",
    );
    for m in &report.models {
        let mean = m.exec_latency_us.iter().sum::<f64>() / m.exec_latency_us.len().max(1) as f64;
        let _ = writeln!(
            models,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.index, m.model, m.strategy, m.iterations, m.start_us, m.end_us, m.init_latency_us,
            mean, m.peak_memory_bytes, m.avg_memory_bytes, m.persistent_bytes, m.streamed_weight_bytes
        );
    }
    write(&cfg.out, "models.csv", &models)?;
    if cfg.svg {
        write(&cfg.out, "timeline.svg", &timeline_svg(&report.memory_timeline(), "workload"))?;
    }
    print!("{models}");
    println!(
        "total {:.3} us, global peak {} bytes, avg {:.1} bytes",
        report.total_latency_us, report.peak_memory_bytes, report.avg_memory_bytes
    );
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let path = require(&cfg.profile, "profile")?;
    let records = read_profile_csv(&read_file(path)?)
        .with_context(|| format!("{}: cannot read profile", path.display()))?;
    let (model, summary) = fit_model_with_summary(&records)?;
    write(&cfg.out, "latency_model.json", &model.to_json())?;
    let summary_json = serde_json::to_string_pretty(&summary).expect("fit summary serialization");
    write(&cfg.out, "fit_summary.json", &summary_json)?;
    println!("class,fitted,records,free_ratio,slope,sse,max_abs_residual");
    for f in &summary {
        println!(
            "{},{},{},{},{},{},{}",
            f.class, f.fitted, f.records, f.params.free_ratio, f.params.slope, f.sse, f.max_abs_residual
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GraphKind {
    /// Repeated [MatMul, Add, GeLU, LayerNorm] blocks.
    Transformer,
    /// Repeated [Conv, BatchNorm, ReLU] stages.
    Conv,
    /// Random mixed-class DAG.
    Random,
    /// The four-layer reference graph.
    T1,
    /// A graph with fused kernels worth splitting.
    OverFused,
}

pub struct GenerateArgs {
    pub kind: GraphKind,
    pub size: Option<usize>,
    pub weight_bytes: Option<u64>,
    pub activation_bytes: Option<u64>,
}

pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let g = match args.kind {
        GraphKind::Transformer => {
            let d = TransformerSpec::default();
            transformer(&TransformerSpec {
                blocks: args.size.unwrap_or(d.blocks),
                weight_bytes: args.weight_bytes.unwrap_or(d.weight_bytes),
                activation_bytes: args.activation_bytes.unwrap_or(d.activation_bytes),
                ..d
            })
        }
        GraphKind::Conv => conv_chain(args.size.unwrap_or(16), streamplan::graph::DEFAULT_CHUNK_SIZE),
        GraphKind::Random => random_graph(cfg.seed, args.size.unwrap_or(50).max(1)),
        GraphKind::T1 => t1(),
        GraphKind::OverFused => over_fused(),
    };
    let path = write(&cfg.out, "graph.json", &g.to_json())?;
    println!(
        "{}: {} layers, {} weights, {} bytes -> {}",
        g.name,
        g.num_layers(),
        g.weights.len(),
        g.total_weight_bytes(),
        path.display()
    );
    Ok(())
}

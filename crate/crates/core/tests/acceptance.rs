//! Acceptance suite: one PASS/FAIL line per criterion, with timings.
//! Runs without the libtest harness so the lines always print.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamplan::capacity::{
    capacity_profile, load_capacity, predict_latency, CapacityProfile, ClassParams, LatencyModel,
    ThresholdConfig,
};
use streamplan::fixtures::{
    bandwidth_starved, fast_storage, over_fused, random_graph, starved_hardware, sweep_transformer,
    tiny_instance, transformer, TransformerSpec, MIB,
};
use streamplan::fusion::{adaptive_fusion, split_check, FusionConfig, SolveSetup, SplitDecision};
use streamplan::graph::{ModelGraph, OperatorClass, OperatorNode};
use streamplan::simulator::{
    preload_ratio_plan, simulate, simulate_workload, timeline_csv, HardwareConfig, SimReport,
    Strategy, WorkloadEntry, WorkloadOptions, DEFAULT_RATIOS,
};
use streamplan::solver::{
    build_instance, check_constraints, check_constraints_with, greedy_plan, solve_exact,
    solve_lcopg, ExactLimits, LcopgConfig, OverlapPlan, DEFAULT_LAMBDA,
};

// Tolerances and thresholds.
const ORACLE_TOL: f64 = 1e-12;
const LCOPG_RATIO: f64 = 1.25;
const LCOPG_SHARE: f64 = 0.90;
const MEMORY_REDUCTION: f64 = 0.5;
const ALWAYS_NEXT_SLOWDOWN: f64 = 1.5;
const SAME_OP_SLOWDOWN: f64 = 1.2;
const SWEET_SPOT_RATIO: f64 = 0.6;
const SWEET_SPOT_EXEC: f64 = 1.05;
const SWEET_SPOT_MEMORY: f64 = 0.7;
const MONOTONE_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Every simulation in the suite, for the conservation check.
#[derive(Default)]
struct Ledger {
    runs: usize,
    broken: Vec<String>,
}

impl Ledger {
    fn sim(&mut self, g: &ModelGraph, m: &LatencyModel, s: &Strategy, hw: &HardwareConfig) -> SimReport {
        let r = simulate(g, m, s, hw).expect("replayable");
        self.runs += 1;
        if !r.conservation.holds() {
            self.broken.push(format!("{}/{}", g.name, s.name()));
        }
        r
    }
}

fn criterion_1() -> Outcome {
    let mut failures = Vec::new();
    let m = LatencyModel::default();
    let th = ThresholdConfig::default();
    let mut soft = 0;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1);
        let layers = rng.gen_range(5..=200);
        let g = random_graph(seed, layers);
        let caps = capacity_profile(&g, &m, &th);
        let m_peak = MIB * rng.gen_range(1..=12);
        let lambda = [0.1, 0.5, 0.9][rng.gen_range(0..3)];
        let inst = build_instance(&g, &caps, m_peak, lambda).unwrap();
        let window = [8, 16, 64][rng.gen_range(0..3)];
        let lc = solve_lcopg(&inst, &LcopgConfig { window, ..LcopgConfig::default() });
        if !lc.diagnostics.capacity_adjustments.is_empty() {
            soft += 1;
        }
        if !check_constraints_with(&inst, &lc.plan, &lc.effective_capacities(&inst)).is_empty() {
            failures.push(format!("lcopg seed {seed}"));
        }
        if !check_constraints(&inst, &greedy_plan(&inst)).is_empty() {
            failures.push(format!("greedy seed {seed}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("500 graphs x 2 producers, {soft} with soft adjustments, failures {failures:?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut mismatches = Vec::new();
    let mut infeasible = Vec::new();
    let mut within = 0usize;
    let n = 200u64;
    for seed in 0..n {
        let t = tiny_instance(seed);
        let inst = build_instance(&t.graph, &CapacityProfile(t.capacities.clone()), t.m_peak, t.lambda).unwrap();
        let exact = solve_exact(&inst, ExactLimits::default()).unwrap();
        let oracle = common::enumerate(&t);
        if (exact.objective - oracle.best).abs() > ORACLE_TOL {
            mismatches.push(seed);
        }
        let lc = solve_lcopg(&inst, &LcopgConfig::default());
        if !check_constraints_with(&inst, &lc.plan, &lc.effective_capacities(&inst)).is_empty() {
            infeasible.push(seed);
        }
        let ok = if oracle.best == 0.0 {
            lc.objective == 0.0
        } else {
            lc.objective <= LCOPG_RATIO * oracle.best + ORACLE_TOL
        };
        within += ok as usize;
    }
    let share = within as f64 / n as f64;
    outcome(
        mismatches.is_empty() && infeasible.is_empty() && share >= LCOPG_SHARE,
        format!(
            "{n} instances: exact/oracle mismatches {mismatches:?}, lcopg infeasible {infeasible:?}, within {LCOPG_RATIO}x: {:.1}%",
            share * 100.0
        ),
    )
}

fn lcopg_plan(g: &ModelGraph, m: &LatencyModel, m_peak: u64) -> OverlapPlan {
    let caps = capacity_profile(g, m, &ThresholdConfig::default());
    let inst = build_instance(g, &caps, m_peak, DEFAULT_LAMBDA).unwrap();
    solve_lcopg(&inst, &LcopgConfig::default()).plan
}

fn criterion_3(ledger: &mut Ledger) -> Outcome {
    let g = transformer(&TransformerSpec::default());
    let m = LatencyModel::default();
    let hw = HardwareConfig::default();
    let m_peak = g.total_weight_bytes() / 10;
    let plan = lcopg_plan(&g, &m, m_peak);
    let p = ledger.sim(&g, &m, &Strategy::Plan(plan), &hw);
    let f = ledger.sim(&g, &m, &Strategy::FullPreload, &hw);
    let ratio = p.avg_memory_bytes / f.avg_memory_bytes;
    outcome(
        ratio <= MEMORY_REDUCTION,
        format!(
            "{} layers, avg memory plan {:.1} MiB vs full preload {:.1} MiB ({:.1}x reduction)",
            g.num_layers(),
            p.avg_memory_bytes / MIB as f64,
            f.avg_memory_bytes / MIB as f64,
            1.0 / ratio
        ),
    )
}

fn criterion_4(ledger: &mut Ledger) -> Outcome {
    let spec = bandwidth_starved();
    let g = transformer(&spec);
    let hw = starved_hardware(&spec);
    let m = LatencyModel::default();
    let plan = lcopg_plan(&g, &m, g.total_weight_bytes() / 10);
    let p = ledger.sim(&g, &m, &Strategy::Plan(plan), &hw);
    let an = ledger.sim(&g, &m, &Strategy::AlwaysNext, &hw);
    let so = ledger.sim(&g, &m, &Strategy::SameOpType, &hw);
    let a = an.exec_latency_us / p.exec_latency_us;
    let s = so.exec_latency_us / p.exec_latency_us;
    outcome(
        a >= ALWAYS_NEXT_SLOWDOWN && s >= SAME_OP_SLOWDOWN,
        format!("exec always-next {a:.2}x, same-op-type {s:.2}x of plan"),
    )
}

fn criterion_5(ledger: &mut Ledger) -> Outcome {
    let g = transformer(&sweep_transformer());
    let hw = fast_storage();
    let m = LatencyModel::default();
    let base = lcopg_plan(&g, &m, g.total_weight_bytes() / 10);
    let full = ledger.sim(&g, &m, &Strategy::FullPreload, &hw);
    let mut rows = Vec::new();
    for r in DEFAULT_RATIOS {
        let rep = ledger.sim(&g, &m, &Strategy::Plan(preload_ratio_plan(&g, &base, r)), &hw);
        rows.push((r, rep.exec_latency_us, rep.avg_memory_bytes));
    }
    let monotone = rows.windows(2).all(|w| w[1].1 <= w[0].1 + MONOTONE_TOL);
    let sweet = rows.iter().find(|(r, e, a)| {
        *r <= SWEET_SPOT_RATIO
            && *e <= SWEET_SPOT_EXEC * full.exec_latency_us
            && *a <= SWEET_SPOT_MEMORY * full.avg_memory_bytes
    });
    let curve: Vec<String> = rows
        .iter()
        .map(|(r, e, a)| {
            format!(
                "{r}:{:.3}/{:.2}",
                e / full.exec_latency_us,
                a / full.avg_memory_bytes
            )
        })
        .collect();
    outcome(
        monotone && sweet.is_some(),
        format!(
            "monotone {monotone}, sweet spot at ratio {:?}; ratio:exec/mem vs full {}",
            sweet.map(|s| s.0),
            curve.join(" ")
        ),
    )
}

fn random_node(rng: &mut ChaCha8Rng) -> OperatorNode {
    const KINDS: [&str; 9] = [
        "MatMul", "Conv2d", "Gemm", "Add", "GeLU", "ReLU", "LayerNorm", "Softmax", "ReduceMean",
    ];
    OperatorNode::new(
        1,
        KINDS[rng.gen_range(0..KINDS.len())],
        rng.gen_range(1..=64 * MIB),
        rng.gen_range(1.0..10_000.0),
    )
}

fn criterion_6() -> Outcome {
    let th = ThresholdConfig::default();
    let default_model = LatencyModel::default();
    let mut nonzero_hier = 0;
    let mut hier_layers = 0;
    for seed in 0..100 {
        let g = random_graph(seed, 100);
        let caps = capacity_profile(&g, &default_model, &th);
        for n in &g.nodes {
            if n.class == OperatorClass::Hierarchical {
                hier_layers += 1;
                if caps.get(n.id) != 0 {
                    nonzero_hier += 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = Vec::new();
    for i in 0..1000 {
        let node = random_node(&mut rng);
        let mut model = LatencyModel::default();
        let p = ClassParams::new(rng.gen_range(0.0..2.0), rng.gen_range(0.01..6.0));
        match node.class {
            OperatorClass::Elemental => model.elemental = p,
            OperatorClass::Reusable => model.reusable = p,
            OperatorClass::Hierarchical => model.hierarchical = p,
        }
        let s = [MIB / 4, MIB, 4 * MIB][rng.gen_range(0..3)];
        let c = load_capacity(&model, &th, &node, s);
        let limit = node.base_latency_us * (1.0 + th.for_class(node.class));
        let fits = |k: u64| predict_latency(&model, &node, k * s) <= limit;
        if !fits(c) || fits(c + 1) {
            bad.push(i);
        }
    }
    outcome(
        nonzero_hier == 0 && hier_layers > 0 && bad.is_empty(),
        format!("{hier_layers} hierarchical layers, {nonzero_hier} nonzero; 1000 random nodes, {} inconsistent", bad.len()),
    )
}

fn criterion_7() -> Outcome {
    let g = over_fused();
    let setup = SolveSetup {
        model: LatencyModel::default(),
        thresholds: ThresholdConfig::default(),
        m_peak: 64 * MIB,
        lambda: DEFAULT_LAMBDA,
        lcopg: LcopgConfig::default(),
    };
    let cfg = FusionConfig::default();
    let out = adaptive_fusion(&g, &setup, &cfg).unwrap();
    let gains_ok = out
        .splits
        .iter()
        .all(|s| (s.c1 + s.c2) as f64 >= (1.0 + cfg.alpha) * s.c_fused as f64);
    let hier_split = out.splits.iter().any(|s| {
        s.kind
            .split('+')
            .any(|k| streamplan::capacity::classify(k) == OperatorClass::Hierarchical)
    });
    // every hierarchical fused block of the input survives
    let hier_blocks = g
        .nodes
        .iter()
        .filter(|n| n.is_fused() && matches!(split_check(n, &vec![0; n.members.len()], cfg.alpha), SplitDecision::Retain { .. }))
        .filter(|n| n.members.iter().any(|m| m.class == OperatorClass::Hierarchical))
        .all(|n| out.graph.nodes.iter().any(|o| o.kind == n.kind && o.members == n.members));
    let before = out.initial.plan.preloaded_bytes(&g);
    let after = out.outcome.plan.preloaded_bytes(&out.graph);
    outcome(
        !out.splits.is_empty() && gains_ok && !hier_split && hier_blocks && after < before,
        format!(
            "{} split(s) {:?}, preloaded {} MiB -> {} MiB",
            out.splits.len(),
            out.splits.iter().map(|s| (s.kind.clone(), s.c1, s.c2, s.c_fused)).collect::<Vec<_>>(),
            before / MIB,
            after / MIB
        ),
    )
}

/// Plan JSON, report JSON and timeline CSV for one full pipeline run.
fn pipeline_artifacts() -> (String, String, String) {
    let g = transformer(&TransformerSpec {
        blocks: 12,
        ..TransformerSpec::default()
    });
    let m = LatencyModel::default();
    let caps = capacity_profile(&g, &m, &ThresholdConfig::default());
    let inst = build_instance(&g, &caps, g.total_weight_bytes() / 10, DEFAULT_LAMBDA).unwrap();
    let out = solve_lcopg(&inst, &LcopgConfig::default());
    let r = simulate(&g, &m, &Strategy::Plan(out.plan.clone()), &HardwareConfig::default()).unwrap();
    (out.to_plan_file().to_json(), r.to_json(), timeline_csv(&r.timeline, false))
}

fn criterion_8(ledger: &mut Ledger) -> Outcome {
    // extra runs: every strategy on a few random graphs
    let m = LatencyModel::default();
    let hw = HardwareConfig::default();
    for seed in 0..20 {
        let g = random_graph(seed, 60);
        let plan = lcopg_plan(&g, &m, 8 * MIB);
        for s in [Strategy::Plan(plan), Strategy::FullPreload, Strategy::AlwaysNext, Strategy::SameOpType] {
            ledger.sim(&g, &m, &s, &hw);
        }
    }
    let a = pipeline_artifacts();
    let b = pipeline_artifacts();
    let identical = a == b;
    outcome(
        ledger.broken.is_empty() && identical,
        format!(
            "{} runs, conservation broken in {:?}; repeated pipeline byte-identical: {identical}",
            ledger.runs, ledger.broken
        ),
    )
}

fn criterion_9() -> Outcome {
    let m = LatencyModel::default();
    let hw = HardwareConfig::default();
    let specs = [
        TransformerSpec { blocks: 12, ..TransformerSpec::default() },
        TransformerSpec { blocks: 8, weight_bytes: 16 * MIB, ..TransformerSpec::default() },
        TransformerSpec { blocks: 16, weight_bytes: 4 * MIB, ..TransformerSpec::default() },
        TransformerSpec { blocks: 10, activation_bytes: 8 * MIB, ..TransformerSpec::default() },
    ];
    let graphs: Vec<ModelGraph> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = transformer(s);
            g.name = format!("model-{i}");
            g
        })
        .collect();
    let entries = |plan: bool| -> Vec<WorkloadEntry> {
        graphs
            .iter()
            .map(|g| WorkloadEntry {
                graph: g.clone(),
                model: m.clone(),
                strategy: if plan {
                    Strategy::Plan(lcopg_plan(g, &m, g.total_weight_bytes() / 10))
                } else {
                    Strategy::FullPreload
                },
                iterations: 10,
            })
            .collect()
    };
    let plan_entries = entries(true);
    let p = simulate_workload(&plan_entries, &hw, WorkloadOptions::default()).unwrap();
    let f = simulate_workload(&entries(false), &hw, WorkloadOptions::default()).unwrap();
    let persistent_ok = p.models.iter().zip(&plan_entries).all(|(s, e)| {
        let Strategy::Plan(plan) = &e.strategy else { unreachable!() };
        let preloaded = plan.preloaded_bytes(&e.graph);
        s.persistent_bytes == preloaded
            && s.persistent_bytes + s.streamed_weight_bytes == e.graph.total_weight_bytes()
            && s.streamed_weight_bytes > 0
    });
    let init_ok = p
        .models
        .iter()
        .zip(&f.models)
        .all(|(a, b)| a.init_latency_us < b.init_latency_us);
    outcome(
        p.peak_memory_bytes < f.peak_memory_bytes && persistent_ok && init_ok && p.conservation.holds(),
        format!(
            "global peak plan {:.1} MiB vs full preload {:.1} MiB; persistent = preload set only: {persistent_ok}",
            p.peak_memory_bytes as f64 / MIB as f64,
            f.peak_memory_bytes as f64 / MIB as f64
        ),
    )
}

fn main() -> ExitCode {
    let mut ledger = Ledger::default();
    let mut all = true;
    let mut report = |id: usize, name: &str, budget_s: u64, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let in_time = el < Duration::from_secs(budget_s);
        let pass = o.pass && in_time;
        all &= pass;
        println!(
            "criterion {id} [{name}]: {} in {:.2}s (budget {budget_s}s) - {}",
            if pass { "PASS" } else { "FAIL" },
            el.as_secs_f64(),
            o.detail
        );
    };
    report(1, "constraint soundness", 60, &mut criterion_1);
    report(2, "oracle equivalence", 120, &mut criterion_2);
    report(3, "memory reduction", 30, &mut || criterion_3(&mut ledger));
    report(4, "baseline dominance", 30, &mut || criterion_4(&mut ledger));
    report(5, "trade-off curve", 60, &mut || criterion_5(&mut ledger));
    report(6, "capacity math", 10, &mut criterion_6);
    report(7, "fusion protocol", 30, &mut criterion_7);
    report(8, "conservation and determinism", 60, &mut || criterion_8(&mut ledger));
    report(9, "multi-model FIFO", 30, &mut criterion_9);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

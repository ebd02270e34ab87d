//! Deterministic replay of overlap plans and baseline strategies.
//!
//! Timing model:
//!
//! * init: preloaded weights are read from disk one after another and each
//!   is transformed into texture memory while the next one loads;
//! * exec: layers run in order. When layer `l` becomes active, the disk
//!   reads of every weight with `z = l` are queued on the single disk channel
//!   (weight id order). The layer starts once every chunk it transforms has
//!   arrived and runs for `predict_latency(node, transformed bytes)`.
//!
//! Memory model: a streamed weight occupies unified memory from its disk-read
//! start to the end of its last transform layer, and texture memory from each
//! chunk's transform until the end of its last consuming layer. Preloaded
//! weights stay in texture memory until the model leaves.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::capacity::{predict_latency, LatencyModel};
use crate::error::PlanError;
use crate::graph::ModelGraph;
use crate::solver::OverlapPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub disk_bandwidth_bytes_per_us: f64,
    pub init_transform_throughput_bytes_per_us: f64,
    #[serde(default)]
    pub label: String,
}

impl Default for HardwareConfig {
    /// Roughly a phone: 1 GB/s storage, 4 GB/s layout transform.
    fn default() -> Self {
        Self {
            disk_bandwidth_bytes_per_us: 1000.0,
            init_transform_throughput_bytes_per_us: 4000.0,
            label: "default".into(),
        }
    }
}

impl HardwareConfig {
    pub fn is_valid(&self) -> bool {
        self.disk_bandwidth_bytes_per_us > 0.0
            && self.init_transform_throughput_bytes_per_us > 0.0
            && self.disk_bandwidth_bytes_per_us.is_finite()
            && self.init_transform_throughput_bytes_per_us.is_finite()
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let hw: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if hw.is_valid() {
            Ok(hw)
        } else {
            Err("rates must be positive and finite".into())
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware serialization")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Plan(OverlapPlan),
    FullPreload,
    /// Prefetch the next layer's weight while the current layer runs.
    AlwaysNext,
    /// Prefetch at the previous layer of the same operator kind.
    SameOpType,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Plan(_) => "plan",
            Strategy::FullPreload => "full-preload",
            Strategy::AlwaysNext => "always-next",
            Strategy::SameOpType => "same-op-type",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Event kinds, declared in tie-break order for equal timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    LayerEnd,
    TransformEnd,
    LoadEnd,
    FreeUm,
    FreeTm,
    LayerStart,
    LoadStart,
    TransformStart,
    /// A chunk range transformed during a layer.
    Transform,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::LayerEnd => "layer-end",
            EventKind::TransformEnd => "transform-end",
            EventKind::LoadEnd => "load-end",
            EventKind::FreeUm => "free-um",
            EventKind::FreeTm => "free-tm",
            EventKind::LayerStart => "layer-start",
            EventKind::LoadStart => "load-start",
            EventKind::TransformStart => "transform-start",
            EventKind::Transform => "transform",
        }
    }
}

/// One timeline entry; `um_bytes`/`tm_bytes` are the totals after applying it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time_us: f64,
    pub event: EventKind,
    /// Index of the model in a workload; 0 for single runs.
    pub model: usize,
    /// 0 when the event is not tied to a layer.
    pub layer: usize,
    pub weight: String,
    pub bytes: u64,
    pub um_bytes: u64,
    pub tm_bytes: u64,
}

impl TimelineEvent {
    pub fn label(&self) -> String {
        let mut s = self.event.as_str().to_owned();
        if self.layer > 0 {
            let _ = write!(s, " L{}", self.layer);
        }
        if !self.weight.is_empty() {
            let _ = write!(s, " {}", self.weight);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub time_us: f64,
    pub um_bytes: u64,
    pub tm_bytes: u64,
}

impl MemorySample {
    pub fn total(&self) -> u64 {
        self.um_bytes + self.tm_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub layer: usize,
    pub kind: String,
    pub activate_us: f64,
    pub start_us: f64,
    pub end_us: f64,
    pub stall_us: f64,
    pub extra_bytes: u64,
}

/// Byte counters for one run: every byte is read from disk once and
/// transformed once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conservation {
    pub loaded_bytes: u64,
    pub transformed_bytes: u64,
    pub preloaded_bytes: u64,
    /// Streamed bytes summed over every time they were streamed.
    pub streamed_bytes: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        let expected = self.preloaded_bytes + self.streamed_bytes;
        self.loaded_bytes == expected && self.transformed_bytes == expected
    }

    fn add(&mut self, other: &Conservation) {
        self.loaded_bytes += other.loaded_bytes;
        self.transformed_bytes += other.transformed_bytes;
        self.preloaded_bytes += other.preloaded_bytes;
        self.streamed_bytes += other.streamed_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub model: String,
    pub strategy: String,
    pub hardware: String,
    pub init_latency_us: f64,
    pub exec_latency_us: f64,
    pub total_latency_us: f64,
    pub peak_memory_bytes: u64,
    pub avg_memory_bytes: f64,
    /// Peak of streamed (non-preloaded) bytes resident in either memory.
    pub peak_inflight_streamed_bytes: u64,
    pub persistent_bytes: u64,
    pub total_stall_us: f64,
    pub layers: Vec<LayerTiming>,
    pub conservation: Conservation,
    pub timeline: Vec<TimelineEvent>,
}

impl SimReport {
    pub fn memory_timeline(&self) -> Vec<MemorySample> {
        memory_timeline(&self.timeline)
    }

    pub fn layer_stalls(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.stall_us).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Piecewise-constant memory series: one sample per distinct event time with
/// the state after all events at that time, preceded by a zero sample at
/// time 0 if nothing happens then.
pub fn memory_timeline(events: &[TimelineEvent]) -> Vec<MemorySample> {
    let mut out: Vec<MemorySample> = vec![MemorySample {
        time_us: 0.0,
        um_bytes: 0,
        tm_bytes: 0,
    }];
    for e in events {
        let sample = MemorySample {
            time_us: e.time_us,
            um_bytes: e.um_bytes,
            tm_bytes: e.tm_bytes,
        };
        match out.last_mut() {
            Some(last) if last.time_us == e.time_us => *last = sample,
            _ => out.push(sample),
        }
    }
    out
}

/// (peak, time-weighted average) of a series.
pub fn memory_stats(samples: &[MemorySample]) -> (u64, f64) {
    let peak = samples.iter().map(MemorySample::total).max().unwrap_or(0);
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return (0, 0.0);
    };
    let duration = last.time_us - first.time_us;
    if duration <= 0.0 {
        return (peak, last.total() as f64);
    }
    let integral: f64 = samples
        .windows(2)
        .map(|w| w[0].total() as f64 * (w[1].time_us - w[0].time_us))
        .sum();
    (peak, integral / duration)
}

/// `time_us,um_bytes,tm_bytes,event` rows, one per event.
pub fn timeline_csv(events: &[TimelineEvent], with_model: bool) -> String {
    let mut out = String::from("time_us,um_bytes,tm_bytes,event\n");
    for e in events {
        let label = if with_model {
            format!("m{}/{}", e.model, e.label())
        } else {
            e.label()
        };
        let _ = writeln!(out, "{},{},{},{}", e.time_us, e.um_bytes, e.tm_bytes, label);
    }
    out
}

/// A self-contained SVG step chart of total, UM and TM bytes over time.
pub fn timeline_svg(samples: &[MemorySample], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let t_max = samples.last().map_or(0.0, |s| s.time_us).max(1e-9);
    let m_max = samples.iter().map(MemorySample::total).max().unwrap_or(0).max(1) as f64;
    let x = |t: f64| PAD + (W - 2.0 * PAD) * t / t_max;
    let y = |m: u64| H - PAD - (H - 2.0 * PAD) * m as f64 / m_max;
    let path = |f: &dyn Fn(&MemorySample) -> u64| {
        let mut d = String::new();
        for (i, s) in samples.iter().enumerate() {
            if i == 0 {
                let _ = write!(d, "M{:.2},{:.2}", x(s.time_us), y(f(s)));
            } else {
                let prev = f(&samples[i - 1]);
                let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", x(s.time_us), y(prev), x(s.time_us), y(f(s)));
            }
        }
        d
    };
    let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="20" font-family="sans-serif" font-size="12">{escaped} (peak {m_max:.0} B, {t_max:.1} us)</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for (color, f) in [
        ("black", &(|s: &MemorySample| s.total()) as &dyn Fn(&MemorySample) -> u64),
        ("steelblue", &|s: &MemorySample| s.um_bytes),
        ("darkorange", &|s: &MemorySample| s.tm_bytes),
    ] {
        let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="{color}"/>"#, path(f));
    }
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// Strategy resolution
// ---------------------------------------------------------------------------

fn single_layer_plan(graph: &ModelGraph, prefetch_at: impl Fn(usize) -> Option<usize>) -> OverlapPlan {
    let mut preload = BTreeSet::new();
    let mut counts: BTreeMap<String, Vec<(usize, u64)>> = BTreeMap::new();
    for w in graph.weights.values() {
        match prefetch_at(w.first_consumer) {
            Some(layer) => {
                counts.insert(w.id.clone(), vec![(layer, w.chunk_count)]);
            }
            None => {
                preload.insert(w.id.clone());
            }
        }
    }
    OverlapPlan::from_counts(graph, preload, &counts)
}

/// The capacity-ignorant plan behind a baseline strategy.
pub fn baseline_plan(graph: &ModelGraph, strategy: &Strategy) -> OverlapPlan {
    match strategy {
        Strategy::Plan(p) => p.clone(),
        Strategy::FullPreload => OverlapPlan::full_preload(graph),
        Strategy::AlwaysNext => single_layer_plan(graph, |i| (i > 1).then(|| i - 1)),
        Strategy::SameOpType => single_layer_plan(graph, |i| {
            let kind = &graph.node(i)?.kind;
            (1..i).rev().find(|&l| &graph.nodes[l - 1].kind == kind)
        }),
    }
}

/// Structural checks needed to replay a plan: every weight covered exactly
/// once, layers in range and before the consumer, contiguous byte ranges.
pub fn check_replayable(graph: &ModelGraph, plan: &OverlapPlan) -> Result<(), PlanError> {
    let n = graph.num_layers();
    let mut seen = BTreeSet::new();
    for id in &plan.preload {
        if !graph.weights.contains_key(id) {
            return Err(PlanError::UnknownWeight(id.clone()));
        }
        seen.insert(id.as_str());
    }
    for s in &plan.streams {
        let w = graph
            .weights
            .get(&s.weight)
            .ok_or_else(|| PlanError::UnknownWeight(s.weight.clone()))?;
        if !seen.insert(s.weight.as_str()) {
            return Err(PlanError::Mismatch(format!("{} listed twice", s.weight)));
        }
        let mut pos = 0u64;
        let mut prev = 0usize;
        for a in &s.assignments {
            if a.layer == 0 || a.layer > n {
                return Err(PlanError::UnknownLayer { layer: a.layer, layers: n });
            }
            if a.layer >= w.first_consumer || a.layer <= prev || a.byte_start != pos || a.byte_end < a.byte_start {
                return Err(PlanError::Mismatch(format!(
                    "{}: assignment at layer {} is out of order or misplaced",
                    s.weight, a.layer
                )));
            }
            pos = a.byte_end;
            prev = a.layer;
        }
        if pos != w.bytes || s.assignments.first().map(|a| a.layer) != Some(s.z) {
            return Err(PlanError::Mismatch(format!("{}: byte ranges or z inconsistent", s.weight)));
        }
    }
    if let Some(id) = graph.weights.keys().find(|id| !seen.contains(id.as_str())) {
        return Err(PlanError::Mismatch(format!("{id} is neither preloaded nor streamed")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct RawEvent {
    time: f64,
    kind: EventKind,
    model: usize,
    layer: usize,
    weight: String,
    bytes: u64,
    um: i64,
    tm: i64,
    streamed: i64,
}

#[derive(Default)]
struct Recorder {
    events: Vec<RawEvent>,
}

impl Recorder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        time: f64,
        kind: EventKind,
        model: usize,
        layer: usize,
        weight: &str,
        bytes: u64,
        um: i64,
        tm: i64,
        streamed: i64,
    ) {
        self.events.push(RawEvent {
            time,
            kind,
            model,
            layer,
            weight: weight.to_owned(),
            bytes,
            um,
            tm,
            streamed,
        });
    }

    /// Sorts and replays; returns the timeline and the in-flight streamed peak.
    fn finish(mut self) -> (Vec<TimelineEvent>, u64) {
        self.events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.kind.cmp(&b.kind))
                .then(a.model.cmp(&b.model))
                .then(a.layer.cmp(&b.layer))
                .then_with(|| a.weight.cmp(&b.weight))
        });
        let (mut um, mut tm, mut streamed) = (0i64, 0i64, 0i64);
        let mut streamed_peak = 0i64;
        let mut out = Vec::with_capacity(self.events.len());
        for (i, e) in self.events.iter().enumerate() {
            um += e.um;
            tm += e.tm;
            streamed += e.streamed;
            debug_assert!(um >= 0 && tm >= 0 && streamed >= 0);
            let last_at_time = self.events.get(i + 1).is_none_or(|n| n.time != e.time);
            if last_at_time {
                streamed_peak = streamed_peak.max(streamed);
            }
            out.push(TimelineEvent {
                time_us: e.time,
                event: e.kind,
                model: e.model,
                layer: e.layer,
                weight: e.weight.clone(),
                bytes: e.bytes,
                um_bytes: um as u64,
                tm_bytes: tm as u64,
            });
        }
        (out, streamed_peak as u64)
    }
}

struct ModelRun {
    init_latency: f64,
    exec_latencies: Vec<f64>,
    end: f64,
    layers: Vec<LayerTiming>,
    conservation: Conservation,
    persistent_bytes: u64,
    streamed_weight_bytes: u64,
}

#[allow(clippy::too_many_arguments)]
fn run_model(
    graph: &ModelGraph,
    model: &LatencyModel,
    plan: &OverlapPlan,
    hw: &HardwareConfig,
    start: f64,
    iterations: usize,
    cache_streamed: bool,
    idx: usize,
    rec: &mut Recorder,
) -> ModelRun {
    let bw = hw.disk_bandwidth_bytes_per_us;
    let tp = hw.init_transform_throughput_bytes_per_us;
    let mut cons = Conservation::default();

    // init: two-stage pipeline over preloaded weights in id order
    let mut disk = start;
    let mut xf = start;
    let mut persistent = 0u64;
    for id in &plan.preload {
        let b = graph.weights[id].bytes;
        let ls = disk;
        let le = ls + b as f64 / bw;
        let ts = le.max(xf);
        let te = ts + b as f64 / tp;
        disk = le;
        xf = te;
        let bi = b as i64;
        rec.push(ls, EventKind::LoadStart, idx, 0, id, b, bi, 0, 0);
        rec.push(le, EventKind::LoadEnd, idx, 0, id, b, 0, 0, 0);
        rec.push(ts, EventKind::TransformStart, idx, 0, id, b, 0, bi, 0);
        rec.push(te, EventKind::TransformEnd, idx, 0, id, b, -bi, 0, 0);
        persistent += b;
        cons.loaded_bytes += b;
        cons.transformed_bytes += b;
    }
    cons.preloaded_bytes = persistent;
    let init_latency = xf - start;

    let n = graph.num_layers();
    let mut loads_at: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    let mut transforms_at: Vec<Vec<(usize, u64, u64)>> = vec![Vec::new(); n + 1];
    for (si, s) in plan.streams.iter().enumerate() {
        loads_at[s.z].push(si);
        for a in &s.assignments {
            transforms_at[a.layer].push((si, a.byte_start, a.byte_end));
        }
    }
    let streamed_weight_bytes: u64 = plan.streams.iter().map(|s| graph.weights[&s.weight].bytes).sum();

    let mut t = xf;
    let mut exec_latencies = Vec::with_capacity(iterations);
    let mut first_layers = Vec::new();
    for it in 0..iterations {
        let streaming = !(cache_streamed && it > 0);
        let exec_start = t;
        let mut disk_free = t;
        let mut load_start = vec![0.0f64; plan.streams.len()];
        let mut ends = vec![0.0f64; n + 1];
        let mut layers = Vec::with_capacity(n);
        for l in 1..=n {
            let node = &graph.nodes[l - 1];
            let activate = t;
            let mut ready = activate;
            let mut extra = 0u64;
            if streaming {
                for &si in &loads_at[l] {
                    let s = &plan.streams[si];
                    let b = graph.weights[&s.weight].bytes;
                    let ls = activate.max(disk_free);
                    let le = ls + b as f64 / bw;
                    disk_free = le;
                    load_start[si] = ls;
                    let bi = b as i64;
                    rec.push(ls, EventKind::LoadStart, idx, l, &s.weight, b, bi, 0, bi);
                    rec.push(le, EventKind::LoadEnd, idx, l, &s.weight, b, 0, 0, 0);
                    cons.loaded_bytes += b;
                    cons.streamed_bytes += b;
                }
                for &(si, lo, hi) in &transforms_at[l] {
                    ready = ready.max(load_start[si] + hi as f64 / bw);
                    extra += hi - lo;
                }
            }
            let begin = ready;
            let end = begin + predict_latency(model, node, extra);
            if streaming {
                for &(si, lo, hi) in &transforms_at[l] {
                    let r = (hi - lo) as i64;
                    rec.push(begin, EventKind::Transform, idx, l, &plan.streams[si].weight, hi - lo, 0, r, r);
                    cons.transformed_bytes += hi - lo;
                }
            }
            rec.push(begin, EventKind::LayerStart, idx, l, "", 0, 0, 0, 0);
            rec.push(end, EventKind::LayerEnd, idx, l, "", 0, 0, 0, 0);
            ends[l] = end;
            layers.push(LayerTiming {
                layer: l,
                kind: node.kind.clone(),
                activate_us: activate,
                start_us: begin,
                end_us: end,
                stall_us: begin - activate,
                extra_bytes: extra,
            });
            t = end;
        }
        if streaming {
            let keep_tm = cache_streamed;
            for s in &plan.streams {
                let w = &graph.weights[&s.weight];
                let bi = w.bytes as i64;
                let last_transform = s.assignments.last().map_or(s.z, |a| a.layer);
                rec.push(ends[last_transform], EventKind::FreeUm, idx, last_transform, &w.id, w.bytes, -bi, 0, -bi);
                if !keep_tm {
                    rec.push(ends[w.last_use], EventKind::FreeTm, idx, w.last_use, &w.id, w.bytes, 0, -bi, -bi);
                }
            }
        }
        exec_latencies.push(t - exec_start);
        if it == 0 {
            first_layers = layers;
        }
    }

    // the model leaves the queue
    for id in &plan.preload {
        let b = graph.weights[id].bytes;
        rec.push(t, EventKind::FreeTm, idx, 0, id, b, 0, -(b as i64), 0);
    }
    if cache_streamed && iterations > 0 {
        for s in &plan.streams {
            let b = graph.weights[&s.weight].bytes as i64;
            rec.push(t, EventKind::FreeTm, idx, 0, &s.weight, b as u64, 0, -b, -b);
        }
    }

    ModelRun {
        init_latency,
        exec_latencies,
        end: t,
        layers: first_layers,
        conservation: cons,
        persistent_bytes: persistent,
        streamed_weight_bytes,
    }
}

fn resolve(graph: &ModelGraph, strategy: &Strategy) -> Result<OverlapPlan, PlanError> {
    let plan = baseline_plan(graph, strategy);
    check_replayable(graph, &plan)?;
    Ok(plan)
}

/// Replays one inference of `graph` under `strategy`.
pub fn simulate(
    graph: &ModelGraph,
    model: &LatencyModel,
    strategy: &Strategy,
    hw: &HardwareConfig,
) -> Result<SimReport, PlanError> {
    let plan = resolve(graph, strategy)?;
    let mut rec = Recorder::default();
    let run = run_model(graph, model, &plan, hw, 0.0, 1, false, 0, &mut rec);
    let (timeline, streamed_peak) = rec.finish();
    let (peak, avg) = memory_stats(&memory_timeline(&timeline));
    let exec = run.exec_latencies[0];
    Ok(SimReport {
        model: graph.name.clone(),
        strategy: strategy.name().into(),
        hardware: hw.label.clone(),
        init_latency_us: run.init_latency,
        exec_latency_us: exec,
        total_latency_us: run.init_latency + exec,
        peak_memory_bytes: peak,
        avg_memory_bytes: avg,
        peak_inflight_streamed_bytes: streamed_peak,
        persistent_bytes: run.persistent_bytes,
        total_stall_us: run.layers.iter().map(|l| l.stall_us).sum(),
        layers: run.layers,
        conservation: run.conservation,
        timeline,
    })
}

/// Baseline replay; identical to [`simulate`] with the baseline strategy.
pub fn simulate_baseline(
    graph: &ModelGraph,
    model: &LatencyModel,
    which: &Strategy,
    hw: &HardwareConfig,
) -> SimReport {
    simulate(graph, model, which, hw).expect("baseline plans are replayable by construction")
}

/// Smallest iteration count at which preloading everything (`preload`) is
/// no slower in total than streaming (`streamed`), within `limit`.
pub fn break_even_iterations(streamed: &SimReport, preload: &SimReport, limit: u64) -> Option<u64> {
    (1..=limit).find(|&k| {
        let k = k as f64;
        preload.init_latency_us + k * preload.exec_latency_us
            <= streamed.init_latency_us + k * streamed.exec_latency_us
    })
}

// ---------------------------------------------------------------------------
// Workloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadEntry {
    pub graph: ModelGraph,
    pub model: LatencyModel,
    pub strategy: Strategy,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorkloadOptions {
    /// Keep streamed weights in texture memory after the first iteration.
    pub cache_streamed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub index: usize,
    pub model: String,
    pub strategy: String,
    pub iterations: usize,
    pub start_us: f64,
    pub end_us: f64,
    pub init_latency_us: f64,
    pub exec_latency_us: Vec<f64>,
    pub peak_memory_bytes: u64,
    pub avg_memory_bytes: f64,
    /// Bytes resident for the model's whole stay (its preload set).
    pub persistent_bytes: u64,
    pub streamed_weight_bytes: u64,
    pub conservation: Conservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadReport {
    pub total_latency_us: f64,
    pub peak_memory_bytes: u64,
    pub avg_memory_bytes: f64,
    pub models: Vec<ModelSummary>,
    /// Names of entries with zero iterations.
    pub skipped: Vec<String>,
    pub conservation: Conservation,
    pub timeline: Vec<TimelineEvent>,
}

impl WorkloadReport {
    pub fn memory_timeline(&self) -> Vec<MemorySample> {
        memory_timeline(&self.timeline)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

fn window_stats(samples: &[MemorySample], start: f64, end: f64) -> (u64, f64) {
    // state entering the window, then every change inside it
    let mut window: Vec<MemorySample> = Vec::new();
    let before = samples.iter().take_while(|s| s.time_us <= start).last().copied();
    if let Some(mut s) = before {
        s.time_us = start;
        window.push(s);
    }
    window.extend(samples.iter().filter(|s| s.time_us > start && s.time_us < end).copied());
    if let Some(last) = window.last().copied() {
        window.push(MemorySample { time_us: end, ..last });
    }
    memory_stats(&window)
}

/// Runs the entries back to back (FIFO). Entries with zero iterations are
/// skipped and reported by name.
pub fn simulate_workload(
    entries: &[WorkloadEntry],
    hw: &HardwareConfig,
    options: WorkloadOptions,
) -> Result<WorkloadReport, PlanError> {
    let plans: Vec<OverlapPlan> = entries
        .iter()
        .map(|e| resolve(&e.graph, &e.strategy))
        .collect::<Result<_, _>>()?;
    let mut rec = Recorder::default();
    let mut t = 0.0;
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    let mut conservation = Conservation::default();
    for (i, (e, plan)) in entries.iter().zip(&plans).enumerate() {
        if e.iterations == 0 {
            skipped.push(e.graph.name.clone());
            continue;
        }
        let start = t;
        let run = run_model(&e.graph, &e.model, plan, hw, start, e.iterations, options.cache_streamed, i, &mut rec);
        t = run.end;
        conservation.add(&run.conservation);
        runs.push((i, start, run));
    }
    let (timeline, _) = rec.finish();
    let samples = memory_timeline(&timeline);
    let (peak, avg) = memory_stats(&samples);
    let models = runs
        .into_iter()
        .map(|(i, start, run)| {
            let (mp, ma) = window_stats(&samples, start, run.end);
            ModelSummary {
                index: i,
                model: entries[i].graph.name.clone(),
                strategy: entries[i].strategy.name().into(),
                iterations: entries[i].iterations,
                start_us: start,
                end_us: run.end,
                init_latency_us: run.init_latency,
                exec_latency_us: run.exec_latencies,
                peak_memory_bytes: mp,
                avg_memory_bytes: ma,
                persistent_bytes: run.persistent_bytes,
                streamed_weight_bytes: run.streamed_weight_bytes,
                conservation: run.conservation,
            }
        })
        .collect();
    Ok(WorkloadReport {
        total_latency_us: t,
        peak_memory_bytes: peak,
        avg_memory_bytes: avg,
        models,
        skipped,
        conservation,
        timeline,
    })
}

// ---------------------------------------------------------------------------
// Preload-ratio sweep
// ---------------------------------------------------------------------------

/// Moves streamed weights of `base` into the preload set, earliest consumer
/// first, until preloaded bytes reach `ratio` of the total. The resulting
/// preload sets are nested as the ratio grows.
pub fn preload_ratio_plan(graph: &ModelGraph, base: &OverlapPlan, ratio: f64) -> OverlapPlan {
    let total = graph.total_weight_bytes() as f64;
    let mut plan = base.clone();
    let mut order: Vec<_> = graph.weights.values().collect();
    order.sort_by(|a, b| a.first_consumer.cmp(&b.first_consumer).then(a.id.cmp(&b.id)));
    for w in order {
        if plan.preloaded_bytes(graph) as f64 >= ratio * total {
            break;
        }
        if !plan.preload.contains(&w.id) {
            plan.preload_weight(&w.id);
        }
    }
    plan
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Sorted, de-duplicated ratios in [0, 1]; empty input gives the default grid.
pub fn normalize_ratios(ratios: &[f64]) -> Vec<f64> {
    if ratios.is_empty() {
        return DEFAULT_RATIOS.to_vec();
    }
    let mut r: Vec<f64> = ratios.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    r.sort_by(cmp_f64);
    r.dedup();
    r
}

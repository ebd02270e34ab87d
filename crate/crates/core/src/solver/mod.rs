//! Overlap plan generation.
//!
//! An [`OpgInstance`] fixes the graph, per-layer capacities, the per-layer
//! transformation budget `m_peak` and the preload/distance weighting `lambda`.
//! Plans come from three producers:
//!
//! * [`solve_exact`]: branch-and-bound with proof of optimality, for tiny
//!   instances;
//! * [`solve_lcopg`]: windowed search with soft-threshold, incremental-preload
//!   and greedy fallbacks;
//! * [`greedy_plan`]: the standalone greedy heuristic.

mod exact;
mod greedy;
mod lcopg;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::capacity::CapacityProfile;
use crate::error::{PlanError, SolveError};
use crate::graph::ModelGraph;

pub use exact::{solve_exact, ExactLimits};
pub use greedy::greedy_plan;
pub use lcopg::{solve_lcopg, LcopgConfig};

/// 500 MB.
pub const DEFAULT_M_PEAK: u64 = 500_000_000;
pub const DEFAULT_LAMBDA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct OpgInstance {
    pub graph: ModelGraph,
    pub capacities: CapacityProfile,
    /// Per-layer bound on transformed bytes.
    pub m_peak: u64,
    pub lambda: f64,
    pub chunk_size: u64,
    /// Weights consumed by layer 1; they have no earlier layer to stream through.
    pub mandatory: BTreeSet<String>,
}

pub fn build_instance(
    graph: &ModelGraph,
    capacities: &CapacityProfile,
    m_peak: u64,
    lambda: f64,
) -> Result<OpgInstance, SolveError> {
    if capacities.len() != graph.num_layers() {
        return Err(SolveError::CapacityLengthMismatch {
            expected: graph.num_layers(),
            got: capacities.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SolveError::LambdaOutOfRange(lambda));
    }
    let mandatory = graph
        .weights
        .values()
        .filter(|w| w.first_consumer <= 1)
        .map(|w| w.id.clone())
        .collect();
    Ok(OpgInstance {
        graph: graph.clone(),
        capacities: capacities.clone(),
        m_peak,
        lambda,
        chunk_size: graph.chunk_size,
        mandatory,
    })
}

impl OpgInstance {
    pub fn num_layers(&self) -> usize {
        self.graph.num_layers()
    }

    /// Chunks layer `layer` may take under both C2 and C3.
    pub(crate) fn layer_limit(&self, capacity: u64) -> u64 {
        capacity.min(self.m_peak / self.chunk_size)
    }

    pub(crate) fn limits_for(&self, capacities: &CapacityProfile) -> Vec<u64> {
        capacities.0.iter().map(|&c| self.layer_limit(c)).collect()
    }

    /// Chunks of every weight that could be streamed.
    pub fn streamable_chunks(&self) -> u64 {
        self.graph
            .weights
            .values()
            .filter(|w| !self.mandatory.contains(&w.id))
            .map(|w| w.chunk_count)
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub layer: usize,
    pub chunks: u64,
    pub byte_start: u64,
    pub byte_end: u64,
}

/// How one streamed weight moves: first disk load at layer `z`, then chunk
/// transforms at the listed layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightStream {
    pub weight: String,
    pub z: usize,
    pub assignments: Vec<Assignment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OverlapPlan {
    pub preload: BTreeSet<String>,
    /// Sorted by weight id.
    pub streams: Vec<WeightStream>,
}

impl OverlapPlan {
    /// Everything preloaded.
    pub fn full_preload(graph: &ModelGraph) -> Self {
        Self {
            preload: graph.weights.keys().cloned().collect(),
            streams: Vec::new(),
        }
    }

    /// Builds a plan from per-weight `(layer, chunks)` lists, computing byte
    /// offsets and `z`. Zero-chunk entries are dropped.
    pub fn from_counts(
        graph: &ModelGraph,
        preload: BTreeSet<String>,
        counts: &BTreeMap<String, Vec<(usize, u64)>>,
    ) -> Self {
        let s = graph.chunk_size;
        let streams = counts
            .iter()
            .filter(|(id, _)| !preload.contains(*id))
            .map(|(id, layers)| {
                let bytes = graph.weights[id].bytes;
                let mut sorted: Vec<(usize, u64)> =
                    layers.iter().copied().filter(|&(_, c)| c > 0).collect();
                sorted.sort_unstable();
                let mut start = 0u64;
                let assignments: Vec<Assignment> = sorted
                    .into_iter()
                    .map(|(layer, chunks)| {
                        let end = start.saturating_add(chunks.saturating_mul(s)).min(bytes);
                        let a = Assignment {
                            layer,
                            chunks,
                            byte_start: start,
                            byte_end: end,
                        };
                        start = end;
                        a
                    })
                    .collect();
                WeightStream {
                    weight: id.clone(),
                    z: assignments.first().map_or(0, |a| a.layer),
                    assignments,
                }
            })
            .collect();
        Self { preload, streams }
    }

    pub fn stream(&self, weight: &str) -> Option<&WeightStream> {
        self.streams
            .binary_search_by(|s| s.weight.as_str().cmp(weight))
            .ok()
            .map(|i| &self.streams[i])
    }

    /// z_w, absent for preloaded weights.
    pub fn earliest_load(&self) -> BTreeMap<String, usize> {
        self.streams.iter().map(|s| (s.weight.clone(), s.z)).collect()
    }

    pub fn preloaded_bytes(&self, graph: &ModelGraph) -> u64 {
        self.preload
            .iter()
            .filter_map(|id| graph.weights.get(id))
            .map(|w| w.bytes)
            .sum()
    }

    /// Chunks transformed per layer (index = layer - 1).
    pub fn chunks_per_layer(&self, num_layers: usize) -> Vec<u64> {
        let mut out = vec![0; num_layers];
        for s in &self.streams {
            for a in &s.assignments {
                if (1..=num_layers).contains(&a.layer) {
                    out[a.layer - 1] += a.chunks;
                }
            }
        }
        out
    }

    /// Moves `weight` into the preload set, dropping its assignments.
    pub fn preload_weight(&mut self, weight: &str) {
        self.streams.retain(|s| s.weight != weight);
        self.preload.insert(weight.to_owned());
    }
}

/// Combines the normalized preload fraction and mean loading distance.
pub(crate) fn objective_value(
    lambda: f64,
    preloaded_bytes: u64,
    total_bytes: u64,
    distance_sum: u64,
    num_layers: usize,
    streamed: usize,
) -> f64 {
    let preload_term = if total_bytes == 0 {
        0.0
    } else {
        preloaded_bytes as f64 / total_bytes as f64
    };
    let distance_term = if streamed == 0 || num_layers == 0 {
        0.0
    } else {
        distance_sum as f64 / (num_layers as f64 * streamed as f64)
    };
    lambda * preload_term + (1.0 - lambda) * distance_term
}

/// λ·(preloaded bytes / total bytes) + (1−λ)·(mean loading distance / N).
pub fn objective(instance: &OpgInstance, plan: &OverlapPlan) -> f64 {
    let g = &instance.graph;
    let distance_sum: u64 = plan
        .streams
        .iter()
        .filter_map(|s| {
            g.weights
                .get(&s.weight)
                .map(|w| w.first_consumer.saturating_sub(s.z) as u64)
        })
        .sum();
    objective_value(
        instance.lambda,
        plan.preloaded_bytes(g),
        g.total_weight_bytes(),
        distance_sum,
        g.num_layers(),
        plan.streams.len(),
    )
}

// ---------------------------------------------------------------------------
// Constraint checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "constraint", rename_all = "kebab-case")]
pub enum ConstraintViolation {
    /// C0: assigned chunks must equal T(w).
    Completeness {
        weight: String,
        assigned: u64,
        expected: u64,
    },
    /// C1: assignments lie in [z_w, i_w) and z_w is the first of them.
    LoadingDistance { weight: String, detail: String },
    /// C2: bytes transformed at a layer bounded by M_peak.
    LayerMemory { layer: usize, bytes: u64, limit: u64 },
    /// C3: chunks transformed at a layer bounded by C_l.
    LoadCapacity {
        layer: usize,
        chunks: u64,
        capacity: u64,
    },
    MandatoryPreload { weight: String },
    Offsets { weight: String, detail: String },
    UnknownWeight { weight: String },
    UnknownLayer { weight: String, layer: usize },
    Duplicate { weight: String },
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ConstraintViolation::*;
        match self {
            Completeness {
                weight,
                assigned,
                expected,
            } => write!(f, "C0 {weight}: {assigned} of {expected} chunks assigned"),
            LoadingDistance { weight, detail } => write!(f, "C1 {weight}: {detail}"),
            LayerMemory { layer, bytes, limit } => {
                write!(f, "C2 layer {layer}: {bytes} B transformed, limit {limit} B")
            }
            LoadCapacity {
                layer,
                chunks,
                capacity,
            } => write!(f, "C3 layer {layer}: {chunks} chunks, capacity {capacity}"),
            MandatoryPreload { weight } => {
                write!(f, "{weight} is consumed by layer 1 and must be preloaded")
            }
            Offsets { weight, detail } => write!(f, "{weight}: byte offsets {detail}"),
            UnknownWeight { weight } => write!(f, "unknown weight {weight}"),
            UnknownLayer { weight, layer } => write!(f, "{weight}: unknown layer {layer}"),
            Duplicate { weight } => write!(f, "{weight} appears more than once"),
        }
    }
}

pub fn check_constraints(instance: &OpgInstance, plan: &OverlapPlan) -> Vec<ConstraintViolation> {
    check_constraints_with(instance, plan, &instance.capacities)
}

/// Checks a plan against an explicit capacity profile (e.g. soft-adjusted).
pub fn check_constraints_with(
    instance: &OpgInstance,
    plan: &OverlapPlan,
    capacities: &CapacityProfile,
) -> Vec<ConstraintViolation> {
    use ConstraintViolation::*;
    let g = &instance.graph;
    let n = g.num_layers();
    let s = instance.chunk_size;
    let mut out = Vec::new();

    for id in &plan.preload {
        if !g.weights.contains_key(id) {
            out.push(UnknownWeight { weight: id.clone() });
        }
    }
    for id in &instance.mandatory {
        if !plan.preload.contains(id) {
            out.push(MandatoryPreload { weight: id.clone() });
        }
    }

    let mut seen = BTreeSet::new();
    let mut per_layer = vec![0u64; n];
    for st in &plan.streams {
        let Some(w) = g.weights.get(&st.weight) else {
            out.push(UnknownWeight {
                weight: st.weight.clone(),
            });
            continue;
        };
        if plan.preload.contains(&st.weight) || !seen.insert(st.weight.as_str()) {
            out.push(Duplicate {
                weight: st.weight.clone(),
            });
            continue;
        }

        let assigned: u64 = st.assignments.iter().map(|a| a.chunks).sum();
        if assigned != w.chunk_count {
            out.push(Completeness {
                weight: w.id.clone(),
                assigned,
                expected: w.chunk_count,
            });
        }

        let first = st.assignments.iter().filter(|a| a.chunks > 0).map(|a| a.layer).min();
        if first != Some(st.z) {
            out.push(LoadingDistance {
                weight: w.id.clone(),
                detail: format!("z = {} but first assignment is at {:?}", st.z, first),
            });
        }

        let mut expected_start = 0u64;
        let mut prev_layer = 0usize;
        for a in &st.assignments {
            if a.layer == 0 || a.layer > n {
                out.push(UnknownLayer {
                    weight: w.id.clone(),
                    layer: a.layer,
                });
                continue;
            }
            if a.layer >= w.first_consumer || a.layer < st.z {
                out.push(LoadingDistance {
                    weight: w.id.clone(),
                    detail: format!(
                        "layer {} outside [{}, {})",
                        a.layer, st.z, w.first_consumer
                    ),
                });
            }
            if a.chunks == 0 || a.layer <= prev_layer {
                out.push(Offsets {
                    weight: w.id.clone(),
                    detail: format!("assignment at layer {} is empty or out of order", a.layer),
                });
            }
            let expected_end = expected_start.saturating_add(a.chunks.saturating_mul(s)).min(w.bytes);
            if a.byte_start != expected_start || a.byte_end != expected_end {
                out.push(Offsets {
                    weight: w.id.clone(),
                    detail: format!(
                        "layer {}: [{}, {}) expected [{}, {})",
                        a.layer, a.byte_start, a.byte_end, expected_start, expected_end
                    ),
                });
            }
            expected_start = a.byte_end;
            prev_layer = a.layer;
            per_layer[a.layer - 1] += a.chunks;
        }
        if assigned == w.chunk_count && expected_start != w.bytes {
            out.push(Offsets {
                weight: w.id.clone(),
                detail: format!("ranges end at {} of {} bytes", expected_start, w.bytes),
            });
        }
    }

    for id in g.weights.keys() {
        if !plan.preload.contains(id) && !seen.contains(id.as_str()) {
            out.push(Completeness {
                weight: id.clone(),
                assigned: 0,
                expected: g.weights[id].chunk_count,
            });
        }
    }

    for (i, &chunks) in per_layer.iter().enumerate() {
        let layer = i + 1;
        let bytes = chunks.saturating_mul(s);
        if bytes > instance.m_peak {
            out.push(LayerMemory {
                layer,
                bytes,
                limit: instance.m_peak,
            });
        }
        let capacity = capacities.0.get(i).copied().unwrap_or(0);
        if chunks > capacity {
            out.push(LoadCapacity {
                layer,
                chunks,
                capacity,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Outcomes and plan files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Heuristic,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Feasible => "feasible",
            SolveStatus::Heuristic => "heuristic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Exact,
    Window,
    SoftThreshold,
    IncrementalPreload,
    Greedy,
}

impl Tier {
    pub fn level(self) -> u8 {
        match self {
            Tier::Exact | Tier::Window => 0,
            Tier::SoftThreshold => 1,
            Tier::IncrementalPreload => 2,
            Tier::Greedy => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    /// Sorted, unique.
    pub tiers_fired: Vec<Tier>,
    /// Weights moved into the preload set by the incremental-preload tier or
    /// the greedy tier, in the order they were forced.
    pub forced_preloads: Vec<String>,
    /// Streamed weights moved into the preload set by the final refinement.
    pub refined_preloads: Vec<String>,
    /// Layer -> soft-adjusted capacity.
    pub capacity_adjustments: BTreeMap<usize, u64>,
    pub nodes_explored: u64,
    pub notes: Vec<String>,
}

impl Diagnostics {
    pub(crate) fn fire(&mut self, tier: Tier) {
        if let Err(pos) = self.tiers_fired.binary_search(&tier) {
            self.tiers_fired.insert(pos, tier);
        }
    }

    pub fn max_tier(&self) -> u8 {
        self.tiers_fired.iter().map(|t| t.level()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub plan: OverlapPlan,
    pub status: SolveStatus,
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

impl SolveOutcome {
    /// The capacities the plan was built against, soft adjustments applied.
    pub fn effective_capacities(&self, instance: &OpgInstance) -> CapacityProfile {
        apply_adjustments(&instance.capacities, &self.diagnostics.capacity_adjustments)
    }

    pub fn to_plan_file(&self) -> PlanFile {
        PlanFile {
            plan: self.plan.clone(),
            meta: PlanMeta {
                status: self.status,
                objective: self.objective,
                tiers_fired: self.diagnostics.tiers_fired.clone(),
                capacity_adjustments: self.diagnostics.capacity_adjustments.clone(),
            },
        }
    }
}

pub fn apply_adjustments(
    capacities: &CapacityProfile,
    adjustments: &BTreeMap<usize, u64>,
) -> CapacityProfile {
    let mut caps = capacities.clone();
    for (&layer, &c) in adjustments {
        if (1..=caps.len()).contains(&layer) {
            caps.0[layer - 1] = c;
        }
    }
    caps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub status: SolveStatus,
    pub objective: f64,
    pub tiers_fired: Vec<Tier>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub capacity_adjustments: BTreeMap<usize, u64>,
}

/// The on-disk plan document.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFile {
    pub plan: OverlapPlan,
    pub meta: PlanMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlanFile {
    preload: Vec<String>,
    streams: Vec<WeightStream>,
    meta: PlanMeta,
}

impl PlanFile {
    pub fn to_json(&self) -> String {
        let raw = RawPlanFile {
            preload: self.plan.preload.iter().cloned().collect(),
            streams: self.plan.streams.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("plan serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let raw: RawPlanFile =
            serde_json::from_str(text).map_err(|e| PlanError::Malformed(e.to_string()))?;
        let preload: BTreeSet<String> = raw.preload.iter().cloned().collect();
        if preload.len() != raw.preload.len() {
            return Err(PlanError::Malformed("duplicate preload entries".into()));
        }
        let mut streams = raw.streams;
        streams.sort_by(|a, b| a.weight.cmp(&b.weight));
        Ok(Self {
            plan: OverlapPlan { preload, streams },
            meta: raw.meta,
        })
    }

    /// Checks that every referenced weight and layer exists in `graph`.
    pub fn check_references(&self, graph: &ModelGraph) -> Result<(), PlanError> {
        for id in &self.plan.preload {
            if !graph.weights.contains_key(id) {
                return Err(PlanError::UnknownWeight(id.clone()));
            }
        }
        for s in &self.plan.streams {
            if !graph.weights.contains_key(&s.weight) {
                return Err(PlanError::UnknownWeight(s.weight.clone()));
            }
            for a in &s.assignments {
                if a.layer == 0 || a.layer > graph.num_layers() {
                    return Err(PlanError::UnknownLayer {
                        layer: a.layer,
                        layers: graph.num_layers(),
                    });
                }
            }
        }
        Ok(())
    }
}

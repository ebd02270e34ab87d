//! Un-fusing for schedulability.
//!
//! A fused kernel transforms at most as many chunks as its most constrained
//! member. When the solver has to fall back to forced preloads or softened
//! capacities, fused layers are ranked by how much their fusion costs the
//! plan and the worst one that passes the split check is split in two.

use serde::Serialize;

use crate::capacity::{capacity_profile, member_capacity, CapacityProfile, LatencyModel, ThresholdConfig};
use crate::error::{PlanError, SolveError};
use crate::graph::{derive_weight_metadata, FusedMember, ModelGraph, OperatorClass, OperatorNode};
use crate::solver::{build_instance, solve_lcopg, LcopgConfig, OverlapPlan, SolveOutcome};

/// C_fused = min over members; 0 for an empty list.
pub fn fused_capacity(member_capacities: &[u64]) -> u64 {
    member_capacities.iter().copied().min().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionConfig {
    /// Required relative capacity gain for a split.
    pub alpha: f64,
    /// Weight of newly preloaded bytes in the penalty.
    pub lambda_pen: f64,
    /// Weight of loading-distance increases in the penalty.
    pub mu: f64,
    pub max_rounds: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda_pen: 0.5,
            mu: 0.5,
            max_rounds: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionPenalty {
    pub score: f64,
    /// Weights preloaded by the fused plan but not the baseline.
    pub new_preloads: Vec<String>,
    pub new_preload_bytes: u64,
    /// Sum of loading-distance increases over weights streamed in both plans.
    pub distance_increase: u64,
}

/// Scores what a fused graph's plan loses against a baseline plan on the
/// unfused graph. Both graphs must carry the same weights; distances are
/// measured in each plan's own graph.
pub fn fusion_penalty(
    baseline_graph: &ModelGraph,
    baseline_plan: &OverlapPlan,
    fused_graph: &ModelGraph,
    fused_plan: &OverlapPlan,
    lambda_pen: f64,
    mu: f64,
) -> Result<FusionPenalty, PlanError> {
    if baseline_graph.weights.len() != fused_graph.weights.len()
        || baseline_graph
            .weights
            .iter()
            .zip(&fused_graph.weights)
            .any(|((a, wa), (b, wb))| a != b || wa.bytes != wb.bytes)
    {
        return Err(PlanError::Mismatch(
            "graphs carry different weight sets".into(),
        ));
    }
    for (graph, plan) in [(baseline_graph, baseline_plan), (fused_graph, fused_plan)] {
        for id in plan.preload.iter().chain(plan.streams.iter().map(|s| &s.weight)) {
            if !graph.weights.contains_key(id) {
                return Err(PlanError::UnknownWeight(id.clone()));
            }
        }
    }

    let new_preloads: Vec<String> = fused_plan
        .preload
        .difference(&baseline_plan.preload)
        .cloned()
        .collect();
    let new_preload_bytes = new_preloads
        .iter()
        .map(|id| fused_graph.weights[id].bytes)
        .sum();

    let distance = |g: &ModelGraph, p: &OverlapPlan, id: &str| {
        p.stream(id)
            .map(|s| g.weights[id].first_consumer.saturating_sub(s.z) as u64)
    };
    let distance_increase = fused_graph
        .weights
        .keys()
        .filter_map(|id| {
            let before = distance(baseline_graph, baseline_plan, id)?;
            let after = distance(fused_graph, fused_plan, id)?;
            Some(after.saturating_sub(before))
        })
        .sum();

    Ok(FusionPenalty {
        score: lambda_pen * new_preload_bytes as f64 + mu * distance_increase as f64,
        new_preloads,
        new_preload_bytes,
        distance_increase,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum SplitDecision {
    /// Members `[..at]` form v1, `[at..]` form v2.
    Split {
        at: usize,
        c1: u64,
        c2: u64,
        c_fused: u64,
    },
    Retain { reason: String },
}

/// Decides whether a fused node should be split in two. Blocks containing a
/// hierarchical member are always retained. Otherwise the candidate points
/// are the class boundaries (every point if there are none) and the one
/// maximizing C_v1 + C_v2 wins, earliest on ties. The split is accepted when
/// C_v1 + C_v2 >= (1 + alpha) C_fused and the gain is strictly positive.
pub fn split_check(node: &OperatorNode, member_capacities: &[u64], alpha: f64) -> SplitDecision {
    let retain = |reason: &str| SplitDecision::Retain {
        reason: reason.to_owned(),
    };
    if !node.is_fused() {
        return retain("not a fused node");
    }
    assert_eq!(
        node.members.len(),
        member_capacities.len(),
        "one capacity per member"
    );
    if node
        .members
        .iter()
        .any(|m| m.class == OperatorClass::Hierarchical)
    {
        return retain("contains a hierarchical operator");
    }

    let k = node.members.len();
    let boundaries: Vec<usize> = (1..k)
        .filter(|&i| node.members[i - 1].class != node.members[i].class)
        .collect();
    let candidates = if boundaries.is_empty() {
        (1..k).collect()
    } else {
        boundaries
    };

    let c_fused = fused_capacity(member_capacities);
    let mut best: Option<(usize, u64, u64)> = None;
    for at in candidates {
        let c1 = fused_capacity(&member_capacities[..at]);
        let c2 = fused_capacity(&member_capacities[at..]);
        if best.is_none_or(|(_, b1, b2)| c1 + c2 > b1 + b2) {
            best = Some((at, c1, c2));
        }
    }
    let (at, c1, c2) = best.expect("a fused node has at least one split point");
    let gain = c1 + c2;
    if gain as f64 >= (1.0 + alpha) * c_fused as f64 && gain > c_fused {
        SplitDecision::Split { at, c1, c2, c_fused }
    } else {
        retain(&format!(
            "capacity gain too small: {c1} + {c2} against {c_fused}"
        ))
    }
}

fn part_node(id: usize, members: &[FusedMember]) -> OperatorNode {
    match members {
        [single] => OperatorNode::new(id, single.kind.clone(), single.input_bytes, single.base_latency_us),
        _ => OperatorNode::fused(id, members.to_vec()),
    }
}

/// Replaces fused layer `layer` by one node per part. The first part keeps the
/// node's predecessors and weights; each later part depends on the previous
/// one, and later layers are renumbered.
pub fn replace_fused_node(graph: &ModelGraph, layer: usize, parts: &[&[FusedMember]]) -> ModelGraph {
    let node = graph.node(layer).expect("layer exists");
    assert!(!parts.is_empty());
    let shift = parts.len() - 1;
    let last_part = layer + shift;

    let mut nodes = Vec::with_capacity(graph.nodes.len() + shift);
    for n in &graph.nodes[..layer - 1] {
        nodes.push(n.clone());
    }
    for (i, part) in parts.iter().enumerate() {
        let mut p = part_node(layer + i, part);
        if i == 0 {
            p.predecessors = node.predecessors.clone();
            p.weight_ids = node.weight_ids.clone();
        } else {
            p.predecessors = vec![layer + i - 1];
        }
        nodes.push(p);
    }
    for n in &graph.nodes[layer..] {
        let mut n = n.clone();
        n.id += shift;
        for p in &mut n.predecessors {
            if *p == layer {
                *p = last_part;
            } else if *p > layer {
                *p += shift;
            }
        }
        nodes.push(n);
    }
    let out = ModelGraph {
        name: graph.name.clone(),
        chunk_size: graph.chunk_size,
        nodes,
        weights: graph.weights.clone(),
    };
    derive_weight_metadata(out).expect("weights stay referenced")
}

/// Splits fused layer `layer` at member index `at`.
pub fn split_node(graph: &ModelGraph, layer: usize, at: usize) -> ModelGraph {
    let members = &graph.node(layer).expect("layer exists").members;
    replace_fused_node(graph, layer, &[&members[..at], &members[at..]])
}

/// Expands fused layer `layer` into its individual members.
pub fn expand_node(graph: &ModelGraph, layer: usize) -> ModelGraph {
    let members = &graph.node(layer).expect("layer exists").members;
    let parts: Vec<&[FusedMember]> = members.chunks(1).collect();
    replace_fused_node(graph, layer, &parts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRecord {
    pub round: usize,
    /// Layer id of the fused node at the time of the split.
    pub layer: usize,
    pub kind: String,
    pub at: usize,
    pub c1: u64,
    pub c2: u64,
    pub c_fused: u64,
    pub penalty: FusionPenalty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub graph: ModelGraph,
    pub capacities: CapacityProfile,
    pub outcome: SolveOutcome,
    /// The solve before any split.
    pub initial: SolveOutcome,
    pub splits: Vec<SplitRecord>,
}

/// Everything the fusion loop needs to re-solve a modified graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveSetup {
    pub model: LatencyModel,
    pub thresholds: ThresholdConfig,
    pub m_peak: u64,
    pub lambda: f64,
    pub lcopg: LcopgConfig,
}

impl SolveSetup {
    pub fn capacities(&self, graph: &ModelGraph) -> CapacityProfile {
        capacity_profile(graph, &self.model, &self.thresholds)
    }

    pub fn solve(&self, graph: &ModelGraph) -> Result<(CapacityProfile, SolveOutcome), SolveError> {
        let caps = self.capacities(graph);
        let inst = build_instance(graph, &caps, self.m_peak, self.lambda)?;
        let out = solve_lcopg(&inst, &self.lcopg);
        Ok((caps, out))
    }
}

fn needs_adjustment(out: &SolveOutcome) -> bool {
    out.diagnostics.max_tier() >= 2 || !out.diagnostics.capacity_adjustments.is_empty()
}

/// Solve, and while the solve needed forced preloads or softened capacities,
/// split the fused node with the highest positive penalty that passes
/// [`split_check`], then re-solve. Performs at most
/// `min(max_rounds, initial fused node count)` splits.
pub fn adaptive_fusion(
    graph: &ModelGraph,
    setup: &SolveSetup,
    config: &FusionConfig,
) -> Result<FusionOutcome, SolveError> {
    let (mut caps, mut outcome) = setup.solve(graph)?;
    let initial = outcome.clone();
    let mut graph = graph.clone();
    let budget = config
        .max_rounds
        .min(graph.nodes.iter().filter(|n| n.is_fused()).count());
    let mut splits = Vec::new();

    while splits.len() < budget && needs_adjustment(&outcome) {
        let mut best: Option<(FusionPenalty, usize, usize, u64, u64, u64)> = None;
        for node in graph.nodes.iter().filter(|n| n.is_fused()) {
            let member_caps: Vec<u64> = node
                .members
                .iter()
                .map(|m| member_capacity(&setup.model, &setup.thresholds, m, graph.chunk_size))
                .collect();
            let SplitDecision::Split { at, c1, c2, c_fused } =
                split_check(node, &member_caps, config.alpha)
            else {
                continue;
            };
            let expanded = expand_node(&graph, node.id);
            let (_, unfused) = setup.solve(&expanded)?;
            let penalty = fusion_penalty(
                &expanded,
                &unfused.plan,
                &graph,
                &outcome.plan,
                config.lambda_pen,
                config.mu,
            )
            .expect("both plans come from the same weights");
            if penalty.score > 0.0 && best.as_ref().is_none_or(|b| penalty.score > b.0.score) {
                best = Some((penalty, node.id, at, c1, c2, c_fused));
            }
        }
        let Some((penalty, layer, at, c1, c2, c_fused)) = best else {
            break;
        };
        splits.push(SplitRecord {
            round: splits.len() + 1,
            layer,
            kind: graph.nodes[layer - 1].kind.clone(),
            at,
            c1,
            c2,
            c_fused,
            penalty,
        });
        graph = split_node(&graph, layer, at);
        (caps, outcome) = setup.solve(&graph)?;
    }

    Ok(FusionOutcome {
        graph,
        capacities: caps,
        outcome,
        initial,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{over_fused, t1, MIB};
    use crate::graph::validate;
    use crate::solver::{check_constraints, solve_exact, ExactLimits};

    fn setup(m_peak: u64) -> SolveSetup {
        SolveSetup {
            model: LatencyModel::default(),
            thresholds: ThresholdConfig::default(),
            m_peak,
            lambda: 0.9,
            lcopg: LcopgConfig::default(),
        }
    }

    #[test]
    fn fused_capacity_is_min() {
        assert_eq!(fused_capacity(&[8, 28]), 8);
        assert_eq!(fused_capacity(&[5]), 5);
        assert_eq!(fused_capacity(&[8, 0, 28]), 0);
    }

    #[test]
    fn capacity_profile_uses_member_minimum() {
        let g = over_fused();
        let caps = setup(64 * MIB).capacities(&g);
        assert_eq!(caps.0, vec![4, 8, 0, 8, 0, 8]);
    }

    #[test]
    fn split_at_class_boundary() {
        let node = &over_fused().nodes[1];
        assert_eq!(
            split_check(node, &[8, 28], 0.5),
            SplitDecision::Split {
                at: 1,
                c1: 8,
                c2: 28,
                c_fused: 8
            }
        );
    }

    #[test]
    fn hierarchical_blocks_are_retained() {
        let node = &over_fused().nodes[4];
        assert!(matches!(
            split_check(node, &[0, 0], 0.2),
            SplitDecision::Retain { .. }
        ));
        let node = OperatorNode::fused(
            1,
            vec![
                FusedMember::new("MatMul", MIB, 1.0),
                FusedMember::new("LayerNorm", MIB, 1.0),
            ],
        );
        assert!(matches!(
            split_check(&node, &[9, 0], 0.2),
            SplitDecision::Retain { .. }
        ));
    }

    #[test]
    fn split_without_gain_is_retained() {
        let node = OperatorNode::fused(
            1,
            vec![
                FusedMember::new("Add", MIB, 1.0),
                FusedMember::new("Mul", MIB, 1.0),
            ],
        );
        // C_v1 + C_v2 = C_fused = 0
        assert!(matches!(
            split_check(&node, &[0, 0], 0.1),
            SplitDecision::Retain { .. }
        ));
        // 3 + 3 >= 1.1 * 3
        assert!(matches!(
            split_check(&node, &[3, 3], 0.1),
            SplitDecision::Split { .. }
        ));
        // 3 + 3 < 2.5 * 3
        assert!(matches!(
            split_check(&node, &[3, 3], 1.5),
            SplitDecision::Retain { .. }
        ));
    }

    #[test]
    fn split_picks_largest_sum_then_earliest() {
        let node = OperatorNode::fused(
            1,
            vec![
                FusedMember::new("Add", MIB, 1.0),
                FusedMember::new("Mul", MIB, 1.0),
                FusedMember::new("GeLU", MIB, 1.0),
            ],
        );
        // at=1: 2 + min(5,5) = 7; at=2: min(2,5) + 5 = 7 -> earliest.
        assert_eq!(
            split_check(&node, &[2, 5, 5], 0.2),
            SplitDecision::Split {
                at: 1,
                c1: 2,
                c2: 5,
                c_fused: 2
            }
        );
    }

    #[test]
    fn split_renumbers_and_rewires() {
        let g = over_fused();
        let s = split_node(&g, 2, 1);
        assert!(validate(&s).is_empty());
        assert_eq!(s.num_layers(), 7);
        assert_eq!(s.nodes[1].kind, "MatMul+Add");
        assert!(!s.nodes[1].is_fused());
        assert_eq!(s.nodes[1].weight_ids, vec!["ffn".to_string()]);
        assert_eq!(s.nodes[2].kind, "GeLU");
        assert_eq!(s.nodes[2].predecessors, vec![2]);
        assert_eq!(s.nodes[3].predecessors, vec![3]);
        assert_eq!(s.weights["proj"].first_consumer, 5);
        let latency: f64 = s.nodes.iter().map(|n| n.base_latency_us).sum();
        let before: f64 = g.nodes.iter().map(|n| n.base_latency_us).sum();
        assert_eq!(latency, before);
    }

    #[test]
    fn identical_plans_have_zero_penalty() {
        let g = t1();
        let plan = OverlapPlan::full_preload(&g);
        let p = fusion_penalty(&g, &plan, &g, &plan, 0.5, 0.5).unwrap();
        assert_eq!(p.score, 0.0);
        assert!(p.new_preloads.is_empty());
    }

    #[test]
    fn single_new_preload_is_its_bytes() {
        let g = t1();
        let base = crate::solver::tests::t1_optimal_plan();
        let mut fused = base.clone();
        fused.preload_weight("w4");
        let p = fusion_penalty(&g, &base, &g, &fused, 1.0, 0.0).unwrap();
        assert_eq!(p.score, (2 * MIB) as f64);
        assert_eq!(p.new_preloads, vec!["w4".to_string()]);
    }

    #[test]
    fn penalty_rejects_mismatched_graphs() {
        let g = t1();
        let mut other = t1();
        other.weights.get_mut("w1").unwrap().bytes += 1;
        let plan = OverlapPlan::full_preload(&g);
        assert!(fusion_penalty(&g, &plan, &other, &plan, 1.0, 1.0).is_err());
    }

    #[test]
    fn t1_fused_layers_penalty_matches_plan_diff() {
        let unfused = t1();
        let fused = {
            let mut nodes = vec![unfused.nodes[0].clone()];
            let mut f = OperatorNode::fused(
                2,
                vec![
                    FusedMember::new("GeLU", MIB * 6 / 10, 100.0),
                    FusedMember::new("Add", MIB * 4 / 10, 100.0),
                ],
            )
            .with_weights(["w2", "w3"]);
            f.predecessors = vec![1];
            nodes.push(f);
            let mut ln = unfused.nodes[3].clone();
            ln.id = 3;
            ln.predecessors = vec![2];
            nodes.push(ln);
            derive_weight_metadata(ModelGraph {
                name: "t1-fused".into(),
                chunk_size: MIB,
                nodes,
                weights: unfused.weights.clone(),
            })
            .unwrap()
        };
        let su = setup(2 * MIB);
        assert_eq!(su.capacities(&fused).0, vec![2, 1, 0]);

        let solve = |g: &ModelGraph| {
            let inst = build_instance(g, &su.capacities(g), 2 * MIB, 0.5).unwrap();
            let out = solve_exact(&inst, ExactLimits::default()).unwrap();
            assert!(check_constraints(&inst, &out.plan).is_empty());
            out.plan
        };
        let base = solve(&unfused);
        let with_fusion = solve(&fused);
        let p = fusion_penalty(&unfused, &base, &fused, &with_fusion, 0.5, 0.5).unwrap();

        // Independent diff of the two plans.
        let new: u64 = with_fusion
            .preload
            .iter()
            .filter(|w| !base.preload.contains(*w))
            .map(|w| unfused.weights[w].bytes)
            .sum();
        let mut grew = 0u64;
        for s in &with_fusion.streams {
            if let Some(b) = base.stream(&s.weight) {
                let before = unfused.weights[&s.weight].first_consumer - b.z;
                let after = fused.weights[&s.weight].first_consumer - s.z;
                grew += after.saturating_sub(before) as u64;
            }
        }
        assert_eq!(p.new_preload_bytes, new);
        assert_eq!(p.distance_increase, grew);
        assert_eq!(p.score, 0.5 * new as f64 + 0.5 * grew as f64);
        assert!(p.score > 0.0);
    }

    #[test]
    fn no_fused_nodes_is_a_fixpoint() {
        let g = t1();
        let out = adaptive_fusion(&g, &setup(2 * MIB), &FusionConfig::default()).unwrap();
        assert_eq!(out.graph, g);
        assert!(out.splits.is_empty());
        assert_eq!(out.outcome, out.initial);
    }

    #[test]
    fn over_fused_block_is_split_once() {
        let g = over_fused();
        let su = setup(64 * MIB);
        let out = adaptive_fusion(&g, &su, &FusionConfig::default()).unwrap();
        assert_eq!(out.splits.len(), 1);
        let s = &out.splits[0];
        assert_eq!((s.layer, s.at, s.c1, s.c2, s.c_fused), (2, 1, 8, 28, 8));
        let before = out.initial.plan.preloaded_bytes(&g);
        let after = out.outcome.plan.preloaded_bytes(&out.graph);
        assert!(after < before, "{after} !< {before}");
        assert!(out.initial.diagnostics.forced_preloads.contains(&"proj".to_string()));
        assert!(out.outcome.diagnostics.forced_preloads.is_empty());
        // The hierarchical block survives.
        assert!(out.graph.nodes.iter().any(|n| n.kind == "LayerNorm+Softmax"));
        // Schedulable capacity grows by c1 + c2 - c_fused.
        assert_eq!(
            out.capacities.total(),
            su.capacities(&g).total() + s.c1 + s.c2 - s.c_fused
        );
    }

    #[test]
    fn round_budget_caps_splits() {
        // Two over-fused blocks in sequence, each starving its consumer.
        let g = over_fused();
        let mut g2 = g.clone();
        let offset = g.num_layers();
        for n in &g.nodes {
            let mut n = n.clone();
            n.id += offset;
            n.predecessors = vec![n.id - 1];
            n.weight_ids = n.weight_ids.iter().map(|w| format!("{w}2")).collect();
            g2.nodes.push(n);
        }
        for w in g.weights.values() {
            g2.weights
                .insert(format!("{}2", w.id), crate::graph::WeightTensor::new(format!("{}2", w.id), w.bytes));
        }
        let g2 = derive_weight_metadata(g2).unwrap();
        let su = setup(64 * MIB);
        let one = adaptive_fusion(
            &g2,
            &su,
            &FusionConfig {
                max_rounds: 1,
                ..FusionConfig::default()
            },
        )
        .unwrap();
        assert_eq!(one.splits.len(), 1);
        let all = adaptive_fusion(&g2, &su, &FusionConfig::default()).unwrap();
        assert_eq!(all.splits.len(), 2);
    }
}

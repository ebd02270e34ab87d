//! Load-capacity-aware plan generation over a rolling window of layers.
//!
//! Windows partition the execution order into blocks of consecutive layers.
//! Each block optimizes the weights first consumed inside it, on top of the
//! chunk placements already fixed by earlier blocks. When a block cannot be
//! placed, fallbacks apply in order:
//!
//! 1. soft thresholding: the block's layer capacities are scaled once by the
//!    soft-threshold factor;
//! 2. incremental preloading: the largest still-streamed weight of the block
//!    moves to the preload set and the block is re-run, repeatedly;
//! 3. greedy: when the time limit expires, the remaining suffix is planned
//!    by the greedy heuristic.
//!
//! A final refinement moves streamed weights into the preload set whenever
//! that lowers the objective; dropping a stream only frees capacity, so the
//! plan stays feasible.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use super::greedy::greedy_fill;
use super::schedule::{latest_srpt, lexmin_assignment, Job};
use super::{objective, objective_value, Diagnostics, OpgInstance, OverlapPlan, SolveOutcome, SolveStatus, Tier};
use crate::graph::WeightTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcopgConfig {
    pub time_limit: Duration,
    /// Layers per window.
    pub window: usize,
    pub soft_factor: f64,
    /// Run the preload refinement after the windows.
    pub refine: bool,
}

impl Default for LcopgConfig {
    fn default() -> Self {
        Self {
            time_limit: Duration::from_secs(150),
            window: 64,
            soft_factor: 1.25,
            refine: true,
        }
    }
}

pub fn solve_lcopg(instance: &OpgInstance, config: &LcopgConfig) -> SolveOutcome {
    let started = Instant::now();
    let g = &instance.graph;
    let n = g.num_layers();
    let chunk_limit = instance.m_peak / instance.chunk_size;
    let window = config.window.max(1);

    let mut capacities = instance.capacities.0.clone();
    let mut residual = instance.limits_for(&instance.capacities);
    let mut preload: BTreeSet<String> = instance.mandatory.clone();
    let mut counts: BTreeMap<String, Vec<(usize, u64)>> = BTreeMap::new();
    let mut diagnostics = Diagnostics::default();
    diagnostics.fire(Tier::Window);

    let mut start = 1;
    while start <= n {
        let end = (start + window - 1).min(n);

        if started.elapsed() > config.time_limit {
            diagnostics.fire(Tier::Greedy);
            diagnostics
                .notes
                .push(format!("time limit reached at layer {start}; greedy for the rest"));
            let rest = g
                .weights
                .values()
                .filter(|w| w.first_consumer >= start && !preload.contains(&w.id));
            let (greedy_counts, forced) = greedy_fill(&mut residual, rest);
            counts.extend(greedy_counts);
            for id in forced {
                preload.insert(id.clone());
                diagnostics.forced_preloads.push(id);
            }
            break;
        }

        let mut members: Vec<&WeightTensor> = g
            .weights
            .values()
            .filter(|w| (start..=end).contains(&w.first_consumer) && !preload.contains(&w.id))
            .collect();
        let mut softened = false;

        loop {
            if members.is_empty() {
                break;
            }
            let jobs: Vec<(u64, usize)> = members
                .iter()
                .map(|w| (w.chunk_count, w.first_consumer - 1))
                .collect();
            if let Some(latest) = latest_srpt(&residual, &jobs) {
                // SRPT fixes the optimal z per weight; the committed chunks are
                // the canonical (lexicographically smallest) placement for it.
                let fixed: Vec<Job> = members
                    .iter()
                    .zip(&latest)
                    .map(|(w, alloc)| Job {
                        chunks: w.chunk_count,
                        release: alloc.first().map_or(1, |a| a.0),
                        deadline: w.first_consumer - 1,
                        forced_first: true,
                    })
                    .collect();
                let placed = lexmin_assignment(&residual, &fixed).unwrap_or(latest);
                for (w, alloc) in members.iter().zip(placed) {
                    for &(layer, c) in &alloc {
                        residual[layer - 1] -= c;
                    }
                    counts.insert(w.id.clone(), alloc);
                }
                break;
            }

            if !softened {
                softened = true;
                let mut changed = false;
                for layer in start..=end {
                    let old = capacities[layer - 1];
                    let new = (old as f64 * config.soft_factor).ceil() as u64;
                    if new > old {
                        changed = true;
                        capacities[layer - 1] = new;
                        diagnostics.capacity_adjustments.insert(layer, new);
                        let gain = new.min(chunk_limit) - old.min(chunk_limit);
                        residual[layer - 1] += gain;
                    }
                }
                if changed {
                    diagnostics.fire(Tier::SoftThreshold);
                    continue;
                }
            }

            // Largest weight first, smallest id on ties.
            let (pos, _) = members
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.bytes.cmp(&b.bytes).then(b.id.cmp(&a.id)))
                .expect("members is non-empty");
            let w = members.remove(pos);
            preload.insert(w.id.clone());
            diagnostics.forced_preloads.push(w.id.clone());
            diagnostics.fire(Tier::IncrementalPreload);
        }
        start = end + 1;
    }

    if config.refine {
        for id in refine_preload(instance, &preload, &counts) {
            counts.remove(&id);
            preload.insert(id.clone());
            diagnostics.refined_preloads.push(id);
        }
    }

    let plan = OverlapPlan::from_counts(g, preload, &counts);
    let status = if diagnostics.tiers_fired.contains(&Tier::Greedy) {
        SolveStatus::Heuristic
    } else {
        SolveStatus::Feasible
    };
    SolveOutcome {
        objective: objective(instance, &plan),
        plan,
        status,
        diagnostics,
    }
}

/// Streamed weights whose move to the preload set minimizes the objective,
/// placements of the others kept fixed.
///
/// Removing r of k streams changes the objective by
/// Σ_R (λ·b/T − c_r·d) plus a term independent of R, with
/// c_r = (1−λ)/(N·(k−r)); for each r the best R is the r smallest scores.
fn refine_preload(
    instance: &OpgInstance,
    preload: &BTreeSet<String>,
    counts: &BTreeMap<String, Vec<(usize, u64)>>,
) -> Vec<String> {
    let g = &instance.graph;
    let lambda = instance.lambda;
    let total = g.total_weight_bytes();
    let n = g.num_layers();
    let streams: Vec<(&str, u64, u64)> = counts
        .iter()
        .filter_map(|(id, alloc)| {
            let z = alloc.iter().find(|a| a.1 > 0)?.0;
            let w = &g.weights[id];
            Some((id.as_str(), w.bytes, (w.first_consumer - z) as u64))
        })
        .collect();
    let k = streams.len();
    let preloaded: u64 = preload.iter().map(|id| g.weights[id].bytes).sum();
    let distance: u64 = streams.iter().map(|s| s.2).sum();
    let mut best = objective_value(lambda, preloaded, total, distance, n, k);
    let mut chosen: Vec<&str> = Vec::new();
    let mut order: Vec<usize> = (0..k).collect();
    for r in 1..=k {
        let c = if r == k { 0.0 } else { (1.0 - lambda) / (n as f64 * (k - r) as f64) };
        let score = |i: usize| lambda * streams[i].1 as f64 / total as f64 - c * streams[i].2 as f64;
        order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(streams[a].0.cmp(streams[b].0)));
        let moved = &order[..r];
        let bytes: u64 = moved.iter().map(|&i| streams[i].1).sum();
        let dist: u64 = moved.iter().map(|&i| streams[i].2).sum();
        let v = objective_value(lambda, preloaded + bytes, total, distance - dist, n, k - r);
        if v < best - 1e-15 {
            best = v;
            chosen = moved.iter().map(|&i| streams[i].0).collect();
        }
    }
    let mut ids: Vec<String> = chosen.into_iter().map(str::to_owned).collect();
    ids.sort();
    ids
}

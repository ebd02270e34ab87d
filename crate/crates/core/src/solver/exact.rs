//! Branch-and-bound over preload indicators and earliest-load indices.
//!
//! The objective depends only on which weights are preloaded and on each
//! streamed weight's z, so the search enumerates those and checks chunk
//! feasibility with EDF. Chunks of one weight are interchangeable; once the
//! best (preload, z) pair is known, the lexicographically smallest chunk
//! assignment is built for it.
//!
//! Enumeration order is lexicographic: indicator vector over weights in id
//! order (stream before preload), then the z vector (ascending). Only strict
//! improvements replace the incumbent, so ties resolve to the smallest key.

use std::collections::{BTreeMap, BTreeSet};

use super::schedule::{edf_feasible, lexmin_assignment, Job};
use super::{
    objective_value, Diagnostics, OpgInstance, OverlapPlan, SolveOutcome, SolveStatus, Tier,
};
use crate::error::SolveError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactLimits {
    /// Search nodes explored before giving up on a proof of optimality.
    pub node_budget: u64,
    /// Maximum streamable chunks accepted.
    pub oracle_bound: u64,
}

impl Default for ExactLimits {
    fn default() -> Self {
        Self {
            node_budget: 5_000_000,
            oracle_bound: 24,
        }
    }
}

const TIE_EPS: f64 = 1e-12;

struct Item {
    id: String,
    bytes: u64,
    chunks: u64,
    /// i_w - 1: the last layer allowed to transform this weight.
    deadline: usize,
    mandatory: bool,
    /// Smallest loading distance achievable with the layer limits alone.
    min_distance: u64,
}

struct Search {
    items: Vec<Item>,
    limits: Vec<u64>,
    lambda: f64,
    total_bytes: u64,
    num_layers: usize,
    budget: u64,
    nodes: u64,
    truncated: bool,
    best: Option<(f64, Vec<bool>, Vec<usize>)>,
}

impl Search {
    fn tick(&mut self) -> bool {
        self.nodes += 1;
        if self.nodes > self.budget {
            self.truncated = true;
        }
        !self.truncated
    }

    fn best_value(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.0)
    }

    fn prunable(&self, lower_bound: f64) -> bool {
        lower_bound >= self.best_value() - TIE_EPS
    }

    fn preload_term(&self, preloaded: u64) -> f64 {
        objective_value(self.lambda, preloaded, self.total_bytes, 0, self.num_layers, 0)
    }

    /// Indicator DFS. `preload[i]` is decided for i < depth.
    fn choose_preloads(&mut self, depth: usize, preload: &mut Vec<bool>, preloaded: u64) {
        if !self.tick() {
            return;
        }
        let any_streamed = preload.iter().any(|p| !p);
        let lb = self.preload_term(preloaded)
            + if any_streamed {
                (1.0 - self.lambda) / self.num_layers as f64
            } else {
                0.0
            };
        if self.prunable(lb) {
            return;
        }
        // Streams decided so far must fit on their own.
        let jobs: Vec<Job> = preload
            .iter()
            .enumerate()
            .filter(|(_, p)| !**p)
            .map(|(i, _)| self.relaxed_job(i))
            .collect();
        if !edf_feasible(&self.limits, &jobs) {
            return;
        }

        if depth == self.items.len() {
            let streamed: Vec<usize> = (0..self.items.len()).filter(|&i| !preload[i]).collect();
            let mut z = Vec::with_capacity(streamed.len());
            self.choose_z(&streamed, &mut z, preload, preloaded, 0);
            return;
        }

        if !self.items[depth].mandatory {
            preload.push(false);
            self.choose_preloads(depth + 1, preload, preloaded);
            preload.pop();
        }
        preload.push(true);
        let bytes = self.items[depth].bytes;
        self.choose_preloads(depth + 1, preload, preloaded + bytes);
        preload.pop();
    }

    fn relaxed_job(&self, i: usize) -> Job {
        Job {
            chunks: self.items[i].chunks,
            release: 1,
            deadline: self.items[i].deadline,
            forced_first: false,
        }
    }

    /// z DFS over streamed weights; `z[k]` belongs to `streamed[k]`.
    fn choose_z(
        &mut self,
        streamed: &[usize],
        z: &mut Vec<usize>,
        preload: &[bool],
        preloaded: u64,
        distance: u64,
    ) {
        if !self.tick() {
            return;
        }
        let k = z.len();
        let remaining_min: u64 = streamed[k..].iter().map(|&i| self.items[i].min_distance).sum();
        let lb = objective_value(
            self.lambda,
            preloaded,
            self.total_bytes,
            distance + remaining_min,
            self.num_layers,
            streamed.len(),
        );
        if self.prunable(lb) {
            return;
        }
        let jobs: Vec<Job> = streamed
            .iter()
            .enumerate()
            .map(|(pos, &i)| match z.get(pos) {
                Some(&zi) => Job {
                    chunks: self.items[i].chunks,
                    release: zi,
                    deadline: self.items[i].deadline,
                    forced_first: true,
                },
                None => self.relaxed_job(i),
            })
            .collect();
        if !edf_feasible(&self.limits, &jobs) {
            return;
        }
        if k == streamed.len() {
            // lb is exact at a leaf
            self.best = Some((lb, preload.to_vec(), z.clone()));
            return;
        }
        let item = &self.items[streamed[k]];
        let deadline = item.deadline;
        let consumer = deadline as u64 + 1;
        for zi in 1..=deadline {
            let d = consumer - zi as u64;
            z.push(zi);
            self.choose_z(streamed, z, preload, preloaded, distance + d);
            z.pop();
            if self.truncated {
                return;
            }
        }
    }
}

/// Smallest distance d with enough capacity in the d layers before the consumer.
fn min_distance(limits: &[u64], chunks: u64, deadline: usize) -> u64 {
    let mut acc = 0u64;
    for layer in (1..=deadline).rev() {
        acc += limits[layer - 1];
        if acc >= chunks {
            return (deadline + 1 - layer) as u64;
        }
    }
    1
}

/// Exact solve with proof of optimality. Returns `Feasible` instead of
/// `Optimal` when the node budget runs out before the search completes.
pub fn solve_exact(instance: &OpgInstance, limits: ExactLimits) -> Result<SolveOutcome, SolveError> {
    let chunks = instance.streamable_chunks();
    if chunks > limits.oracle_bound {
        return Err(SolveError::OverOracleBound {
            chunks,
            bound: limits.oracle_bound,
        });
    }
    let g = &instance.graph;
    let layer_limits = instance.limits_for(&instance.capacities);
    let items: Vec<Item> = g
        .weights
        .values()
        .map(|w| {
            let deadline = w.first_consumer.saturating_sub(1);
            Item {
                id: w.id.clone(),
                bytes: w.bytes,
                chunks: w.chunk_count,
                deadline,
                mandatory: instance.mandatory.contains(&w.id) || deadline == 0,
                min_distance: min_distance(&layer_limits, w.chunk_count, deadline),
            }
        })
        .collect();

    let mut search = Search {
        items,
        limits: layer_limits,
        lambda: instance.lambda,
        total_bytes: g.total_weight_bytes(),
        num_layers: g.num_layers(),
        budget: limits.node_budget,
        nodes: 0,
        truncated: false,
        best: None,
    };
    let mut preload = Vec::with_capacity(search.items.len());
    search.choose_preloads(0, &mut preload, 0);

    let mut diagnostics = Diagnostics {
        nodes_explored: search.nodes,
        ..Diagnostics::default()
    };
    diagnostics.fire(Tier::Exact);

    let status = if search.truncated {
        diagnostics
            .notes
            .push(format!("node budget {} exhausted", limits.node_budget));
        SolveStatus::Feasible
    } else {
        SolveStatus::Optimal
    };

    let plan = match search.best.take() {
        Some((_, preload, z)) => {
            let streamed: Vec<usize> = (0..search.items.len()).filter(|&i| !preload[i]).collect();
            let jobs: Vec<Job> = streamed
                .iter()
                .zip(&z)
                .map(|(&i, &zi)| Job {
                    chunks: search.items[i].chunks,
                    release: zi,
                    deadline: search.items[i].deadline,
                    forced_first: true,
                })
                .collect();
            let alloc = lexmin_assignment(&search.limits, &jobs)
                .expect("incumbent was checked feasible");
            let preload_set: BTreeSet<String> = (0..search.items.len())
                .filter(|&i| preload[i])
                .map(|i| search.items[i].id.clone())
                .collect();
            let counts: BTreeMap<String, Vec<(usize, u64)>> = streamed
                .iter()
                .zip(alloc)
                .map(|(&i, a)| (search.items[i].id.clone(), a))
                .collect();
            OverlapPlan::from_counts(g, preload_set, &counts)
        }
        // Only reachable when the budget ran out before any leaf.
        None => OverlapPlan::full_preload(g),
    };
    let objective = super::objective(instance, &plan);
    Ok(SolveOutcome {
        plan,
        status,
        objective,
        diagnostics,
    })
}

use std::collections::{BTreeMap, BTreeSet};

use super::{OpgInstance, OverlapPlan};
use crate::graph::WeightTensor;

/// Weight id -> (layer, chunks) placements.
type Counts = BTreeMap<String, Vec<(usize, u64)>>;

/// Fills each weight's chunks into the latest layers before its consumer,
/// visiting weights by decreasing consumer index. A weight that does not fit
/// is preloaded whole. `residual` is consumed in place.
pub(crate) fn greedy_fill<'a>(
    residual: &mut [u64],
    weights: impl IntoIterator<Item = &'a WeightTensor>,
) -> (Counts, Vec<String>) {
    let mut order: Vec<&WeightTensor> = weights.into_iter().collect();
    order.sort_by(|a, b| b.first_consumer.cmp(&a.first_consumer).then(a.id.cmp(&b.id)));

    let mut counts = BTreeMap::new();
    let mut preloaded = Vec::new();
    for w in order {
        let mut rem = w.chunk_count;
        let mut taken: Vec<(usize, u64)> = Vec::new();
        for layer in (1..w.first_consumer).rev() {
            if rem == 0 {
                break;
            }
            let take = rem.min(residual[layer - 1]);
            if take > 0 {
                residual[layer - 1] -= take;
                rem -= take;
                taken.push((layer, take));
            }
        }
        if rem > 0 {
            for (layer, c) in taken {
                residual[layer - 1] += c;
            }
            preloaded.push(w.id.clone());
        } else {
            taken.reverse();
            counts.insert(w.id.clone(), taken);
        }
    }
    (counts, preloaded)
}

/// Standalone greedy plan.
pub fn greedy_plan(instance: &OpgInstance) -> OverlapPlan {
    let g = &instance.graph;
    let mut residual = instance.limits_for(&instance.capacities);
    let candidates = g
        .weights
        .values()
        .filter(|w| !instance.mandatory.contains(&w.id));
    let (counts, forced) = greedy_fill(&mut residual, candidates);
    let preload: BTreeSet<String> = instance
        .mandatory
        .iter()
        .cloned()
        .chain(forced)
        .collect();
    OverlapPlan::from_counts(g, preload, &counts)
}

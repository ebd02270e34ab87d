//! Brute-force reference for tiny instances. Deliberately shares no code with
//! the solvers: it enumerates every per-layer chunk distribution directly.
#![allow(dead_code)]

use streamplan::fixtures::TinyInstance;

pub struct Enumerated {
    pub best: f64,
    pub feasible_plans: u64,
}

struct Item {
    bytes: u64,
    chunks: u64,
    consumer: usize,
}

struct Walk {
    items: Vec<Item>,
    layer_cap: Vec<u64>,
    lambda: f64,
    layers: usize,
    total_bytes: u64,
    count: u64,
    best: f64,
    stream_all: bool,
    best_distance: Option<usize>,
}

impl Walk {
    fn score(&self, preloaded: u64, distances: &[usize]) -> f64 {
        let a = if self.total_bytes == 0 {
            0.0
        } else {
            preloaded as f64 / self.total_bytes as f64
        };
        let b = if distances.is_empty() {
            0.0
        } else {
            distances.iter().sum::<usize>() as f64 / (self.layers * distances.len()) as f64
        };
        self.lambda * a + (1.0 - self.lambda) * b
    }

    fn weight(&mut self, k: usize, preloaded: u64, distances: &mut Vec<usize>) {
        if k == self.items.len() {
            self.count += 1;
            let s = self.score(preloaded, distances);
            if s < self.best {
                self.best = s;
            }
            let d: usize = distances.iter().sum();
            if self.best_distance.is_none_or(|b| d < b) {
                self.best_distance = Some(d);
            }
            return;
        }
        let (bytes, chunks, consumer) = {
            let it = &self.items[k];
            (it.bytes, it.chunks, it.consumer)
        };
        if consumer == 1 || !self.stream_all {
            self.weight(k + 1, preloaded + bytes, distances);
        }
        // stream, unless consumed by the first layer
        if consumer > 1 {
            self.spread(k, 1, chunks, usize::MAX, preloaded, distances);
        }
    }

    /// Distributes `left` chunks of item `k` over layers `layer..consumer`.
    fn spread(&mut self, k: usize, layer: usize, left: u64, first: usize, preloaded: u64, distances: &mut Vec<usize>) {
        let consumer = self.items[k].consumer;
        if left == 0 {
            distances.push(consumer - first);
            self.weight(k + 1, preloaded, distances);
            distances.pop();
            return;
        }
        if layer >= consumer {
            return;
        }
        let room = self.layer_cap[layer - 1].min(left);
        for take in 0..=room {
            self.layer_cap[layer - 1] -= take;
            let f = if take > 0 && first == usize::MAX { layer } else { first };
            self.spread(k, layer + 1, left - take, f, preloaded, distances);
            self.layer_cap[layer - 1] += take;
        }
    }
}

/// Minimum objective over every plan satisfying completeness, window,
/// per-layer byte and capacity constraints.
pub fn enumerate(inst: &TinyInstance) -> Enumerated {
    run(inst, false).0
}

/// Smallest total loading distance when every weight not consumed by layer 1
/// is streamed; `None` if that is infeasible.
pub fn min_distance_all_streamed(inst: &TinyInstance) -> Option<usize> {
    run(inst, true).1
}

fn run(inst: &TinyInstance, stream_all: bool) -> (Enumerated, Option<usize>) {
    let g = &inst.graph;
    let s = g.chunk_size;
    let mut items = Vec::new();
    for w in g.weights.values() {
        let consumer = g
            .nodes
            .iter()
            .find(|n| n.weight_ids.contains(&w.id))
            .expect("referenced")
            .id;
        items.push(Item {
            bytes: w.bytes,
            chunks: w.bytes.div_ceil(s),
            consumer,
        });
    }
    let layer_cap = inst
        .capacities
        .iter()
        .map(|&c| c.min(inst.m_peak / s))
        .collect();
    let mut walk = Walk {
        total_bytes: items.iter().map(|i| i.bytes).sum(),
        items,
        layer_cap,
        lambda: inst.lambda,
        layers: g.nodes.len(),
        count: 0,
        best: f64::INFINITY,
        stream_all,
        best_distance: None,
    };
    walk.weight(0, 0, &mut Vec::new());
    (
        Enumerated {
            best: walk.best,
            feasible_plans: walk.count,
        },
        walk.best_distance,
    )
}

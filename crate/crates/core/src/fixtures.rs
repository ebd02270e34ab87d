//! Synthetic model graphs and workloads.
//!
//! Real model dumps are not ingested; these generators produce chains with
//! realistic operator mixes and size/latency scaling knobs. All generators
//! are deterministic in their arguments (and seed, where taken).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{derive_weight_metadata, FusedMember, ModelGraph, OperatorNode, WeightTensor};
use crate::simulator::HardwareConfig;

pub const MIB: u64 = 1 << 20;

fn finish(name: &str, chunk_size: u64, nodes: Vec<OperatorNode>, weights: Vec<WeightTensor>) -> ModelGraph {
    let graph = ModelGraph {
        name: name.to_owned(),
        chunk_size,
        nodes,
        weights: weights.into_iter().map(|w| (w.id.clone(), w)).collect::<BTreeMap<_, _>>(),
    };
    derive_weight_metadata(graph).expect("generated weights are referenced")
}

fn chain(nodes: &mut [OperatorNode]) {
    for n in nodes.iter_mut() {
        n.predecessors = if n.id > 1 { vec![n.id - 1] } else { Vec::new() };
    }
}

/// Four layers with weights of 1, 2, 1 and 2 chunks, weight `w<l>` consumed
/// at layer `l`. Under the default latency model the capacities are
/// `[2, 2, 1, 0]`.
pub fn t1() -> ModelGraph {
    let s = MIB;
    let mut nodes = vec![
        OperatorNode::new(1, "MatMul", s + s / 5, 400.0).with_weights(["w1"]),
        OperatorNode::new(2, "GeLU", s * 6 / 10, 100.0).with_weights(["w2"]),
        OperatorNode::new(3, "Add", s * 4 / 10, 100.0).with_weights(["w3"]),
        OperatorNode::new(4, "LayerNorm", s, 200.0).with_weights(["w4"]),
    ];
    chain(&mut nodes);
    let weights = vec![
        WeightTensor::new("w1", s),
        WeightTensor::new("w2", 2 * s),
        WeightTensor::new("w3", s),
        WeightTensor::new("w4", 2 * s),
    ];
    finish("t1", s, nodes, weights)
}

/// Knobs for the transformer-like generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub blocks: usize,
    /// Bytes of one MatMul weight.
    pub weight_bytes: u64,
    /// Activation bytes flowing between layers.
    pub activation_bytes: u64,
    pub matmul_us: f64,
    pub elemental_us: f64,
    pub norm_us: f64,
    pub chunk_size: u64,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self {
            blocks: 48,
            weight_bytes: 8 * MIB,
            activation_bytes: 4 * MIB,
            matmul_us: 3000.0,
            elemental_us: 300.0,
            norm_us: 400.0,
            chunk_size: MIB,
        }
    }
}

/// Repeated `[MatMul, Add, GeLU, LayerNorm]` blocks; each MatMul owns a
/// weight and each Add a small bias.
pub fn transformer(spec: &TransformerSpec) -> ModelGraph {
    let mut nodes = Vec::with_capacity(spec.blocks * 4);
    let mut weights = Vec::new();
    let act = spec.activation_bytes;
    let bias = (spec.weight_bytes / 256).max(1);
    for b in 0..spec.blocks {
        let base = b * 4;
        let mm = format!("b{b:03}.mm");
        let bs = format!("b{b:03}.bias");
        nodes.push(OperatorNode::new(base + 1, "MatMul", act, spec.matmul_us).with_weights([mm.clone()]));
        nodes.push(OperatorNode::new(base + 2, "Add", act, spec.elemental_us).with_weights([bs.clone()]));
        nodes.push(OperatorNode::new(base + 3, "GeLU", act, spec.elemental_us));
        nodes.push(OperatorNode::new(base + 4, "LayerNorm", act, spec.norm_us));
        weights.push(WeightTensor::new(mm, spec.weight_bytes));
        weights.push(WeightTensor::new(bs, bias));
    }
    chain(&mut nodes);
    finish(&format!("transformer-{}", spec.blocks), spec.chunk_size, nodes, weights)
}

/// Conv chains: `[Conv, BatchNorm, ReLU]` stages with weights growing by
/// stage.
pub fn conv_chain(stages: usize, chunk_size: u64) -> ModelGraph {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for s in 0..stages {
        let base = s * 3;
        let act = (8 * MIB) >> (s / 4).min(3);
        let wbytes = (MIB / 2) << (s / 4).min(4);
        let id = format!("conv{s:03}");
        nodes.push(OperatorNode::new(base + 1, "Conv", act, 1500.0).with_weights([id.clone()]));
        nodes.push(OperatorNode::new(base + 2, "BatchNorm", act, 200.0));
        nodes.push(OperatorNode::new(base + 3, "ReLU", act, 120.0));
        weights.push(WeightTensor::new(id, wbytes));
    }
    chain(&mut nodes);
    finish(&format!("conv-{stages}"), chunk_size, nodes, weights)
}

const RANDOM_KINDS: [&str; 8] = [
    "MatMul", "Conv", "Add", "GeLU", "ReLU", "Mul", "LayerNorm", "Softmax",
];

/// A random DAG in execution order with mixed operator classes. Predecessors
/// are drawn from the previous few layers; about 70% of layers own a weight
/// and a few weights are shared with a later layer.
pub fn random_graph(seed: u64, layers: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = MIB;
    let mut nodes = Vec::with_capacity(layers);
    let mut weights = Vec::new();
    for id in 1..=layers {
        let kind = RANDOM_KINDS[rng.gen_range(0..RANDOM_KINDS.len())];
        let input = rng.gen_range(chunk / 4..=6 * chunk);
        let latency = rng.gen_range(50.0..4000.0);
        let mut node = OperatorNode::new(id, kind, input, latency);
        if id > 1 {
            node.predecessors.push(id - 1);
            if id > 2 && rng.gen_bool(0.2) {
                node.predecessors.push(rng.gen_range(1.max(id.saturating_sub(6))..id - 1));
            }
            node.predecessors.sort_unstable();
            node.predecessors.dedup();
        }
        if rng.gen_bool(0.7) {
            let wid = format!("w{id:03}");
            let bytes = rng.gen_range(1..=10 * chunk);
            weights.push(WeightTensor::new(wid.clone(), bytes));
            node.weight_ids.push(wid);
        }
        nodes.push(node);
    }
    // shared weights
    let ids: Vec<String> = weights.iter().map(|w| w.id.clone()).collect();
    for wid in ids {
        if rng.gen_bool(0.05) {
            let owner: usize = wid[1..].parse().expect("generated id");
            if owner < layers {
                let later = rng.gen_range(owner + 1..=layers);
                let node = &mut nodes[later - 1];
                if !node.weight_ids.contains(&wid) {
                    node.weight_ids.push(wid);
                }
            }
        }
    }
    finish(&format!("random-{seed}"), chunk, nodes, weights)
}

/// Parameters of a tiny random instance for cross-checking exact solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub graph: ModelGraph,
    pub capacities: Vec<u64>,
    pub m_peak: u64,
    pub lambda: f64,
}

/// 3 to 6 layers, up to 5 weights of 1 to 3 chunks, capacities 0 to 3.
pub fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1024u64;
    let layers = rng.gen_range(3..=6);
    let mut nodes: Vec<OperatorNode> = (1..=layers)
        .map(|id| OperatorNode::new(id, "Add", s, 10.0))
        .collect();
    chain(&mut nodes);
    let num_weights = rng.gen_range(1..=5);
    let mut weights = Vec::new();
    for k in 0..num_weights {
        let id = format!("w{k}");
        let consumer = rng.gen_range(1..=layers);
        let chunks = rng.gen_range(1..=3u64);
        let bytes = (chunks - 1) * s + rng.gen_range(1..=s);
        nodes[consumer - 1].weight_ids.push(id.clone());
        if rng.gen_bool(0.2) && consumer < layers {
            let later = rng.gen_range(consumer + 1..=layers);
            nodes[later - 1].weight_ids.push(id.clone());
        }
        weights.push(WeightTensor::new(id, bytes));
    }
    let capacities = (0..layers).map(|_| rng.gen_range(0..=3)).collect();
    let m_peak = s * rng.gen_range(1..=3);
    let lambda = [0.1, 0.5, 0.9][rng.gen_range(0..3)];
    TinyInstance {
        graph: finish(&format!("tiny-{seed}"), s, nodes, weights),
        capacities,
        m_peak,
        lambda,
    }
}

/// A graph with a fused `MatMul+Add | GeLU` kernel ahead of a weight-hungry
/// layer, plus a fused `LayerNorm | Softmax` block. Fused, layer 2 transforms
/// only 8 chunks and `proj` (30 chunks) cannot stream; split, the GeLU half
/// adds 28 chunks of capacity and `proj` fits.
pub fn over_fused() -> ModelGraph {
    let s = MIB;
    let mut nodes = vec![
        OperatorNode::new(1, "MatMul", 2 * s, 2000.0).with_weights(["head"]),
        OperatorNode::fused(
            2,
            vec![
                FusedMember::new("MatMul+Add", 4 * s, 2500.0),
                FusedMember::new("GeLU", 8 * s, 300.0),
            ],
        )
        .with_weights(["ffn"]),
        OperatorNode::new(3, "LayerNorm", 4 * s, 400.0),
        OperatorNode::new(4, "MatMul", 4 * s, 2500.0).with_weights(["proj"]),
        OperatorNode::fused(
            5,
            vec![
                FusedMember::new("LayerNorm", 4 * s, 400.0),
                FusedMember::new("Softmax", 4 * s, 400.0),
            ],
        ),
        OperatorNode::new(6, "MatMul", 4 * s, 2500.0).with_weights(["out"]),
    ];
    chain(&mut nodes);
    let weights = vec![
        WeightTensor::new("head", 4 * s),
        WeightTensor::new("ffn", 4 * s),
        WeightTensor::new("proj", 30 * s),
        WeightTensor::new("out", 2 * s),
    ];
    finish("over-fused", s, nodes, weights)
}

/// Transformer chain with small activations, so capacities are low and
/// weights spread over several layers. Pair with [`starved_hardware`].
pub fn bandwidth_starved() -> TransformerSpec {
    TransformerSpec {
        blocks: 24,
        weight_bytes: 8 * MIB,
        activation_bytes: MIB,
        matmul_us: 3000.0,
        elemental_us: 300.0,
        norm_us: 400.0,
        chunk_size: MIB,
    }
}

/// Disk just fast enough to read one MatMul weight per block of compute.
pub fn starved_hardware(spec: &TransformerSpec) -> HardwareConfig {
    let block_us = spec.matmul_us + 2.0 * spec.elemental_us + spec.norm_us;
    let disk = spec.weight_bytes as f64 / block_us;
    HardwareConfig {
        disk_bandwidth_bytes_per_us: disk,
        init_transform_throughput_bytes_per_us: 4.0 * disk,
        label: "starved".into(),
    }
}

/// MatMul-dominated transformer with large activations, where streaming is
/// cheap. Pair with [`fast_storage`].
pub fn sweep_transformer() -> TransformerSpec {
    TransformerSpec {
        blocks: 48,
        activation_bytes: 8 * MIB,
        elemental_us: 100.0,
        norm_us: 200.0,
        ..TransformerSpec::default()
    }
}

/// Storage reading a MatMul weight in a small fraction of a block.
pub fn fast_storage() -> HardwareConfig {
    HardwareConfig {
        disk_bandwidth_bytes_per_us: 40_000.0,
        init_transform_throughput_bytes_per_us: 160_000.0,
        label: "fast-storage".into(),
    }
}

//! Model graph ingestion: parsing, validation and per-weight metadata.
//!
//! A [`ModelGraph`] holds layers in their fixed execution order. Layer ids are
//! 1-based and equal the position in that order. Weights are global records
//! keyed by id; the chunk count and first/last consumer are derived from the
//! nodes that reference them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capacity::classify;
use crate::error::GraphError;

/// Default chunk size S: 1 MiB.
pub const DEFAULT_CHUNK_SIZE: u64 = 1 << 20;

/// Operator classes by tolerance to concurrent data movement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorClass {
    Elemental,
    Reusable,
    Hierarchical,
}

impl OperatorClass {
    pub const ALL: [OperatorClass; 3] = [
        OperatorClass::Elemental,
        OperatorClass::Reusable,
        OperatorClass::Hierarchical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorClass::Elemental => "elemental",
            OperatorClass::Reusable => "reusable",
            OperatorClass::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for OperatorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pre-fusion constituent of a fused kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMember {
    pub kind: String,
    pub class: OperatorClass,
    pub input_bytes: u64,
    pub base_latency_us: f64,
}

impl FusedMember {
    pub fn new(kind: impl Into<String>, input_bytes: u64, base_latency_us: f64) -> Self {
        let kind = kind.into();
        Self {
            class: classify(&kind),
            kind,
            input_bytes,
            base_latency_us,
        }
    }
}

/// A layer in execution order.
///
/// A node with a non-empty `members` list is a fused kernel. Its `kind` is the
/// members' kinds joined with `+`, its latency the sum of member latencies and
/// its input the first member's input.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorNode {
    pub id: usize,
    pub kind: String,
    pub class: OperatorClass,
    pub input_bytes: u64,
    pub base_latency_us: f64,
    pub weight_ids: Vec<String>,
    pub predecessors: Vec<usize>,
    pub members: Vec<FusedMember>,
}

impl OperatorNode {
    pub fn new(id: usize, kind: impl Into<String>, input_bytes: u64, base_latency_us: f64) -> Self {
        let kind = kind.into();
        Self {
            id,
            class: classify(&kind),
            kind,
            input_bytes,
            base_latency_us,
            weight_ids: Vec::new(),
            predecessors: Vec::new(),
            members: Vec::new(),
        }
    }

    /// Builds a fused node whose aggregate fields are derived from `members`.
    pub fn fused(id: usize, members: Vec<FusedMember>) -> Self {
        let kind = members
            .iter()
            .map(|m| m.kind.as_str())
            .collect::<Vec<_>>()
            .join("+");
        let input_bytes = members.first().map_or(0, |m| m.input_bytes);
        let base_latency_us = members.iter().map(|m| m.base_latency_us).sum();
        Self {
            id,
            class: classify(&kind),
            kind,
            input_bytes,
            base_latency_us,
            weight_ids: Vec::new(),
            predecessors: Vec::new(),
            members,
        }
    }

    pub fn with_weights<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.weight_ids = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_predecessors(mut self, preds: impl IntoIterator<Item = usize>) -> Self {
        self.predecessors = preds.into_iter().collect();
        self
    }

    pub fn is_fused(&self) -> bool {
        self.members.len() >= 2
    }
}

/// A parameter blob, sizes only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub id: String,
    pub bytes: u64,
    /// T(w) = ceil(bytes / S).
    pub chunk_count: u64,
    /// i_w: smallest consuming layer id.
    pub first_consumer: usize,
    pub last_use: usize,
}

impl WeightTensor {
    /// A weight with raw size only; derived fields are filled by
    /// [`derive_weight_metadata`].
    pub fn new(id: impl Into<String>, bytes: u64) -> Self {
        Self {
            id: id.into(),
            bytes,
            chunk_count: 0,
            first_consumer: 0,
            last_use: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub chunk_size: u64,
    pub nodes: Vec<OperatorNode>,
    pub weights: BTreeMap<String, WeightTensor>,
}

impl ModelGraph {
    pub fn num_layers(&self) -> usize {
        self.nodes.len()
    }

    /// Node by 1-based layer id.
    pub fn node(&self, layer: usize) -> Option<&OperatorNode> {
        layer.checked_sub(1).and_then(|i| self.nodes.get(i))
    }

    pub fn weight(&self, id: &str) -> Option<&WeightTensor> {
        self.weights.get(id)
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.weights.values().map(|w| w.bytes).sum()
    }

    pub fn has_fused_nodes(&self) -> bool {
        self.nodes.iter().any(OperatorNode::is_fused)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawGraph::from(self)).expect("graph serialization")
    }
}

pub fn chunks_for(bytes: u64, chunk_size: u64) -> u64 {
    bytes.div_ceil(chunk_size)
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chunk_size_bytes: Option<u64>,
    nodes: Vec<RawNode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_latency_us: Option<f64>,
    #[serde(default)]
    weights: Vec<RawWeightRef>,
    #[serde(default)]
    predecessors: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    members: Option<Vec<RawMember>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeightRef {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bytes: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMember {
    kind: String,
    input_bytes: u64,
    base_latency_us: f64,
}

impl From<&ModelGraph> for RawGraph {
    fn from(g: &ModelGraph) -> Self {
        // Sizes are written at the first reference only.
        let mut defined = BTreeSet::new();
        let nodes = g
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id,
                kind: Some(n.kind.clone()),
                input_bytes: Some(n.input_bytes),
                base_latency_us: Some(n.base_latency_us),
                weights: n
                    .weight_ids
                    .iter()
                    .map(|id| RawWeightRef {
                        id: id.clone(),
                        bytes: if defined.insert(id.clone()) {
                            g.weights.get(id).map(|w| w.bytes)
                        } else {
                            None
                        },
                    })
                    .collect(),
                predecessors: n.predecessors.clone(),
                members: if n.members.is_empty() {
                    None
                } else {
                    Some(
                        n.members
                            .iter()
                            .map(|m| RawMember {
                                kind: m.kind.clone(),
                                input_bytes: m.input_bytes,
                                base_latency_us: m.base_latency_us,
                            })
                            .collect(),
                    )
                },
            })
            .collect();
        RawGraph {
            name: g.name.clone(),
            chunk_size_bytes: Some(g.chunk_size),
            nodes,
        }
    }
}

/// Parses and fully validates a graph document.
///
/// The chunk size comes from the document, or [`DEFAULT_CHUNK_SIZE`] when absent.
pub fn parse_model(document: &str) -> Result<ModelGraph, GraphError> {
    let raw: RawGraph =
        serde_json::from_str(document).map_err(|e| GraphError::Schema(e.to_string()))?;
    let chunk_size = raw.chunk_size_bytes.unwrap_or(DEFAULT_CHUNK_SIZE);
    if chunk_size == 0 {
        return Err(GraphError::Schema("chunk_size_bytes must be > 0".into()));
    }

    let mut weights: BTreeMap<String, WeightTensor> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    let mut pending_refs: Vec<(usize, String)> = Vec::new();

    for rn in raw.nodes {
        let mut node = match rn.members {
            Some(members) if !members.is_empty() => {
                let members = members
                    .into_iter()
                    .map(|m| FusedMember::new(m.kind, m.input_bytes, m.base_latency_us))
                    .collect();
                let mut node = OperatorNode::fused(rn.id, members);
                if let Some(kind) = rn.kind {
                    node.class = classify(&kind);
                    node.kind = kind;
                }
                if let Some(b) = rn.input_bytes {
                    node.input_bytes = b;
                }
                if let Some(l) = rn.base_latency_us {
                    node.base_latency_us = l;
                }
                node
            }
            _ => {
                let missing = |field: &str| {
                    GraphError::Schema(format!("node {}: missing field `{field}`", rn.id))
                };
                OperatorNode::new(
                    rn.id,
                    rn.kind.ok_or_else(|| missing("kind"))?,
                    rn.input_bytes.ok_or_else(|| missing("input_bytes"))?,
                    rn.base_latency_us.ok_or_else(|| missing("base_latency_us"))?,
                )
            }
        };
        node.predecessors = rn.predecessors;
        for wr in rn.weights {
            if let Some(bytes) = wr.bytes {
                match weights.get(&wr.id) {
                    Some(existing) if existing.bytes != bytes => {
                        return Err(GraphError::Schema(format!(
                            "weight {}: conflicting sizes {} and {}",
                            wr.id, existing.bytes, bytes
                        )));
                    }
                    Some(_) => {}
                    None => {
                        weights.insert(wr.id.clone(), WeightTensor::new(wr.id.clone(), bytes));
                    }
                }
            } else {
                pending_refs.push((rn.id, wr.id.clone()));
            }
            node.weight_ids.push(wr.id);
        }
        nodes.push(node);
    }

    for (node, weight) in pending_refs {
        if !weights.contains_key(&weight) {
            return Err(GraphError::UnknownWeight { node, weight });
        }
    }

    check_structure(&nodes)?;

    let graph = ModelGraph {
        name: raw.name,
        chunk_size,
        nodes,
        weights,
    };
    let graph = derive_weight_metadata(graph)?;
    let violations = validate(&graph);
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations));
    }
    Ok(graph)
}

pub fn load_model(path: &Path) -> Result<ModelGraph, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_model(&text)
}

/// Id uniqueness, cycles and ordering, in that order of precedence.
fn check_structure(nodes: &[OperatorNode]) -> Result<(), GraphError> {
    let mut index: HashMap<usize, usize> = HashMap::with_capacity(nodes.len());
    for (pos, n) in nodes.iter().enumerate() {
        if index.insert(n.id, pos).is_some() {
            return Err(GraphError::Schema(format!("duplicate node id {}", n.id)));
        }
    }
    for n in nodes {
        for p in &n.predecessors {
            if !index.contains_key(p) {
                return Err(GraphError::Schema(format!(
                    "node {}: unknown predecessor {}",
                    n.id, p
                )));
            }
        }
    }

    // Kahn's algorithm over the predecessor edges; self-loops are reported as
    // order violations below.
    let mut indegree = vec![0usize; nodes.len()];
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (pos, n) in nodes.iter().enumerate() {
        for p in &n.predecessors {
            if *p == n.id {
                continue;
            }
            successors[index[p]].push(pos);
            indegree[pos] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for &s in &successors[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(s);
            }
        }
    }
    if seen < nodes.len() {
        let node = nodes
            .iter()
            .enumerate()
            .find(|(i, _)| indegree[*i] > 0)
            .map(|(_, n)| n.id)
            .unwrap_or_default();
        return Err(GraphError::Cycle { node });
    }

    for (pos, n) in nodes.iter().enumerate() {
        if let Some(&p) = n.predecessors.iter().find(|&&p| p >= n.id) {
            return Err(GraphError::OrderViolation {
                node: n.id,
                predecessor: p,
            });
        }
        if n.id != pos + 1 {
            return Err(GraphError::Schema(format!(
                "order violation: node id {} at position {}",
                n.id,
                pos + 1
            )));
        }
    }
    Ok(())
}

/// Fills chunk count and first/last consumer of every weight. Idempotent.
pub fn derive_weight_metadata(mut graph: ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut span: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for n in &graph.nodes {
        for w in &n.weight_ids {
            let e = span.entry(w.as_str()).or_insert((n.id, n.id));
            e.0 = e.0.min(n.id);
            e.1 = e.1.max(n.id);
        }
    }
    let span: BTreeMap<String, (usize, usize)> =
        span.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
    let chunk_size = graph.chunk_size.max(1);
    for (id, w) in graph.weights.iter_mut() {
        let Some(&(first, last)) = span.get(id) else {
            return Err(GraphError::UnreferencedWeight { weight: id.clone() });
        };
        w.first_consumer = first;
        w.last_use = last;
        w.chunk_count = chunks_for(w.bytes, chunk_size);
    }
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// `node <id>`, `weight <id>` or `graph`.
    pub subject: String,
    pub message: String,
}

impl Violation {
    fn node(id: usize, message: impl Into<String>) -> Self {
        Self {
            subject: format!("node {id}"),
            message: message.into(),
        }
    }

    fn weight(id: &str, message: impl Into<String>) -> Self {
        Self {
            subject: format!("weight {id}"),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Lists every violated graph invariant. An empty list means the graph is valid.
pub fn validate(graph: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if graph.chunk_size == 0 {
        out.push(Violation {
            subject: "graph".into(),
            message: "chunk size must be > 0".into(),
        });
    }

    let mut seen_ids = BTreeSet::new();
    let mut referenced: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (pos, n) in graph.nodes.iter().enumerate() {
        if !seen_ids.insert(n.id) {
            out.push(Violation::node(n.id, "duplicate node id"));
        } else if n.id != pos + 1 {
            out.push(Violation::node(
                n.id,
                format!("id does not match execution position {}", pos + 1),
            ));
        }
        for &p in &n.predecessors {
            if p >= n.id {
                out.push(Violation::node(
                    n.id,
                    format!("order violation: predecessor {p} is not earlier"),
                ));
            }
        }
        if !(n.base_latency_us > 0.0 && n.base_latency_us.is_finite()) {
            out.push(Violation::node(n.id, "base latency must be > 0"));
        }
        if n.input_bytes == 0 {
            out.push(Violation::node(n.id, "input bytes must be > 0"));
        }
        if n.members.len() == 1 {
            out.push(Violation::node(n.id, "fused node needs at least two members"));
        }
        for m in &n.members {
            if m.input_bytes == 0 || m.base_latency_us.is_nan() || m.base_latency_us <= 0.0 {
                out.push(Violation::node(
                    n.id,
                    format!("member {} needs positive input and latency", m.kind),
                ));
            }
        }
        for w in &n.weight_ids {
            if !graph.weights.contains_key(w) {
                out.push(Violation::node(n.id, format!("unknown weight {w}")));
            }
            let e = referenced.entry(w.as_str()).or_insert((n.id, n.id));
            e.0 = e.0.min(n.id);
            e.1 = e.1.max(n.id);
        }
    }

    for (id, w) in &graph.weights {
        if w.id != *id {
            out.push(Violation::weight(id, format!("record id mismatch ({})", w.id)));
        }
        let Some(&(first, last)) = referenced.get(id.as_str()) else {
            out.push(Violation::weight(id, "never referenced by any node"));
            continue;
        };
        if w.bytes == 0 {
            out.push(Violation::weight(id, "size must be > 0"));
            continue;
        }
        if graph.chunk_size > 0 && w.chunk_count != chunks_for(w.bytes, graph.chunk_size) {
            out.push(Violation::weight(
                id,
                format!("chunk count {} != ceil(bytes / S)", w.chunk_count),
            ));
        }
        if w.first_consumer != first || w.last_use != last {
            out.push(Violation::weight(
                id,
                format!(
                    "consumer span ({}, {}) does not match references ({first}, {last})",
                    w.first_consumer, w.last_use
                ),
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CSV layer tables
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct LayerRow {
    id: usize,
    kind: String,
    input_bytes: u64,
    base_latency_us: f64,
    weight_bytes: u64,
}

/// Converts a flat layer table (`id,kind,input_bytes,base_latency_us,weight_bytes`)
/// into a chain graph. Layer `i` owns weight `w<i>` when `weight_bytes > 0`.
pub fn graph_from_csv(name: &str, csv_text: &str, chunk_size: u64) -> Result<ModelGraph, GraphError> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut nodes = Vec::new();
    let mut weights = BTreeMap::new();
    for row in reader.deserialize::<LayerRow>() {
        let row = row.map_err(|e| GraphError::Schema(e.to_string()))?;
        let mut node = OperatorNode::new(row.id, row.kind, row.input_bytes, row.base_latency_us);
        if row.id > 1 {
            node.predecessors.push(row.id - 1);
        }
        if row.weight_bytes > 0 {
            let wid = format!("w{}", row.id);
            weights.insert(wid.clone(), WeightTensor::new(wid.clone(), row.weight_bytes));
            node.weight_ids.push(wid);
        }
        nodes.push(node);
    }
    if chunk_size == 0 {
        return Err(GraphError::Schema("chunk size must be > 0".into()));
    }
    check_structure(&nodes)?;
    let graph = derive_weight_metadata(ModelGraph {
        name: name.to_owned(),
        chunk_size,
        nodes,
        weights,
    })?;
    let violations = validate(&graph);
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations));
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1 << 20;

    fn t1_json() -> String {
        serde_json::json!({
            "name": "t1",
            "chunk_size_bytes": MIB,
            "nodes": [
                {"id": 1, "kind": "MatMul", "input_bytes": MIB, "base_latency_us": 10.0,
                 "weights": [{"id": "w1", "bytes": MIB}], "predecessors": []},
                {"id": 2, "kind": "Add", "input_bytes": MIB, "base_latency_us": 10.0,
                 "weights": [{"id": "w2", "bytes": 2 * MIB}], "predecessors": [1]},
                {"id": 3, "kind": "GeLU", "input_bytes": MIB, "base_latency_us": 10.0,
                 "weights": [{"id": "w3", "bytes": MIB}], "predecessors": [2]},
                {"id": 4, "kind": "LayerNorm", "input_bytes": MIB, "base_latency_us": 10.0,
                 "weights": [{"id": "w4", "bytes": 2 * MIB}], "predecessors": [3]}
            ]
        })
        .to_string()
    }

    #[test]
    fn two_node_chain_chunking() {
        let doc = serde_json::json!({
            "name": "chain",
            "chunk_size_bytes": MIB,
            "nodes": [
                {"id": 1, "kind": "ReLU", "input_bytes": 64, "base_latency_us": 1.0},
                {"id": 2, "kind": "MatMul", "input_bytes": 64, "base_latency_us": 1.0,
                 "weights": [{"id": "w", "bytes": 4 * MIB}], "predecessors": [1]}
            ]
        });
        let g = parse_model(&doc.to_string()).unwrap();
        let w = g.weight("w").unwrap();
        assert_eq!(w.chunk_count, 4);
        assert_eq!(w.first_consumer, 2);
    }

    #[test]
    fn t1_fixture_metadata() {
        let g = parse_model(&t1_json()).unwrap();
        let chunks: Vec<u64> = g.weights.values().map(|w| w.chunk_count).collect();
        let first: Vec<usize> = g.weights.values().map(|w| w.first_consumer).collect();
        assert_eq!(chunks, vec![1, 2, 1, 2]);
        assert_eq!(first, vec![1, 2, 3, 4]);
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn forward_predecessor_is_order_violation() {
        let doc = serde_json::json!({
            "name": "bad",
            "nodes": [
                {"id": 1, "kind": "ReLU", "input_bytes": 8, "base_latency_us": 1.0, "predecessors": [2]},
                {"id": 2, "kind": "ReLU", "input_bytes": 8, "base_latency_us": 1.0}
            ]
        });
        let err = parse_model(&doc.to_string()).unwrap_err();
        assert!(matches!(err, GraphError::OrderViolation { node: 1, predecessor: 2 }));
        assert!(err.to_string().contains("order violation"));
    }

    #[test]
    fn cycle_is_reported_with_node() {
        let doc = serde_json::json!({
            "name": "cyc",
            "nodes": [
                {"id": 1, "kind": "ReLU", "input_bytes": 8, "base_latency_us": 1.0, "predecessors": [2]},
                {"id": 2, "kind": "ReLU", "input_bytes": 8, "base_latency_us": 1.0, "predecessors": [1]}
            ]
        });
        assert!(matches!(
            parse_model(&doc.to_string()),
            Err(GraphError::Cycle { .. })
        ));
    }

    #[test]
    fn unknown_weight_reference() {
        let doc = serde_json::json!({
            "name": "u",
            "nodes": [
                {"id": 1, "kind": "ReLU", "input_bytes": 8, "base_latency_us": 1.0,
                 "weights": [{"id": "ghost"}]}
            ]
        });
        let err = parse_model(&doc.to_string()).unwrap_err();
        assert!(matches!(err, GraphError::UnknownWeight { node: 1, ref weight } if weight == "ghost"));
    }

    #[test]
    fn shared_weight_spans_consumers() {
        let doc = serde_json::json!({
            "name": "shared",
            "chunk_size_bytes": 100,
            "nodes": (1..=7).map(|i| {
                let weights = match i {
                    3 => serde_json::json!([{"id": "emb", "bytes": 100}]),
                    7 => serde_json::json!([{"id": "emb"}]),
                    _ => serde_json::json!([]),
                };
                serde_json::json!({"id": i, "kind": "Add", "input_bytes": 10,
                    "base_latency_us": 1.0, "weights": weights})
            }).collect::<Vec<_>>()
        });
        let g = parse_model(&doc.to_string()).unwrap();
        let w = g.weight("emb").unwrap();
        assert_eq!((w.first_consumer, w.last_use, w.chunk_count), (3, 7, 1));
    }

    #[test]
    fn chunk_count_rounds_up() {
        let mut g = parse_model(&t1_json()).unwrap();
        g.weights.get_mut("w1").unwrap().bytes = MIB + 1;
        let g = derive_weight_metadata(g).unwrap();
        assert_eq!(g.weight("w1").unwrap().chunk_count, 2);
        assert_eq!(g.weight("w3").unwrap().chunk_count, 1);
    }

    #[test]
    fn unreferenced_weight_is_error() {
        let mut g = parse_model(&t1_json()).unwrap();
        g.weights.insert("orphan".into(), WeightTensor::new("orphan", 10));
        let err = derive_weight_metadata(g).unwrap_err();
        assert!(matches!(err, GraphError::UnreferencedWeight { ref weight } if weight == "orphan"));
    }

    #[test]
    fn derive_is_idempotent() {
        let g = parse_model(&t1_json()).unwrap();
        let once = derive_weight_metadata(g.clone()).unwrap();
        let twice = derive_weight_metadata(once.clone()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, g);
    }

    #[test]
    fn duplicate_node_id_is_one_violation() {
        let mut g = parse_model(&t1_json()).unwrap();
        g.nodes[2].id = 2;
        let v = validate(&g);
        let dups: Vec<_> = v.iter().filter(|x| x.subject == "node 2" && !x.message.contains("order")).collect();
        assert_eq!(dups.len(), 1, "{v:?}");
        assert!(dups[0].message.contains("duplicate"));
    }

    #[test]
    fn zero_byte_weight_is_one_violation() {
        let mut g = parse_model(&t1_json()).unwrap();
        let w = g.weights.get_mut("w3").unwrap();
        w.bytes = 0;
        w.chunk_count = 0;
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].subject, "weight w3");
    }

    #[test]
    fn json_round_trip() {
        let g = parse_model(&t1_json()).unwrap();
        let back = parse_model(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn fused_members_round_trip() {
        let doc = serde_json::json!({
            "name": "fused",
            "nodes": [
                {"id": 1, "kind": "LayerNorm", "input_bytes": 64, "base_latency_us": 3.0},
                {"id": 2, "predecessors": [1], "weights": [{"id": "w", "bytes": 10}],
                 "members": [
                    {"kind": "MatMul+Add", "input_bytes": 64, "base_latency_us": 5.0},
                    {"kind": "GeLU", "input_bytes": 128, "base_latency_us": 2.0}
                 ]}
            ]
        });
        let g = parse_model(&doc.to_string()).unwrap();
        let fused = g.node(2).unwrap();
        assert!(fused.is_fused());
        assert_eq!(fused.kind, "MatMul+Add+GeLU");
        assert_eq!(fused.base_latency_us, 7.0);
        assert_eq!(fused.input_bytes, 64);
        assert_eq!(fused.members[0].class, OperatorClass::Reusable);
        assert_eq!(parse_model(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn csv_table_builds_chain() {
        let csv = "id,kind,input_bytes,base_latency_us,weight_bytes\n\
                   1,MatMul,1024,10,2048\n\
                   2,ReLU,1024,2,0\n\
                   3,MatMul,1024,10,1025\n";
        let g = graph_from_csv("tbl", csv, 1024).unwrap();
        assert_eq!(g.num_layers(), 3);
        assert_eq!(g.node(3).unwrap().predecessors, vec![2]);
        assert_eq!(g.weight("w3").unwrap().chunk_count, 2);
        assert!(g.weight("w2").is_none());
    }
}

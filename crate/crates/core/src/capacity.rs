//! Operator classification, the extra-load latency model and per-layer load
//! capacity.
//!
//! Latency under an extra transformation load follows a two-parameter
//! piecewise-linear curve per operator class:
//!
//! ```text
//! latency = base * (1 + slope * max(0, r - free_ratio)),   r = extra / input
//! ```
//!
//! The load capacity of a layer is the largest whole number of chunks it can
//! transform while staying within its class's latency-increase threshold.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::FitError;
use crate::graph::{FusedMember, ModelGraph, OperatorClass, OperatorNode};

/// Maps an operator kind to its class. Fused kinds (`A+B+C`) take the most
/// conservative class among their parts; unknown kinds are hierarchical.
pub fn classify(kind: &str) -> OperatorClass {
    if kind.contains('+') {
        let parts: Vec<OperatorClass> = kind.split('+').map(classify_single).collect();
        if parts.contains(&OperatorClass::Hierarchical) {
            OperatorClass::Hierarchical
        } else if parts.contains(&OperatorClass::Reusable) {
            OperatorClass::Reusable
        } else {
            OperatorClass::Elemental
        }
    } else {
        classify_single(kind)
    }
}

fn classify_single(kind: &str) -> OperatorClass {
    let norm: String = kind
        .trim()
        .chars()
        .filter(|c| !matches!(c, '_' | '-' | ' '))
        .flat_map(char::to_lowercase)
        .collect();
    match norm.as_str() {
        "add" | "sub" | "mul" | "div" | "biasadd" | "relu" | "relu6" | "leakyrelu" | "prelu"
        | "gelu" | "silu" | "swish" | "hardswish" | "sigmoid" | "hardsigmoid" | "tanh"
        | "mish" | "erf" | "exp" | "sqrt" | "pow" | "neg" | "clip" | "cast" | "elementwise"
        | "activation" => OperatorClass::Elemental,
        "matmul" | "batchmatmul" | "gemm" | "linear" | "fullyconnected" | "einsum" | "conv"
        | "conv1d" | "conv2d" | "conv3d" | "convtranspose" | "depthwiseconv" => {
            OperatorClass::Reusable
        }
        _ => OperatorClass::Hierarchical,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub free_ratio: f64,
    pub slope: f64,
}

impl ClassParams {
    pub const fn new(free_ratio: f64, slope: f64) -> Self {
        Self { free_ratio, slope }
    }

    fn is_valid(&self) -> bool {
        self.free_ratio >= 0.0 && self.slope >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub elemental: ClassParams,
    pub reusable: ClassParams,
    pub hierarchical: ClassParams,
    #[serde(default)]
    pub overrides: BTreeMap<String, ClassParams>,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            elemental: ClassParams::new(0.5, 1.0),
            reusable: ClassParams::new(1.0, 0.2),
            hierarchical: ClassParams::new(0.0, 5.0),
            overrides: BTreeMap::new(),
        }
    }
}

impl LatencyModel {
    pub fn class_params(&self, class: OperatorClass) -> ClassParams {
        match class {
            OperatorClass::Elemental => self.elemental,
            OperatorClass::Reusable => self.reusable,
            OperatorClass::Hierarchical => self.hierarchical,
        }
    }

    fn class_params_mut(&mut self, class: OperatorClass) -> &mut ClassParams {
        match class {
            OperatorClass::Elemental => &mut self.elemental,
            OperatorClass::Reusable => &mut self.reusable,
            OperatorClass::Hierarchical => &mut self.hierarchical,
        }
    }

    /// Parameters for a kind, honouring per-kind overrides.
    pub fn params(&self, kind: &str, class: OperatorClass) -> ClassParams {
        self.overrides
            .get(kind)
            .copied()
            .unwrap_or_else(|| self.class_params(class))
    }

    pub fn is_valid(&self) -> bool {
        OperatorClass::ALL
            .iter()
            .all(|&c| self.class_params(c).is_valid())
            && self.overrides.values().all(ClassParams::is_valid)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("latency model serialization")
    }
}

/// Maximum relative latency increase tolerated per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub elemental: f64,
    pub reusable: f64,
    pub hierarchical: f64,
    /// Capacity used when a class has zero slope and a positive threshold.
    pub max_chunks: u64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            elemental: 3.0,
            reusable: 0.2,
            hierarchical: 0.0,
            max_chunks: 1024,
        }
    }
}

impl ThresholdConfig {
    pub fn for_class(&self, class: OperatorClass) -> f64 {
        match class {
            OperatorClass::Elemental => self.elemental,
            OperatorClass::Reusable => self.reusable,
            OperatorClass::Hierarchical => self.hierarchical,
        }
    }
}

fn latency_at(params: ClassParams, base_us: f64, input_bytes: u64, extra_bytes: f64) -> f64 {
    if extra_bytes <= 0.0 {
        return base_us;
    }
    let ratio = extra_bytes / input_bytes as f64;
    base_us * (1.0 + params.slope * (ratio - params.free_ratio).max(0.0))
}

/// Kernel latency in microseconds with `extra_bytes` transformed concurrently.
pub fn predict_latency(model: &LatencyModel, node: &OperatorNode, extra_bytes: u64) -> f64 {
    let params = model.params(&node.kind, node.class);
    latency_at(params, node.base_latency_us, node.input_bytes, extra_bytes as f64)
}

/// Largest chunk count a kernel can absorb within its class threshold.
fn capacity_of(
    model: &LatencyModel,
    thresholds: &ThresholdConfig,
    kind: &str,
    class: OperatorClass,
    input_bytes: u64,
    base_us: f64,
    chunk_size: u64,
) -> u64 {
    assert!(chunk_size > 0, "chunk size must be positive");
    let params = model.params(kind, class);
    let threshold = thresholds.for_class(class);
    let input = input_bytes as f64;
    let s = chunk_size as f64;

    if params.slope == 0.0 {
        return if threshold > 0.0 {
            thresholds.max_chunks
        } else {
            floor_to_u64(input * params.free_ratio / s)
        };
    }

    let r_max = params.free_ratio + threshold / params.slope;
    let mut chunks = floor_to_u64(input * r_max / s);
    // Float rounding can put the closed form one off the true boundary.
    let limit = base_us * (1.0 + threshold);
    let fits = |c: u64| latency_at(params, base_us, input_bytes, c as f64 * s) <= limit;
    while chunks > 0 && !fits(chunks) {
        chunks -= 1;
    }
    while chunks < u64::MAX && fits(chunks + 1) {
        chunks += 1;
    }
    chunks
}

fn floor_to_u64(x: f64) -> u64 {
    if x.is_nan() || x <= 0.0 {
        0
    } else if x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x.floor() as u64
    }
}

/// C_l for a single (unfused) node.
pub fn load_capacity(
    model: &LatencyModel,
    thresholds: &ThresholdConfig,
    node: &OperatorNode,
    chunk_size: u64,
) -> u64 {
    capacity_of(
        model,
        thresholds,
        &node.kind,
        node.class,
        node.input_bytes,
        node.base_latency_us,
        chunk_size,
    )
}

pub fn member_capacity(
    model: &LatencyModel,
    thresholds: &ThresholdConfig,
    member: &FusedMember,
    chunk_size: u64,
) -> u64 {
    capacity_of(
        model,
        thresholds,
        &member.kind,
        member.class,
        member.input_bytes,
        member.base_latency_us,
        chunk_size,
    )
}

/// Per-layer load capacities, indexed by 1-based layer id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapacityProfile(pub Vec<u64>);

impl CapacityProfile {
    pub fn get(&self, layer: usize) -> u64 {
        self.0[layer - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

impl From<Vec<u64>> for CapacityProfile {
    fn from(v: Vec<u64>) -> Self {
        Self(v)
    }
}

/// Capacities for every layer; fused layers get the minimum over members.
pub fn capacity_profile(
    graph: &ModelGraph,
    model: &LatencyModel,
    thresholds: &ThresholdConfig,
) -> CapacityProfile {
    CapacityProfile(
        graph
            .nodes
            .iter()
            .map(|n| {
                if n.is_fused() {
                    let caps: Vec<u64> = n
                        .members
                        .iter()
                        .map(|m| member_capacity(model, thresholds, m, graph.chunk_size))
                        .collect();
                    crate::fusion::fused_capacity(&caps)
                } else {
                    load_capacity(model, thresholds, n, graph.chunk_size)
                }
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub kind: String,
    pub input_bytes: u64,
    pub extra_bytes: u64,
    pub latency_us: f64,
}

/// Fit result for one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassFit {
    pub class: OperatorClass,
    pub params: ClassParams,
    /// False when no records of this class were present (defaults kept).
    pub fitted: bool,
    pub records: usize,
    /// Sum of squared relative-latency residuals.
    pub sse: f64,
    pub max_abs_residual: f64,
}

pub const MIN_RECORDS_PER_CLASS: usize = 3;

const KNEE_GRID_STEPS: u32 = 20;

pub fn read_profile_csv(text: &str) -> Result<Vec<ProfileRecord>, FitError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(|e| FitError::InvalidRecord(e.to_string())))
        .collect()
}

pub fn fit_model(records: &[ProfileRecord]) -> Result<LatencyModel, FitError> {
    fit_model_with_summary(records).map(|(m, _)| m)
}

/// Fits (free_ratio, slope) per class by scanning knee positions 0.0..=2.0 in
/// steps of 0.1 and solving the slope in closed form at each knee.
pub fn fit_model_with_summary(
    records: &[ProfileRecord],
) -> Result<(LatencyModel, Vec<ClassFit>), FitError> {
    let mut baselines: HashMap<(&str, u64), (f64, usize)> = HashMap::new();
    for r in records {
        if r.input_bytes == 0 || r.latency_us.is_nan() || r.latency_us <= 0.0 {
            return Err(FitError::InvalidRecord(format!(
                "{}: input bytes and latency must be positive",
                r.kind
            )));
        }
        if r.extra_bytes == 0 {
            let e = baselines.entry((r.kind.as_str(), r.input_bytes)).or_default();
            e.0 += r.latency_us;
            e.1 += 1;
        }
    }

    // (ratio, relative increase) samples per class
    let mut samples: BTreeMap<OperatorClass, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let Some(&(sum, n)) = baselines.get(&(r.kind.as_str(), r.input_bytes)) else {
            return Err(FitError::MissingBaseline {
                kind: r.kind.clone(),
                input_bytes: r.input_bytes,
            });
        };
        let base = sum / n as f64;
        let ratio = r.extra_bytes as f64 / r.input_bytes as f64;
        samples
            .entry(classify(&r.kind))
            .or_default()
            .push((ratio, r.latency_us / base - 1.0));
    }

    for (&class, pts) in &samples {
        let distinct: BTreeSet<u64> = pts.iter().map(|(r, _)| r.to_bits()).collect();
        if distinct.len() < MIN_RECORDS_PER_CLASS {
            return Err(FitError::InsufficientRecords {
                class,
                needed: MIN_RECORDS_PER_CLASS,
                found: distinct.len(),
            });
        }
    }

    let mut model = LatencyModel::default();
    let mut summary = Vec::new();
    for class in OperatorClass::ALL {
        match samples.get(&class) {
            Some(pts) => {
                let (params, sse, max_abs) = fit_class(pts);
                *model.class_params_mut(class) = params;
                summary.push(ClassFit {
                    class,
                    params,
                    fitted: true,
                    records: pts.len(),
                    sse,
                    max_abs_residual: max_abs,
                });
            }
            None => summary.push(ClassFit {
                class,
                params: model.class_params(class),
                fitted: false,
                records: 0,
                sse: 0.0,
                max_abs_residual: 0.0,
            }),
        }
    }
    Ok((model, summary))
}

fn fit_class(pts: &[(f64, f64)]) -> (ClassParams, f64, f64) {
    let mut best: Option<(ClassParams, f64)> = None;
    for k in 0..=KNEE_GRID_STEPS {
        let knee = f64::from(k) / 10.0;
        let (mut hy, mut hh) = (0.0, 0.0);
        for &(r, y) in pts {
            let h = (r - knee).max(0.0);
            hy += h * y;
            hh += h * h;
        }
        let slope = if hh > 0.0 { (hy / hh).max(0.0) } else { 0.0 };
        let sse: f64 = pts
            .iter()
            .map(|&(r, y)| {
                let e = y - slope * (r - knee).max(0.0);
                e * e
            })
            .sum();
        let better = match best {
            None => true,
            Some((_, b)) => sse < b - 1e-12 * (1.0 + b),
        };
        if better {
            best = Some((ClassParams::new(knee, slope), sse));
        }
    }
    let (params, sse) = best.expect("grid is non-empty");
    let max_abs = pts
        .iter()
        .map(|&(r, y)| (y - params.slope * (r - params.free_ratio).max(0.0)).abs())
        .fold(0.0, f64::max);
    (params, sse, max_abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MIB: u64 = 1 << 20;

    fn node(kind: &str, input: u64, base: f64) -> OperatorNode {
        OperatorNode::new(1, kind, input, base)
    }

    #[test]
    fn classification_table() {
        assert_eq!(classify("MatMul"), OperatorClass::Reusable);
        assert_eq!(classify("Conv"), OperatorClass::Reusable);
        assert_eq!(classify("LayerNorm"), OperatorClass::Hierarchical);
        assert_eq!(classify("Softmax"), OperatorClass::Hierarchical);
        assert_eq!(classify("ReLU"), OperatorClass::Elemental);
        assert_eq!(classify("Add"), OperatorClass::Elemental);
        assert_eq!(classify("FancyNewOp"), OperatorClass::Hierarchical);
        assert_eq!(classify("MatMul+Add"), OperatorClass::Reusable);
        assert_eq!(classify("Add+GeLU"), OperatorClass::Elemental);
        assert_eq!(classify("MatMul+Softmax"), OperatorClass::Hierarchical);
    }

    #[test]
    fn zero_extra_is_base_latency() {
        let m = LatencyModel::default();
        for kind in ["MatMul", "GeLU", "LayerNorm"] {
            assert_eq!(predict_latency(&m, &node(kind, 1000, 37.5), 0), 37.5);
        }
    }

    #[test]
    fn elemental_latency_closed_form() {
        let m = LatencyModel::default();
        let n = node("GeLU", 8 * MIB, 10.0);
        assert_eq!(predict_latency(&m, &n, 12 * MIB), 20.0);
    }

    #[test]
    fn hierarchical_latency_closed_form() {
        let m = LatencyModel::default();
        // r = 0.1
        let n = node("LayerNorm", 10_000, 100.0);
        assert!((predict_latency(&m, &n, 1_000) - 150.0).abs() < 1e-9);
    }

    #[test]
    fn override_takes_precedence() {
        let mut m = LatencyModel::default();
        m.overrides.insert("GeLU".into(), ClassParams::new(0.0, 2.0));
        let n = node("GeLU", 100, 10.0);
        assert_eq!(predict_latency(&m, &n, 50), 20.0);
    }

    #[test]
    fn capacity_examples() {
        let m = LatencyModel::default();
        let t = ThresholdConfig::default();
        assert_eq!(load_capacity(&m, &t, &node("LayerNorm", 8 * MIB, 50.0), MIB), 0);
        assert_eq!(load_capacity(&m, &t, &node("GeLU", 8 * MIB, 10.0), MIB), 28);
        assert_eq!(load_capacity(&m, &t, &node("MatMul", 4 * MIB, 10.0), MIB), 8);
    }

    #[test]
    fn zero_slope_capacity_is_capped() {
        let mut m = LatencyModel {
            elemental: ClassParams::new(0.5, 0.0),
            ..LatencyModel::default()
        };
        let t = ThresholdConfig::default();
        assert_eq!(load_capacity(&m, &t, &node("Add", 8 * MIB, 1.0), MIB), 1024);
        m.hierarchical = ClassParams::new(0.5, 0.0);
        assert_eq!(load_capacity(&m, &t, &node("Softmax", 8 * MIB, 1.0), MIB), 4);
    }

    #[test]
    fn fit_recovers_noiseless_parameters() {
        let mut records = Vec::new();
        for (kind, input) in [("GeLU", 1000u64), ("Add", 4000)] {
            for extra_ratio in [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0] {
                let extra = (extra_ratio * input as f64) as u64;
                let base = 10.0 + input as f64 / 1000.0;
                let lat = base * (1.0 + 1.0 * (extra_ratio - 0.5_f64).max(0.0));
                records.push(ProfileRecord {
                    kind: kind.into(),
                    input_bytes: input,
                    extra_bytes: extra,
                    latency_us: lat,
                });
            }
        }
        let m = fit_model(&records).unwrap();
        assert_eq!(m.elemental.free_ratio, 0.5);
        assert!((m.elemental.slope - 1.0).abs() < 1e-9, "{}", m.elemental.slope);
        // untouched classes keep defaults
        assert_eq!(m.reusable, LatencyModel::default().reusable);
    }

    #[test]
    fn fit_constant_latency_picks_smallest_knee() {
        let records: Vec<_> = [0u64, 100, 200, 300]
            .iter()
            .map(|&e| ProfileRecord {
                kind: "MatMul".into(),
                input_bytes: 100,
                extra_bytes: e,
                latency_us: 42.0,
            })
            .collect();
        let m = fit_model(&records).unwrap();
        assert_eq!(m.reusable, ClassParams::new(0.0, 0.0));
    }

    #[test]
    fn fit_rejects_thin_class() {
        let mut records = Vec::new();
        for e in [0u64, 100, 200, 300] {
            records.push(ProfileRecord {
                kind: "MatMul".into(),
                input_bytes: 100,
                extra_bytes: e,
                latency_us: 10.0 + e as f64,
            });
        }
        for e in [0u64, 50] {
            records.push(ProfileRecord {
                kind: "ReLU".into(),
                input_bytes: 100,
                extra_bytes: e,
                latency_us: 1.0,
            });
        }
        let err = fit_model(&records).unwrap_err();
        assert!(matches!(
            err,
            FitError::InsufficientRecords { class: OperatorClass::Elemental, .. }
        ));
        assert!(err.to_string().contains("elemental"));
    }

    #[test]
    fn profile_csv_parses() {
        let text = "kind,input_bytes,extra_bytes,latency_us\nMatMul,100,0,10\nMatMul,100,50,10.5\n";
        let recs = read_profile_csv(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].extra_bytes, 50);
    }

    #[test]
    fn model_json_round_trip() {
        let mut m = LatencyModel::default();
        m.overrides.insert("Softmax".into(), ClassParams::new(0.1, 3.0));
        assert_eq!(LatencyModel::from_json(&m.to_json()).unwrap(), m);
    }

    fn arb_params() -> impl Strategy<Value = ClassParams> {
        (0.0f64..3.0, 0.0f64..8.0).prop_map(|(f, s)| ClassParams::new(f, s))
    }

    proptest! {
        #[test]
        fn latency_is_monotone(p in arb_params(), input in 1u64..10_000_000,
                               base in 0.1f64..1e4, a in 0u64..50_000_000, b in 0u64..50_000_000) {
            let m = LatencyModel { elemental: p, ..LatencyModel::default() };
            let n = node("Add", input, base);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(predict_latency(&m, &n, lo) <= predict_latency(&m, &n, hi));
        }
    }
}

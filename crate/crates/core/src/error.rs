use thiserror::Error;

use crate::graph::{OperatorClass, Violation};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("cycle detected through node {node}")]
    Cycle { node: usize },
    #[error("order violation: node {node} lists predecessor {predecessor}")]
    OrderViolation { node: usize, predecessor: usize },
    #[error("node {node} references unknown weight {weight}")]
    UnknownWeight { node: usize, weight: String },
    #[error("weight {weight} is never referenced by any node")]
    UnreferencedWeight { weight: String },
    #[error("invalid graph: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("class {class}: need at least {needed} records with distinct load ratios, found {found}")]
    InsufficientRecords {
        class: OperatorClass,
        needed: usize,
        found: usize,
    },
    #[error("{kind} with input {input_bytes} B has no zero-load baseline record")]
    MissingBaseline { kind: String, input_bytes: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("capacity profile covers {got} layers, graph has {expected}")]
    CapacityLengthMismatch { expected: usize, got: usize },
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("instance has {chunks} streamable chunks, above the exact-solver bound of {bound}")]
    OverOracleBound { chunks: u64, bound: u64 },
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan references unknown weight {0}")]
    UnknownWeight(String),
    #[error("plan references layer {layer} outside 1..={layers}")]
    UnknownLayer { layer: usize, layers: usize },
    #[error("plan does not match graph: {0}")]
    Mismatch(String),
    #[error("malformed plan: {0}")]
    Malformed(String),
}

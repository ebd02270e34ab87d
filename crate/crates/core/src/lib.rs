//! Overlap planning for streaming DNN weights from disk through unified and
//! texture memory while layers execute.
//!
//! Pipeline: [`graph`] ingestion, [`capacity`] modeling, plan generation in
//! [`solver`], un-fusing in [`fusion`] and replay in [`simulator`].

pub mod capacity;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod graph;
pub mod simulator;
pub mod solver;

pub use capacity::{
    capacity_profile, classify, fit_model, load_capacity, predict_latency, CapacityProfile,
    ClassParams, LatencyModel, ThresholdConfig,
};
pub use error::{FitError, GraphError, PlanError, SolveError};
pub use fusion::{adaptive_fusion, fusion_penalty, split_check, FusionConfig, SplitDecision};
pub use graph::{load_model, parse_model, validate, ModelGraph, OperatorClass, OperatorNode, WeightTensor};
pub use simulator::{simulate, simulate_workload, HardwareConfig, SimReport, Strategy};
pub use solver::{
    build_instance, check_constraints, greedy_plan, objective, solve_exact, solve_lcopg,
    LcopgConfig, OpgInstance, OverlapPlan, SolveOutcome, SolveStatus,
};

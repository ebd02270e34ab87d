//! Python bindings: graphs, capacity profiles, solvers, fusion and the
//! simulator. Errors surface as `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use streamplan::capacity::{self, CapacityProfile, LatencyModel as CoreLatencyModel, ThresholdConfig};
use streamplan::fixtures::{self, TransformerSpec};
use streamplan::fusion::{self, FusionConfig, SolveSetup};
use streamplan::graph::{self, ModelGraph as CoreGraph};
use streamplan::simulator::{self, HardwareConfig as CoreHardware, SimReport as CoreReport, Strategy};
use streamplan::solver::{
    self, ExactLimits, LcopgConfig, OverlapPlan, PlanFile, SolveOutcome,
};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SolverKind {
    Auto,
    Exact,
    Lcopg,
}

fn solver_kind(name: &str) -> Result<SolverKind, String> {
    match name {
        "auto" => Ok(SolverKind::Auto),
        "exact" => Ok(SolverKind::Exact),
        "lcopg" => Ok(SolverKind::Lcopg),
        other => Err(format!("unknown solver {other:?}; expected auto, exact or lcopg")),
    }
}

fn strategy(name: &str, plan: Option<&Plan>) -> Result<Strategy, String> {
    match name {
        "plan" => plan
            .map(|p| Strategy::Plan(p.file.plan.clone()))
            .ok_or_else(|| "strategy \"plan\" needs a plan".to_owned()),
        "full-preload" => Ok(Strategy::FullPreload),
        "always-next" => Ok(Strategy::AlwaysNext),
        "same-op-type" => Ok(Strategy::SameOpType),
        other => Err(format!(
            "unknown strategy {other:?}; expected plan, full-preload, always-next or same-op-type"
        )),
    }
}

/// A validated model graph.
#[pyclass(name = "ModelGraph", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Graph {
    inner: CoreGraph,
}

#[pymethods]
impl Graph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        graph::parse_model(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        graph::load_model(&path).map(|inner| Self { inner }).map_err(err)
    }

    /// The four-layer reference graph.
    #[staticmethod]
    fn t1() -> Self {
        Self { inner: fixtures::t1() }
    }

    #[staticmethod]
    #[pyo3(signature = (blocks = 48, weight_bytes = None, activation_bytes = None))]
    fn transformer(blocks: usize, weight_bytes: Option<u64>, activation_bytes: Option<u64>) -> Self {
        let d = TransformerSpec::default();
        let spec = TransformerSpec {
            blocks,
            weight_bytes: weight_bytes.unwrap_or(d.weight_bytes),
            activation_bytes: activation_bytes.unwrap_or(d.activation_bytes),
            ..d
        };
        Self { inner: fixtures::transformer(&spec) }
    }

    #[staticmethod]
    fn random(seed: u64, layers: usize) -> Self {
        Self { inner: fixtures::random_graph(seed, layers.max(1)) }
    }

    #[staticmethod]
    fn over_fused() -> Self {
        Self { inner: fixtures::over_fused() }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    #[getter]
    fn total_weight_bytes(&self) -> u64 {
        self.inner.total_weight_bytes()
    }

    #[getter]
    fn chunk_size(&self) -> u64 {
        self.inner.chunk_size
    }

    /// Operator kinds in execution order.
    fn kinds(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.kind.clone()).collect()
    }

    /// Operator classes in execution order.
    fn classes(&self) -> Vec<&'static str> {
        self.inner.nodes.iter().map(|n| n.class.as_str()).collect()
    }

    fn weight_ids(&self) -> Vec<String> {
        self.inner.weights.keys().cloned().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.num_layers()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelGraph(name={:?}, layers={}, weights={})",
            self.inner.name,
            self.inner.num_layers(),
            self.inner.weights.len()
        )
    }
}

/// Per-class latency parameters.
#[pyclass(name = "LatencyModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct LatencyModel {
    inner: CoreLatencyModel,
}

#[pymethods]
impl LatencyModel {
    #[new]
    fn new() -> Self {
        Self { inner: CoreLatencyModel::default() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = CoreLatencyModel::from_json(text).map_err(err)?;
        if !inner.is_valid() {
            return Err(err("latency model parameters out of range"));
        }
        Ok(Self { inner })
    }

    /// Fits a model from profiling CSV text
    /// (`kind,input_bytes,extra_bytes,latency_us`).
    #[staticmethod]
    fn fit(csv_text: &str) -> PyResult<Self> {
        let records = capacity::read_profile_csv(csv_text).map_err(err)?;
        capacity::fit_model(&records).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// (free_ratio, slope) for "elemental", "reusable" or "hierarchical".
    fn params(&self, class: &str) -> PyResult<(f64, f64)> {
        let p = match class {
            "elemental" => self.inner.elemental,
            "reusable" => self.inner.reusable,
            "hierarchical" => self.inner.hierarchical,
            other => return Err(err(format!("unknown class {other:?}"))),
        };
        Ok((p.free_ratio, p.slope))
    }
}

fn model_or_default(model: Option<&LatencyModel>) -> CoreLatencyModel {
    model.map(|m| m.inner.clone()).unwrap_or_default()
}

/// Disk and transform rates in bytes per microsecond.
#[pyclass(name = "HardwareConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Hardware {
    inner: CoreHardware,
}

#[pymethods]
impl Hardware {
    #[new]
    #[pyo3(signature = (disk_bandwidth_bytes_per_us = None, init_transform_throughput_bytes_per_us = None, label = None))]
    fn new(
        disk_bandwidth_bytes_per_us: Option<f64>,
        init_transform_throughput_bytes_per_us: Option<f64>,
        label: Option<String>,
    ) -> PyResult<Self> {
        let d = CoreHardware::default();
        let inner = CoreHardware {
            disk_bandwidth_bytes_per_us: disk_bandwidth_bytes_per_us.unwrap_or(d.disk_bandwidth_bytes_per_us),
            init_transform_throughput_bytes_per_us: init_transform_throughput_bytes_per_us
                .unwrap_or(d.init_transform_throughput_bytes_per_us),
            label: label.unwrap_or(d.label),
        };
        if !inner.is_valid() {
            return Err(err("rates must be positive and finite"));
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreHardware::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// (weight, z, [(layer, chunks), ...])
type StreamEntry = (String, usize, Vec<(usize, u64)>);

/// A solved overlap plan with its solver metadata.
#[pyclass(name = "Plan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Plan {
    file: PlanFile,
}

impl Plan {
    fn from_outcome(out: &SolveOutcome) -> Self {
        Self { file: out.to_plan_file() }
    }
}

#[pymethods]
impl Plan {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        PlanFile::from_json(text).map(|file| Self { file }).map_err(err)
    }

    #[staticmethod]
    fn full_preload(graph: &Graph) -> Self {
        let plan = OverlapPlan::full_preload(&graph.inner);
        let file = PlanFile {
            plan,
            meta: solver::PlanMeta {
                status: solver::SolveStatus::Feasible,
                objective: f64::NAN,
                tiers_fired: Vec::new(),
                capacity_adjustments: Default::default(),
            },
        };
        Self { file }
    }

    fn to_json(&self) -> String {
        self.file.to_json()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.file.meta.objective
    }

    #[getter]
    fn status(&self) -> String {
        format!("{:?}", self.file.meta.status).to_lowercase()
    }

    #[getter]
    fn tiers_fired(&self) -> Vec<String> {
        self.file.meta.tiers_fired.iter().map(|t| format!("{t:?}").to_lowercase()).collect()
    }

    #[getter]
    fn preload(&self) -> Vec<String> {
        self.file.plan.preload.iter().cloned().collect()
    }

    #[getter]
    fn streams(&self) -> Vec<StreamEntry> {
        self.file
            .plan
            .streams
            .iter()
            .map(|s| (s.weight.clone(), s.z, s.assignments.iter().map(|a| (a.layer, a.chunks)).collect()))
            .collect()
    }

    fn preloaded_bytes(&self, graph: &Graph) -> u64 {
        self.file.plan.preloaded_bytes(&graph.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Plan(status={}, objective={}, preload={}, streams={})",
            self.status(),
            self.file.meta.objective,
            self.file.plan.preload.len(),
            self.file.plan.streams.len()
        )
    }
}

/// Results of one simulated run.
#[pyclass(name = "SimReport", frozen)]
struct Report {
    inner: CoreReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn init_latency_us(&self) -> f64 {
        self.inner.init_latency_us
    }

    #[getter]
    fn exec_latency_us(&self) -> f64 {
        self.inner.exec_latency_us
    }

    #[getter]
    fn total_latency_us(&self) -> f64 {
        self.inner.total_latency_us
    }

    #[getter]
    fn peak_memory_bytes(&self) -> u64 {
        self.inner.peak_memory_bytes
    }

    #[getter]
    fn avg_memory_bytes(&self) -> f64 {
        self.inner.avg_memory_bytes
    }

    #[getter]
    fn persistent_bytes(&self) -> u64 {
        self.inner.persistent_bytes
    }

    #[getter]
    fn conservation_holds(&self) -> bool {
        self.inner.conservation.holds()
    }

    fn layer_stalls(&self) -> Vec<f64> {
        self.inner.layer_stalls()
    }

    /// (time_us, um_bytes, tm_bytes) samples.
    fn memory_timeline(&self) -> Vec<(f64, u64, u64)> {
        self.inner
            .memory_timeline()
            .iter()
            .map(|s| (s.time_us, s.um_bytes, s.tm_bytes))
            .collect()
    }

    fn timeline_csv(&self) -> String {
        simulator::timeline_csv(&self.inner.timeline, false)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Load capacity in chunks for every layer.
#[pyfunction]
#[pyo3(signature = (graph, model = None))]
fn capacity_profile(graph: &Graph, model: Option<&LatencyModel>) -> Vec<u64> {
    capacity::capacity_profile(&graph.inner, &model_or_default(model), &ThresholdConfig::default()).0
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (graph, m_peak = solver::DEFAULT_M_PEAK, lam = solver::DEFAULT_LAMBDA, solver = "auto", model = None, capacities = None, window = 64, soft_factor = 1.25, time_limit_s = 150.0))]
fn solve(
    graph: &Graph,
    m_peak: u64,
    lam: f64,
    solver: &str,
    model: Option<&LatencyModel>,
    capacities: Option<Vec<u64>>,
    window: usize,
    soft_factor: f64,
    time_limit_s: f64,
) -> PyResult<Plan> {
    let kind = solver_kind(solver).map_err(err)?;
    let caps = match capacities {
        Some(c) => CapacityProfile(c),
        None => capacity::capacity_profile(&graph.inner, &model_or_default(model), &ThresholdConfig::default()),
    };
    let inst = solver::build_instance(&graph.inner, &caps, m_peak, lam).map_err(err)?;
    let limits = ExactLimits::default();
    let exact = match kind {
        SolverKind::Exact => true,
        SolverKind::Lcopg => false,
        SolverKind::Auto => inst.streamable_chunks() <= limits.oracle_bound,
    };
    let out = if exact {
        solver::solve_exact(&inst, limits).map_err(err)?
    } else {
        let time_limit = std::time::Duration::try_from_secs_f64(time_limit_s).map_err(err)?;
        let cfg = LcopgConfig { window: window.max(1), soft_factor, time_limit, ..LcopgConfig::default() };
        solver::solve_lcopg(&inst, &cfg)
    };
    Ok(Plan::from_outcome(&out))
}

/// Greedy plan: earliest-fit placement, preloading what does not fit.
#[pyfunction]
#[pyo3(signature = (graph, m_peak = solver::DEFAULT_M_PEAK, lam = solver::DEFAULT_LAMBDA, model = None))]
fn greedy(graph: &Graph, m_peak: u64, lam: f64, model: Option<&LatencyModel>) -> PyResult<Plan> {
    let caps = capacity::capacity_profile(&graph.inner, &model_or_default(model), &ThresholdConfig::default());
    let inst = solver::build_instance(&graph.inner, &caps, m_peak, lam).map_err(err)?;
    let plan = solver::greedy_plan(&inst);
    let out = SolveOutcome {
        objective: solver::objective(&inst, &plan),
        plan,
        status: solver::SolveStatus::Heuristic,
        diagnostics: Default::default(),
    };
    Ok(Plan::from_outcome(&out))
}

/// Violations of `plan` against the instance, as readable strings; empty
/// when feasible. Soft capacity adjustments recorded in the plan apply.
#[pyfunction]
#[pyo3(signature = (graph, plan, m_peak = solver::DEFAULT_M_PEAK, model = None))]
fn check_constraints(graph: &Graph, plan: &Plan, m_peak: u64, model: Option<&LatencyModel>) -> PyResult<Vec<String>> {
    plan.file.check_references(&graph.inner).map_err(err)?;
    let caps = capacity::capacity_profile(&graph.inner, &model_or_default(model), &ThresholdConfig::default());
    let inst = solver::build_instance(&graph.inner, &caps, m_peak, 0.5).map_err(err)?;
    let effective = solver::apply_adjustments(&caps, &plan.file.meta.capacity_adjustments);
    Ok(solver::check_constraints_with(&inst, &plan.file.plan, &effective)
        .iter()
        .map(|v| format!("{v:?}"))
        .collect())
}

/// Adaptive fusion; returns (graph after splits, plan, [(layer, at, c1, c2, c_fused)]).
#[pyfunction]
#[pyo3(signature = (graph, m_peak = solver::DEFAULT_M_PEAK, lam = solver::DEFAULT_LAMBDA, alpha = 0.2, max_rounds = 8, model = None))]
#[allow(clippy::type_complexity)]
fn adaptive_fusion(
    graph: &Graph,
    m_peak: u64,
    lam: f64,
    alpha: f64,
    max_rounds: usize,
    model: Option<&LatencyModel>,
) -> PyResult<(Graph, Plan, Vec<(usize, usize, u64, u64, u64)>)> {
    let setup = SolveSetup {
        model: model_or_default(model),
        thresholds: ThresholdConfig::default(),
        m_peak,
        lambda: lam,
        lcopg: LcopgConfig::default(),
    };
    let cfg = FusionConfig { alpha, max_rounds, ..FusionConfig::default() };
    let out = fusion::adaptive_fusion(&graph.inner, &setup, &cfg).map_err(err)?;
    let splits = out.splits.iter().map(|s| (s.layer, s.at, s.c1, s.c2, s.c_fused)).collect();
    Ok((Graph { inner: out.graph }, Plan::from_outcome(&out.outcome), splits))
}

/// Replays `plan` (strategy "plan") or a baseline strategy.
#[pyfunction]
#[pyo3(signature = (graph, strategy = "plan", plan = None, hardware = None, model = None))]
fn simulate(
    graph: &Graph,
    strategy: &str,
    plan: Option<&Plan>,
    hardware: Option<&Hardware>,
    model: Option<&LatencyModel>,
) -> PyResult<Report> {
    let s = self::strategy(strategy, plan).map_err(err)?;
    let hw = hardware.map(|h| h.inner.clone()).unwrap_or_default();
    simulator::simulate(&graph.inner, &model_or_default(model), &s, &hw)
        .map(|inner| Report { inner })
        .map_err(err)
}

/// `plan` with streamed weights moved to the preload set until `ratio` of
/// all weight bytes are preloaded.
#[pyfunction]
fn preload_ratio_plan(graph: &Graph, plan: &Plan, ratio: f64) -> PyResult<Plan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(err("ratio must lie in [0, 1]"));
    }
    let mut file = plan.file.clone();
    file.plan = simulator::preload_ratio_plan(&graph.inner, &plan.file.plan, ratio);
    Ok(Plan { file })
}

#[pymodule]
fn streamplan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<LatencyModel>()?;
    m.add_class::<Hardware>()?;
    m.add_class::<Plan>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(capacity_profile, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(greedy, m)?)?;
    m.add_function(wrap_pyfunction!(check_constraints, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_fusion, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(preload_ratio_plan, m)?)?;
    Ok(())
}

//! Run configuration: file (TOML or JSON) first, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use streamplan::fusion::FusionConfig;
use streamplan::solver::{ExactLimits, LcopgConfig, DEFAULT_LAMBDA, DEFAULT_M_PEAK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    /// Exact search when the instance is within the oracle bound, LC-OPG otherwise.
    Auto,
    Exact,
    Lcopg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    Plan,
    FullPreload,
    AlwaysNext,
    SameOpType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub latency_model: Option<PathBuf>,
    pub hardware: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub workload: Option<PathBuf>,
    pub out: PathBuf,

    pub m_peak: u64,
    pub lambda: f64,
    pub solver: SolverChoice,
    pub window: usize,
    pub soft_factor: f64,
    /// Seconds.
    pub time_limit: f64,
    pub oracle_bound: u64,
    pub node_budget: u64,

    /// Run adaptive fusion when the graph has fused nodes.
    pub fusion: bool,
    pub alpha: f64,
    pub lambda_pen: f64,
    pub mu: f64,
    pub max_rounds: usize,

    pub strategy: StrategyName,
    pub ratios: Vec<f64>,
    pub svg: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lc = LcopgConfig::default();
        let ex = ExactLimits::default();
        let fu = FusionConfig::default();
        Self {
            graph: None,
            latency_model: None,
            hardware: None,
            plan: None,
            profile: None,
            workload: None,
            out: PathBuf::from("out"),
            m_peak: DEFAULT_M_PEAK,
            lambda: DEFAULT_LAMBDA,
            solver: SolverChoice::Auto,
            window: lc.window,
            soft_factor: lc.soft_factor,
            time_limit: lc.time_limit.as_secs_f64(),
            oracle_bound: ex.oracle_bound,
            node_budget: ex.node_budget,
            fusion: true,
            alpha: fu.alpha,
            lambda_pen: fu.lambda_pen,
            mu: fu.mu,
            max_rounds: fu.max_rounds,
            strategy: StrategyName::Plan,
            ratios: Vec::new(),
            svg: false,
            seed: 0,
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Parses `text` as JSON when `path` ends in `.json`, TOML otherwise.
pub fn parse_document<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    if is_json(path) {
        serde_json::from_str(text).with_context(|| format!("{}: invalid JSON", path.display()))
    } else {
        toml::from_str(text).with_context(|| format!("{}: invalid TOML", path.display()))
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        parse_document(path, &read_file(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!("lambda must lie in [0, 1], got {}", self.lambda);
        }
        if self.soft_factor.is_nan() || self.soft_factor < 1.0 {
            bail!("soft factor must be >= 1, got {}", self.soft_factor);
        }
        if !self.time_limit.is_finite() || self.time_limit < 0.0 {
            bail!("time limit must be a non-negative number of seconds");
        }
        if self.window == 0 {
            bail!("window must be at least 1 layer");
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            bail!("preload ratios must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn lcopg(&self) -> LcopgConfig {
        LcopgConfig {
            time_limit: std::time::Duration::from_secs_f64(self.time_limit),
            window: self.window,
            soft_factor: self.soft_factor,
            ..LcopgConfig::default()
        }
    }

    pub fn exact(&self) -> ExactLimits {
        ExactLimits {
            node_budget: self.node_budget,
            oracle_bound: self.oracle_bound,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            alpha: self.alpha,
            lambda_pen: self.lambda_pen,
            mu: self.mu,
            max_rounds: self.max_rounds,
        }
    }
}

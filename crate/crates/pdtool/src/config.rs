//! Experiment configuration documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pdtool_core::consensus::ConsensusMethod;
use pdtool_core::energysim::TradingConfig;
use pdtool_core::fedsim::{LocalSolver, Variant};
use pdtool_core::graph::TopologySpec;
use pdtool_core::saddle::InexactConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Saddle,
    Consensus,
    Dynamics,
    Federated,
    Energy,
    Check,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Saddle => "saddle",
            ExperimentKind::Consensus => "consensus",
            ExperimentKind::Dynamics => "dynamics",
            ExperimentKind::Federated => "federated",
            ExperimentKind::Energy => "energy",
            ExperimentKind::Check => "check",
        }
    }
}

/// Top-level experiment document. Exactly the block named by `kind` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Output directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saddle: Option<SaddleExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federated: Option<FederatedExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckExperiment>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Name used for output files.
    pub fn stem(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    fn validate_shape(&self) -> Result<()> {
        let present = [
            (ExperimentKind::Saddle, self.saddle.is_some()),
            (ExperimentKind::Consensus, self.consensus.is_some()),
            (ExperimentKind::Dynamics, self.dynamics.is_some()),
            (ExperimentKind::Federated, self.federated.is_some()),
            (ExperimentKind::Energy, self.energy.is_some()),
            (ExperimentKind::Check, self.check.is_some()),
        ];
        for (kind, here) in present {
            if kind == self.kind && !here && kind != ExperimentKind::Check {
                return Err(HarnessError::Config(format!("kind \"{}\" needs a \"{}\" block", kind.as_str(), kind.as_str())));
            }
            if kind != self.kind && here {
                return Err(HarnessError::Config(format!(
                    "block \"{}\" does not belong to kind \"{}\"",
                    kind.as_str(),
                    self.kind.as_str()
                )));
            }
        }
        if let Some(name) = &self.name {
            let ok = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
                && !name.starts_with('.');
            if !ok {
                return Err(HarnessError::Config(format!(
                    "name \"{name}\" may only contain letters, digits, '_', '-' and '.'"
                )));
            }
        }
        Ok(())
    }
}

/// Objective block description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Quadratic {
        #[serde(rename = "Q")]
        q_mat: Vec<Vec<f64>>,
        q: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    CenteredQuadratic {
        center: Vec<f64>,
        weight: f64,
    },
    Linear {
        c: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    Zero {
        dim: usize,
    },
    /// Either inline `features`/`labels` or a CSV `data_file` whose rows are
    /// `features..., label` with labels in {-1, +1}.
    Logistic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_file: Option<PathBuf>,
        l2: f64,
    },
    Piecewise {
        dim: usize,
        quad: f64,
        /// `[slope, intercept]` pairs.
        pieces: Vec<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rule: Option<SubgradientRuleSpec>,
    },
    SineQuadratic {
        #[serde(rename = "Q")]
        q_mat: Vec<Vec<f64>>,
        q: Vec<f64>,
        amplitude: f64,
        frequency: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgradientRuleSpec {
    MaxSlope,
    MinSlope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleExperiment {
    pub problem: SaddleProblemSpec,
    pub solver: SaddleSolverSpec,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SaddleProblemSpec {
    /// Random strictly convex quadratic blocks drawn from the experiment seed.
    Random { dims: Vec<usize>, m: usize, rho: f64 },
    Explicit { blocks: Vec<BlockSpec>, rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub oracle: OracleSpec,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SaddleSolverSpec {
    Alm,
    InexactAlm {
        inner: InexactConfig,
    },
    Ahu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    Admm,
    Jacobi,
    Pdmm {
        blocks_per_iter: usize,
        #[serde(default)]
        eta: f64,
        /// Per-row dual weights; defaults to `1/K`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<Vec<f64>>,
        /// Per-row backward weights; defaults to 0.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nu: Option<Vec<f64>>,
        /// One matrix per block for a quadratic Bregman generator.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bregman_matrices: Option<Vec<Vec<Vec<f64>>>>,
    },
}

/// Agents' local objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentsSpec {
    /// Random strictly convex quadratics, one per node, drawn from the experiment seed.
    Random { dim: usize },
    Oracles(Vec<OracleSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    #[default]
    Run,
    /// Native and primal-dual EXTRA side by side at `α = 1/ρ`.
    ExtraEquivalence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusExperiment {
    pub topology: TopologySpec,
    pub agents: AgentsSpec,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub mode: ConsensusMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<ConsensusMethod>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Initial iterates uniform in `[-scale, scale]`; 0 starts from zero.
    #[serde(default)]
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsExperiment {
    pub topology: TopologySpec,
    pub agents: AgentsSpec,
    /// Euler step; defaults to half the stability bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Flag threshold for `V̇`.
    #[serde(default = "default_v_dot_tol")]
    pub v_dot_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FederatedInstanceSpec {
    /// Heterogeneous random quadratics drawn from the experiment seed.
    Synthetic {
        #[serde(rename = "N")]
        n: usize,
        dim: usize,
    },
    Devices {
        oracles: Vec<OracleSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FederatedAlgorithm {
    #[default]
    Pdmm,
    Fedprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedExperiment {
    pub instance: FederatedInstanceSpec,
    #[serde(default)]
    pub algorithm: FederatedAlgorithm,
    /// Blocks drawn per round out of `N + 1`.
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub rho: f64,
    pub eta0: f64,
    pub eta_i: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub local_solver: LocalSolver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Preset(PresetSpec),
    Explicit {
        peers: Vec<PeerSpec>,
        arcs: Vec<ArcSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trade_cap: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PresetSpec {
    /// Strictly convex ring of `n` peers.
    RingBenchmark { n: usize },
    /// Two peers with linear costs.
    LinearPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSpec {
    pub consumption: f64,
    pub cost: OracleSpec,
}

/// A directed trade arc: `seller` may sell to `buyer`. Every arc needs its reverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcSpec {
    pub seller: usize,
    pub buyer: usize,
    pub gamma: OracleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyExperiment {
    pub network: NetworkSpec,
    #[serde(default)]
    pub trading: TradingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CheckExperiment {
    /// Restrict to one module's suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
}

fn default_budget() -> usize {
    1000
}

fn default_tol() -> f64 {
    1e-8
}

fn default_rho() -> f64 {
    1.0
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_v_dot_tol() -> f64 {
    1e-10
}

fn default_variant() -> Variant {
    Variant::Convex
}

/// Canonical JSON of a config: keys sorted at every level, no whitespace, defaults filled in.
pub fn canonical_json(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    sorted(value).to_string()
}

fn sorted(value: serde_json::Value) -> serde_json::Value {
    match value {
        serde_json::Value::Object(map) => {
            let entries: BTreeMap<String, serde_json::Value> = map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            serde_json::Value::Object(entries.into_iter().collect())
        }
        serde_json::Value::Array(items) => serde_json::Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

//! Turns config descriptions into core problem objects.

use std::collections::BTreeMap;
use std::path::Path;

use pdtool_core::consensus::{build_consensus_problem, random_quadratics, ConsensusProblem};
use pdtool_core::energysim::EnergyNetwork;
use pdtool_core::fedsim::FederatedInstance;
use pdtool_core::graph::{Topology, TopologySpec};
use pdtool_core::linalg::{Matrix, Vector};
use pdtool_core::oracle::{FunctionOracle, SubgradientRule};
use pdtool_core::saddle::{Block, Bregman, PdmmConfig, ProblemSpec, SaddleMethod};

use crate::config::{
    AgentsSpec, FederatedInstanceSpec, NetworkSpec, OracleSpec, PresetSpec, SaddleProblemSpec, SaddleSolverSpec,
    SubgradientRuleSpec,
};
use crate::error::{Context, HarnessError, Result};

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Dense matrix from rows; rows must share one nonzero length.
pub fn matrix_from_rows(what: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(config_err(format!("{what} must be a nonempty matrix")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(config_err(format!("{what}: row {bad} has {} entries, expected {cols}", rows[bad].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(config_err(format!("{what} has non-finite entries")));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn vector(what: &str, v: &[f64]) -> Result<Vector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(config_err(format!("{what} has non-finite entries")));
    }
    Ok(Vector::from_column_slice(v))
}

fn square(what: &str, rows: &[Vec<f64>], n: usize) -> Result<Matrix> {
    let m = matrix_from_rows(what, rows)?;
    if m.nrows() != n || m.ncols() != n {
        return Err(config_err(format!("{what} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

/// Rows `features..., label` with labels in {-1, +1}; `#` starts a comment line.
pub fn read_logistic_csv(path: &Path) -> Result<(Matrix, Vector)> {
    let io = |message: String| HarnessError::Io {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io(e.to_string()))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io(e.to_string()))?;
        let values = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| io(format!("record {}: {e}", line + 1)))?;
        if values.len() < 2 {
            return Err(io(format!("record {} needs at least one feature and a label", line + 1)));
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(io("no data rows".into()));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(io("records have different lengths".into()));
    }
    let features = Matrix::from_fn(rows.len(), width - 1, |i, j| rows[i][j]);
    let labels = Vector::from_iterator(rows.len(), rows.iter().map(|r| r[width - 1]));
    Ok((features, labels))
}

/// `base` resolves relative data-file paths.
pub fn build_oracle(spec: &OracleSpec, base: &Path) -> Result<FunctionOracle> {
    let ctx = "oracle";
    match spec {
        OracleSpec::Quadratic { q_mat, q, constant } => {
            let q_mat = square("Q", q_mat, q.len())?;
            FunctionOracle::quadratic_with_constant(q_mat, vector("q", q)?, *constant).context(ctx)
        }
        OracleSpec::CenteredQuadratic { center, weight } => {
            if !(*weight > 0.0 && weight.is_finite()) {
                return Err(config_err(format!("centered_quadratic weight {weight} must be positive")));
            }
            Ok(FunctionOracle::centered_quadratic(&vector("center", center)?, *weight))
        }
        OracleSpec::Linear { c, constant } => Ok(FunctionOracle::linear_with_constant(vector("c", c)?, *constant)),
        OracleSpec::Zero { dim } => {
            if *dim == 0 {
                return Err(config_err("zero oracle needs dim >= 1"));
            }
            Ok(FunctionOracle::zero(*dim))
        }
        OracleSpec::Logistic {
            features,
            labels,
            data_file,
            l2,
        } => {
            let (x, y) = match (features, labels, data_file) {
                (Some(f), Some(l), None) => (matrix_from_rows("features", f)?, vector("labels", l)?),
                (None, None, Some(path)) => read_logistic_csv(&base.join(path))?,
                _ => {
                    return Err(config_err(
                        "logistic oracle needs either \"features\" and \"labels\" or a \"data_file\"",
                    ))
                }
            };
            FunctionOracle::logistic(x, y, *l2).context(ctx)
        }
        OracleSpec::Piecewise { dim, quad, pieces, rule } => {
            let rule = rule.map(|r| match r {
                SubgradientRuleSpec::MaxSlope => SubgradientRule::MaxSlope,
                SubgradientRuleSpec::MinSlope => SubgradientRule::MinSlope,
            });
            FunctionOracle::piecewise(*dim, *quad, pieces.iter().map(|p| (p[0], p[1])).collect(), rule).context(ctx)
        }
        OracleSpec::SineQuadratic {
            q_mat,
            q,
            amplitude,
            frequency,
        } => {
            let q_mat = square("Q", q_mat, q.len())?;
            FunctionOracle::sine_quadratic(q_mat, vector("q", q)?, *amplitude, *frequency).context(ctx)
        }
    }
}

pub fn build_problem(spec: &SaddleProblemSpec, seed: u64, base: &Path) -> Result<ProblemSpec> {
    match spec {
        SaddleProblemSpec::Random { dims, m, rho } => {
            if dims.is_empty() || dims.contains(&0) || *m == 0 {
                return Err(config_err("random problem needs nonzero block dimensions and m >= 1"));
            }
            ProblemSpec::random_quadratic(dims, *m, *rho, seed).context("saddle")
        }
        SaddleProblemSpec::Explicit { blocks, rho } => {
            let blocks = blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let oracle = build_oracle(&b.oracle, base)?;
                    let a = matrix_from_rows(&format!("block {i} A"), &b.a)?;
                    Ok(Block::new(oracle, a))
                })
                .collect::<Result<Vec<_>>>()?;
            ProblemSpec::new(blocks, *rho).context("saddle")
        }
    }
}

pub fn build_saddle_method(spec: &SaddleSolverSpec, p: &ProblemSpec, seed: u64) -> Result<SaddleMethod> {
    let method = match spec {
        SaddleSolverSpec::Alm => SaddleMethod::Alm,
        SaddleSolverSpec::InexactAlm { inner } => {
            inner.validate().context("saddle")?;
            SaddleMethod::InexactAlm(*inner)
        }
        SaddleSolverSpec::Ahu { alpha } => SaddleMethod::Ahu { alpha: *alpha },
        SaddleSolverSpec::Admm => SaddleMethod::Admm,
        SaddleSolverSpec::Jacobi => SaddleMethod::Jacobi,
        SaddleSolverSpec::Pdmm {
            blocks_per_iter,
            eta,
            tau,
            nu,
            bregman_matrices,
        } => {
            let mut cfg = PdmmConfig::uniform(p, *blocks_per_iter, *eta, seed);
            if let Some(tau) = tau {
                cfg.tau = tau.clone();
            }
            if let Some(nu) = nu {
                cfg.nu = nu.clone();
            }
            if let Some(mats) = bregman_matrices {
                if mats.len() != p.n_blocks() {
                    return Err(config_err(format!("{} Bregman matrices for {} blocks", mats.len(), p.n_blocks())));
                }
                let mats = mats
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| square(&format!("Bregman matrix {i}"), rows, p.block_range(i).len()))
                    .collect::<Result<Vec<_>>>()?;
                cfg.bregman = Bregman::Quadratic(mats);
            }
            cfg.validate(p).context("saddle")?;
            SaddleMethod::Pdmm(cfg)
        }
    };
    Ok(method)
}

/// Fills a missing generator seed with the experiment seed.
pub fn build_topology(spec: &TopologySpec, seed: u64) -> Result<Topology> {
    let spec = match spec {
        TopologySpec::Generated {
            generator,
            n,
            p,
            seed: None,
        } => TopologySpec::Generated {
            generator: *generator,
            n: *n,
            p: *p,
            seed: Some(seed),
        },
        other => other.clone(),
    };
    spec.build().context("graph")
}

pub fn build_agents(spec: &AgentsSpec, n: usize, seed: u64, base: &Path) -> Result<Vec<FunctionOracle>> {
    match spec {
        AgentsSpec::Random { dim } => {
            if *dim == 0 {
                return Err(config_err("agents need dim >= 1"));
            }
            random_quadratics(n, *dim, seed).context("consensus")
        }
        AgentsSpec::Oracles(list) => {
            if list.len() != n {
                return Err(config_err(format!("{} agent oracles for {n} nodes", list.len())));
            }
            list.iter().map(|o| build_oracle(o, base)).collect()
        }
    }
}

pub fn build_consensus(
    topology: &TopologySpec,
    agents: &AgentsSpec,
    rho: f64,
    seed: u64,
    base: &Path,
) -> Result<ConsensusProblem> {
    let topology = build_topology(topology, seed)?;
    let oracles = build_agents(agents, topology.n_nodes(), seed, base)?;
    if oracles.iter().any(|o| !o.is_smooth()) {
        return Err(config_err("consensus agents must be smooth"));
    }
    build_consensus_problem(oracles, topology, rho).context("consensus")
}

pub fn build_federated(spec: &FederatedInstanceSpec, seed: u64, base: &Path) -> Result<FederatedInstance> {
    match spec {
        FederatedInstanceSpec::Synthetic { n, dim } => {
            FederatedInstance::synthetic_quadratic(*n, *dim, seed).context("federated")
        }
        FederatedInstanceSpec::Devices { oracles, weights } => {
            let devices = oracles.iter().map(|o| build_oracle(o, base)).collect::<Result<Vec<_>>>()?;
            match weights {
                Some(w) => FederatedInstance::new(devices, w.clone()).context("federated"),
                None => FederatedInstance::uniform(devices).context("federated"),
            }
        }
    }
}

pub fn build_network(spec: &NetworkSpec, base: &Path) -> Result<EnergyNetwork> {
    match spec {
        NetworkSpec::Preset(PresetSpec::RingBenchmark { n }) => EnergyNetwork::ring_benchmark(*n).context("energy"),
        NetworkSpec::Preset(PresetSpec::LinearPair) => EnergyNetwork::linear_pair().context("energy"),
        NetworkSpec::Explicit { peers, arcs, trade_cap } => {
            let n = peers.len();
            let mut gammas = BTreeMap::new();
            let mut edges = Vec::new();
            for a in arcs {
                if a.seller >= n || a.buyer >= n || a.seller == a.buyer {
                    return Err(config_err(format!("arc {} -> {} is not between two distinct peers", a.seller, a.buyer)));
                }
                if gammas.insert((a.seller, a.buyer), build_oracle(&a.gamma, base)?).is_some() {
                    return Err(config_err(format!("arc {} -> {} listed twice", a.seller, a.buyer)));
                }
                if a.seller < a.buyer {
                    edges.push((a.seller, a.buyer));
                }
            }
            for &(s, b) in gammas.keys() {
                if !gammas.contains_key(&(b, s)) {
                    return Err(config_err(format!("arc {s} -> {b} has no reverse arc {b} -> {s}")));
                }
            }
            let topology = Topology::new(n, &edges).context("energy")?;
            let consumption = peers.iter().map(|p| p.consumption).collect();
            let costs = peers.iter().map(|p| build_oracle(&p.cost, base)).collect::<Result<Vec<_>>>()?;
            let net = EnergyNetwork::new(topology, consumption, costs, gammas).context("energy")?;
            match trade_cap {
                Some(cap) => net.with_trade_cap(*cap).context("energy"),
                None => Ok(net),
            }
        }
    }
}

//! Experiment dispatch. Building and validation happen in [`prepare`], so a
//! rejected config never reaches the writer.

use std::collections::BTreeMap;
use std::path::Path;

use pdtool_core::consensus::{self, extra_equivalence, ConsensusMethod, ConsensusProblem, ConsensusState, CONSENSUS_COLUMNS};
use pdtool_core::dynamics::{euler_flow, flow_reference, flow_rhs, h_max, pi_controller_view, FlowState, FLOW_COLUMNS};
use pdtool_core::energysim::{allocation, run_trading, EnergyNetwork, TradingConfig, TRADING_COLUMNS};
use pdtool_core::fedsim::{run_federated, run_fedprox_baseline, FedConfig, FederatedInstance, FED_COLUMNS};
use pdtool_core::linalg::Matrix;
use pdtool_core::reference::solve_saddle;
use pdtool_core::saddle::{self, ProblemSpec, SaddleMethod, SolverState, SADDLE_COLUMNS};
use pdtool_core::trace::Trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::check::{self, CHECK_COLUMNS};
use crate::config::{ConsensusMode, ExperimentConfig, ExperimentKind, FederatedAlgorithm};
use crate::error::{Context, HarnessError, Result};
use crate::model;

/// One trace of an experiment. `suffix` distinguishes several traces of one run.
#[derive(Debug, Clone)]
pub struct NamedTrace {
    pub suffix: Option<&'static str>,
    pub declared: &'static [&'static str],
    pub trace: Trace,
}

/// Everything a run produces before it is written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub traces: Vec<NamedTrace>,
    /// Flags raised by the harness on top of the trace flags.
    pub flags: Vec<String>,
    pub extras: BTreeMap<String, Value>,
    /// Extra JSON documents as `(suffix, value)`.
    pub artifacts: Vec<(&'static str, Value)>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            traces: Vec::new(),
            flags: Vec::new(),
            extras: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn push(&mut self, suffix: Option<&'static str>, declared: &'static [&'static str], trace: Trace) {
        self.traces.push(NamedTrace { suffix, declared, trace });
    }

    fn extra(&mut self, key: &str, value: impl Into<Value>) {
        self.extras.insert(key.to_string(), value.into());
    }

    /// Harness flags followed by every trace flag, deduplicated in order.
    pub fn all_flags(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in self.flags.iter().chain(self.traces.iter().flat_map(|t| t.trace.flags())) {
            if !out.contains(f) {
                out.push(f.clone());
            }
        }
        out
    }
}

/// A validated experiment ready to run.
pub enum Prepared {
    Saddle {
        problem: ProblemSpec,
        method: SaddleMethod,
        budget: usize,
        tol: f64,
    },
    Consensus {
        problem: ConsensusProblem,
        mode: ConsensusMode,
        method: Option<ConsensusMethod>,
        x0: Matrix,
        budget: usize,
        tol: f64,
    },
    Dynamics {
        problem: ConsensusProblem,
        x0: Matrix,
        h: Option<f64>,
        steps: usize,
        v_dot_tol: f64,
    },
    Federated {
        instance: FederatedInstance,
        config: FedConfig,
        algorithm: FederatedAlgorithm,
    },
    Energy {
        network: EnergyNetwork,
        config: TradingConfig,
    },
    Check {
        filter: Option<String>,
    },
}

fn uniform_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    if scale == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{what} must be positive, got {v}")))
    }
}

fn nonnegative(what: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{what} must be nonnegative, got {v}")))
    }
}

/// Builds every object the run needs; `base` resolves relative data files.
pub fn prepare(cfg: &ExperimentConfig, base: &Path) -> Result<Prepared> {
    let seed = cfg.seed;
    let block = |kind: ExperimentKind| HarnessError::Config(format!("missing \"{}\" block", kind.as_str()));
    Ok(match cfg.kind {
        ExperimentKind::Saddle => {
            let s = cfg.saddle.as_ref().ok_or_else(|| block(cfg.kind))?;
            positive("tol", s.tol)?;
            let problem = model::build_problem(&s.problem, seed, base)?;
            let method = model::build_saddle_method(&s.solver, &problem, seed)?;
            if let SaddleMethod::Ahu { alpha: Some(a) } = method {
                positive("ahu alpha", a)?;
            }
            Prepared::Saddle {
                problem,
                method,
                budget: s.budget,
                tol: s.tol,
            }
        }
        ExperimentKind::Consensus => {
            let c = cfg.consensus.as_ref().ok_or_else(|| block(cfg.kind))?;
            positive("tol", c.tol)?;
            nonnegative("init_scale", c.init_scale)?;
            let mut problem = model::build_consensus(&c.topology, &c.agents, c.rho, seed, base)?;
            if let Some(alpha) = c.alpha {
                problem = problem.with_alpha(alpha).context("consensus")?;
            }
            let method = match (c.mode, c.solver) {
                (ConsensusMode::Run, None) => {
                    return Err(HarnessError::Config("consensus run needs a \"solver\"".into()));
                }
                (ConsensusMode::Run, Some(m)) => {
                    if let ConsensusMethod::DistributedAlm { inner } = &m {
                        inner.validate().context("consensus")?;
                    }
                    Some(m)
                }
                (ConsensusMode::ExtraEquivalence, None) => None,
                (ConsensusMode::ExtraEquivalence, Some(_)) => {
                    return Err(HarnessError::Config("extra_equivalence mode takes no \"solver\"".into()));
                }
            };
            let x0 = uniform_matrix(problem.n_agents(), problem.dim(), c.init_scale, seed);
            Prepared::Consensus {
                problem,
                mode: c.mode,
                method,
                x0,
                budget: c.budget,
                tol: c.tol,
            }
        }
        ExperimentKind::Dynamics => {
            let d = cfg.dynamics.as_ref().ok_or_else(|| block(cfg.kind))?;
            nonnegative("init_scale", d.init_scale)?;
            nonnegative("v_dot_tol", d.v_dot_tol)?;
            if let Some(h) = d.h {
                positive("h", h)?;
            }
            let problem = model::build_consensus(&d.topology, &d.agents, 1.0, seed, base)?;
            let x0 = uniform_matrix(problem.n_agents(), problem.dim(), d.init_scale, seed);
            Prepared::Dynamics {
                problem,
                x0,
                h: d.h,
                steps: d.steps,
                v_dot_tol: d.v_dot_tol,
            }
        }
        ExperimentKind::Federated => {
            let f = cfg.federated.as_ref().ok_or_else(|| block(cfg.kind))?;
            let instance = model::build_federated(&f.instance, seed, base)?;
            let config = FedConfig {
                rho: f.rho,
                eta0: f.eta0,
                eta: vec![f.eta_i; instance.n_devices()],
                blocks_per_round: f.m,
                rounds: f.t,
                local_solver: f.local_solver,
                variant: f.variant,
                seed,
            };
            config.validate(&instance).context("federated")?;
            Prepared::Federated {
                instance,
                config,
                algorithm: f.algorithm,
            }
        }
        ExperimentKind::Energy => {
            let e = cfg.energy.as_ref().ok_or_else(|| block(cfg.kind))?;
            let network = model::build_network(&e.network, base)?;
            e.trading.validate().context("energy")?;
            Prepared::Energy {
                network,
                config: e.trading.clone(),
            }
        }
        ExperimentKind::Check => {
            let filter = cfg.check.as_ref().and_then(|c| c.filter.clone());
            if let Some(f) = &filter {
                check::validate_filter(f)?;
            }
            Prepared::Check { filter }
        }
    })
}

impl Prepared {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Prepared::Saddle { .. } => ExperimentKind::Saddle,
            Prepared::Consensus { .. } => ExperimentKind::Consensus,
            Prepared::Dynamics { .. } => ExperimentKind::Dynamics,
            Prepared::Federated { .. } => ExperimentKind::Federated,
            Prepared::Energy { .. } => ExperimentKind::Energy,
            Prepared::Check { .. } => ExperimentKind::Check,
        }
    }

    pub fn execute(&self) -> Result<Outcome> {
        let mut out = Outcome::new();
        match self {
            Prepared::Saddle {
                problem,
                method,
                budget,
                tol,
            } => {
                let run = saddle::run(problem, method, SolverState::zeros(problem), *budget, *tol).context("saddle")?;
                out.extra("method", method.name());
                out.extra("converged", run.converged);
                out.extra("diverged", run.diverged);
                out.extra("iterations", run.state.k);
                let kkt = problem.kkt_residual(&run.state.x, &run.state.lambda).context("saddle")?;
                out.extra("kkt_residual", finite_or_null(kkt));
                if problem.blocks().iter().all(|b| b.oracle.is_convex()) {
                    match solve_saddle(problem) {
                        Ok(r) => {
                            out.extra("reference_objective", r.objective);
                            if !run.diverged {
                                let f = problem.objective(&run.state.x).context("saddle")?;
                                out.extra("objective_gap", finite_or_null((f - r.objective).abs()));
                            }
                        }
                        Err(e) => out.extra("reference", format!("unavailable: {e}")),
                    }
                }
                if *budget > 0 && !run.converged && !run.diverged {
                    out.flags.push(format!("KKT residual above {tol:e} after {budget} iterations"));
                }
                out.push(None, &SADDLE_COLUMNS, run.trace);
            }
            Prepared::Consensus {
                problem,
                mode,
                method,
                x0,
                budget,
                tol,
            } => {
                let f_star = problem.reference().context("consensus")?.f_star;
                out.extra("f_star", f_star);
                match (mode, method) {
                    (ConsensusMode::Run, Some(method)) => {
                        let init = ConsensusState::new(problem, x0.clone()).context("consensus")?;
                        let run = consensus::run(problem, method, init, *budget, *tol, f_star).context("consensus")?;
                        out.extra("method", method.name());
                        out.extra("alpha", problem.alpha());
                        out.extra("diverged", run.diverged);
                        out.extra("iterations", run.state.k);
                        let reached = run.trace.last("kkt_residual").is_some_and(|r| r <= *tol);
                        if *budget > 0 && !reached && !run.diverged {
                            out.flags.push(format!("KKT residual above {tol:e} after {budget} iterations"));
                        }
                        out.push(None, &CONSENSUS_COLUMNS, run.trace);
                    }
                    _ => {
                        let (native, pd, deviation) =
                            extra_equivalence(problem, x0.clone(), *budget, f_star).context("consensus")?;
                        out.extra("max_deviation", deviation);
                        if deviation > 1e-10 {
                            out.flags.push(format!("EXTRA forms deviate by {deviation:e}"));
                        }
                        out.push(Some("native"), &CONSENSUS_COLUMNS, native);
                        out.push(Some("pd"), &CONSENSUS_COLUMNS, pd);
                    }
                }
            }
            Prepared::Dynamics {
                problem,
                x0,
                h,
                steps,
                v_dot_tol,
            } => {
                let limit = h_max(problem);
                let h = h.unwrap_or(0.5 * limit);
                let reference = flow_reference(problem).context("dynamics")?;
                let eta0 = Matrix::zeros(x0.nrows(), x0.ncols());
                let init = FlowState::new(x0.clone(), eta0, h).context("dynamics")?;
                let (state, report) = euler_flow(problem, &reference, init, *steps).context("dynamics")?;
                let (x_dot, _) = flow_rhs(problem, &state.x, &state.eta).context("dynamics")?;
                let u = pi_controller_view(problem, &state.x, &state.eta).context("dynamics")?;
                let plant = -problem.grad(&state.x).context("dynamics")? + u;
                out.extra("h", h);
                out.extra("h_max", limit);
                out.extra("max_v_dot", report.max_v_dot);
                out.extra("max_v_increase", finite_or_null(report.max_v_increase));
                out.extra("consensus_residual", report.consensus_residual);
                out.extra("stationarity_residual", report.stationarity_residual);
                out.extra("pi_view_deviation", (plant - x_dot).amax());
                if report.max_v_dot > *v_dot_tol {
                    out.flags.push(format!("V_dot reached {:e}, above {v_dot_tol:e}", report.max_v_dot));
                }
                out.push(None, &FLOW_COLUMNS, report.trace);
            }
            Prepared::Federated {
                instance,
                config,
                algorithm,
            } => {
                let (_, f_star) = instance.reference().context("federated")?;
                let run = match algorithm {
                    FederatedAlgorithm::Pdmm => run_federated(instance, config, f_star),
                    FederatedAlgorithm::Fedprox => run_fedprox_baseline(instance, config, f_star),
                }
                .context("federated")?;
                out.extra("f_star", f_star);
                if let Some(gap) = run.trace.last("gap") {
                    out.extra("final_gap", finite_or_null(gap));
                }
                out.push(None, &FED_COLUMNS, run.trace);
            }
            Prepared::Energy { network, config } => {
                let run = run_trading(network, config).context("energy")?;
                match network.reference() {
                    Ok(r) => out.extra("reference_objective", r.objective),
                    Err(e) => out.extra("reference", format!("unavailable: {e}")),
                }
                out.extra("converged", run.converged);
                out.extra("rounds", run.state.k);
                let alloc = allocation(network, &run.state).context("energy")?;
                out.artifacts.push(("allocation", json!(alloc)));
                out.push(None, &TRADING_COLUMNS, run.trace);
            }
            Prepared::Check { filter } => {
                let report = check::run_suite(filter.as_deref())?;
                let failed: Vec<_> = report.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
                out.extra("cases", json!(report.iter().map(|c| json!({"module": c.module, "name": c.name, "passed": c.passed, "value": finite_or_null(c.value), "threshold": c.threshold})).collect::<Vec<_>>()));
                for name in &failed {
                    out.flags.push(format!("invariant failed: {name}"));
                }
                out.push(None, &CHECK_COLUMNS, check::report_trace(&report)?);
            }
        }
        Ok(out)
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

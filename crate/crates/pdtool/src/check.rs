//! Invariant suites behind `pdtool check`.

use pdtool_core::consensus::{
    build_consensus_problem, extra_equivalence, gradient_tracking_step, random_quadratics, run as run_consensus,
    ConsensusMethod, ConsensusState,
};
use pdtool_core::dynamics::{euler_flow, flow_reference, flow_rhs, h_max, pi_controller_view, FlowState};
use pdtool_core::energysim::{run_trading, EnergyNetwork, TradingConfig, TradingMode};
use pdtool_core::fedsim::{run_federated, FedConfig, FederatedInstance, LocalSolver, Variant};
use pdtool_core::graph::{metropolis_matrix, metropolis_weights, spectral_gap, Topology};
use pdtool_core::linalg::{asymmetry, row_mean, spectral_radius, Matrix, Vector};
use pdtool_core::oracle::{finite_difference_grad, FunctionOracle};
use pdtool_core::reference::solve_saddle;
use pdtool_core::saddle::{
    alm_step, jacobi_iteration_matrix, prox_point_dual_step, run as run_saddle, Block, PdmmConfig, ProblemSpec,
    SaddleMethod, SolverState,
};
use pdtool_core::trace::Trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::output;

pub const MODULES: [&str; 8] = ["graph", "oracle", "saddle", "consensus", "dynamics", "fedsim", "energysim", "harness"];

pub const CHECK_COLUMNS: [&str; 4] = ["case", "value", "threshold", "passed"];

/// Which side of the threshold passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub module: &'static str,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

type CaseFn = fn() -> pdtool_core::Result<(f64, f64, Bound)>;

struct Case {
    module: &'static str,
    name: &'static str,
    run: CaseFn,
}

pub fn validate_filter(filter: &str) -> Result<()> {
    if MODULES.contains(&filter) {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "unknown module \"{filter}\"; expected one of {}",
            MODULES.join(", ")
        )))
    }
}

/// Runs every case (or one module's cases) on the current rayon pool.
/// A case that errors counts as failed with value NaN.
pub fn run_suite(filter: Option<&str>) -> Result<Vec<CaseResult>> {
    if let Some(f) = filter {
        validate_filter(f)?;
    }
    let cases: Vec<&Case> = CASES.iter().filter(|c| filter.is_none_or(|f| f == c.module)).collect();
    Ok(cases
        .par_iter()
        .map(|c| {
            let (value, threshold, passed) = match (c.run)() {
                Ok((v, t, Bound::AtMost)) => (v, t, v <= t),
                Ok((v, t, Bound::Above)) => (v, t, v > t),
                Err(_) => (f64::NAN, f64::NAN, false),
            };
            CaseResult {
                module: c.module,
                name: format!("{}::{}", c.module, c.name),
                value,
                threshold,
                passed,
            }
        })
        .collect())
}

pub fn report_trace(report: &[CaseResult]) -> Result<Trace> {
    let mut t = Trace::new(&CHECK_COLUMNS);
    for (i, c) in report.iter().enumerate() {
        t.push(vec![i as f64, c.value, c.threshold, if c.passed { 1.0 } else { 0.0 }])
            .map_err(|e| HarnessError::Trace(e.to_string()))?;
    }
    Ok(t)
}

const CASES: &[Case] = &[
    Case { module: "graph", name: "metropolis_doubly_stochastic", run: metropolis_doubly_stochastic },
    Case { module: "graph", name: "laplacian_psd_with_ones_kernel", run: laplacian_psd },
    Case { module: "graph", name: "disconnected_gap_zero", run: disconnected_gap_zero },
    Case { module: "oracle", name: "gradients_match_finite_differences", run: gradient_check },
    Case { module: "oracle", name: "prox_optimality", run: prox_optimality },
    Case { module: "oracle", name: "co_coercivity", run: co_coercivity },
    Case { module: "saddle", name: "alm_is_dual_proximal_point", run: alm_prox_identity },
    Case { module: "saddle", name: "jacobi_witness_spectral_radius", run: jacobi_radius },
    Case { module: "saddle", name: "pdmm_solves_jacobi_witness", run: pdmm_witness },
    Case { module: "saddle", name: "solvers_match_reference", run: saddle_solvers_match },
    Case { module: "consensus", name: "extra_forms_agree", run: extra_forms_agree },
    Case { module: "consensus", name: "tracking_preserves_gradient_mean", run: tracking_mean },
    Case { module: "consensus", name: "methods_match_reference", run: consensus_methods_match },
    Case { module: "dynamics", name: "lyapunov_nonincreasing", run: lyapunov_nonincreasing },
    Case { module: "dynamics", name: "pi_view_identity", run: pi_view_identity },
    Case { module: "fedsim", name: "full_participation_converges", run: fed_full_participation },
    Case { module: "energysim", name: "inexact_alm_clears_ring", run: energy_ring },
    Case { module: "energysim", name: "linear_pair_oscillation_flagged", run: energy_linear_pair },
    Case { module: "harness", name: "trace_csv_byte_stable", run: csv_stable },
];

fn topologies() -> Vec<Topology> {
    vec![
        Topology::path(5).unwrap(),
        Topology::ring(6).unwrap(),
        Topology::star(5).unwrap(),
        Topology::complete(4).unwrap(),
        Topology::erdos_renyi(8, 0.5, 1).unwrap(),
    ]
}

fn metropolis_doubly_stochastic() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut worst = 0.0_f64;
    for t in topologies() {
        let w = metropolis_matrix(&t);
        let ones = Vector::from_element(t.n_nodes(), 1.0);
        worst = worst.max((&w * &ones - &ones).amax()).max(asymmetry(&w));
    }
    Ok((worst, 1e-12, Bound::AtMost))
}

fn laplacian_psd() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for t in topologies() {
        let w = metropolis_weights(&t)?;
        let l = w.laplacian();
        let ones = Vector::from_element(t.n_nodes(), 1.0);
        worst = worst.max((l * &ones).amax());
        for _ in 0..100 {
            let x = Vector::from_fn(t.n_nodes(), |_, _| rng.random_range(-1.0..1.0));
            worst = worst.max(-x.dot(&(l * &x)));
        }
    }
    Ok((worst, 1e-12, Bound::AtMost))
}

fn disconnected_gap_zero() -> pdtool_core::Result<(f64, f64, Bound)> {
    let t = Topology::new(5, &[(0, 1), (1, 2), (3, 4)])?;
    Ok((spectral_gap(&metropolis_matrix(&t))?.abs(), 1e-10, Bound::AtMost))
}

fn sample_oracles() -> Vec<FunctionOracle> {
    let q = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let qv = Vector::from_column_slice(&[1.0, -1.0]);
    let features = Matrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, -1.2]);
    let labels = Vector::from_column_slice(&[1.0, -1.0, 1.0]);
    vec![
        FunctionOracle::quadratic(q.clone(), qv.clone()).unwrap(),
        FunctionOracle::linear(qv.clone()),
        FunctionOracle::logistic(features, labels, 0.1).unwrap(),
        FunctionOracle::sine_quadratic(q, qv, 0.3, 2.0).unwrap(),
    ]
}

fn gradient_check() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for o in sample_oracles() {
        for _ in 0..20 {
            let x = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let g = o.grad(&x)?;
            let fd = finite_difference_grad(&o, &x)?;
            worst = worst.max((&g - fd).amax() / (1.0 + g.amax()));
        }
    }
    Ok((worst, 1e-5, Bound::AtMost))
}

fn prox_optimality() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0_f64;
    for o in sample_oracles().into_iter().take(3) {
        for step in [0.1, 1.0, 10.0] {
            let v = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let x = o.prox(&v, step)?;
            worst = worst.max(((&x - &v) / step + o.grad(&x)?).norm());
        }
    }
    Ok((worst, 1e-8, Bound::AtMost))
}

fn co_coercivity() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = f64::NEG_INFINITY;
    for o in sample_oracles().into_iter().take(3) {
        let ell = o.ell();
        for _ in 0..20 {
            let x = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let y = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let dg = o.grad(&x)? - o.grad(&y)?;
            let bound = if ell > 0.0 { dg.norm_squared() / ell } else { 0.0 };
            worst = worst.max(bound - (&x - &y).dot(&dg));
        }
    }
    Ok((worst, 1e-8, Bound::AtMost))
}

fn alm_prox_identity() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut worst = 0.0_f64;
    for seed in 0..10 {
        let p = ProblemSpec::random_quadratic(&[3, 4, 2], 3, 1.5, seed)?;
        let mut s = SolverState::zeros(&p);
        let mut lambda = s.lambda.clone();
        for _ in 0..50 {
            s = alm_step(&p, &s)?;
            lambda = prox_point_dual_step(&p, &lambda)?;
            worst = worst.max((&s.lambda - &lambda).amax());
        }
    }
    Ok((worst, 1e-8, Bound::AtMost))
}

/// Two scalar blocks `0.05x² + x` coupled by `x₁ + x₂ = 0`.
pub fn jacobi_witness() -> pdtool_core::Result<ProblemSpec> {
    let block = || -> pdtool_core::Result<Block> {
        let f = FunctionOracle::quadratic(Matrix::from_element(1, 1, 0.1), Vector::from_element(1, 1.0))?;
        Ok(Block::new(f, Matrix::from_element(1, 1, 1.0)))
    };
    ProblemSpec::new(vec![block()?, block()?], 1.0)
}

fn jacobi_radius() -> pdtool_core::Result<(f64, f64, Bound)> {
    let p = jacobi_witness()?;
    let radius = spectral_radius(&jacobi_iteration_matrix(&p)?);
    let run = run_saddle(&p, &SaddleMethod::Jacobi, SolverState::zeros(&p), 200, 1e-6)?;
    Ok((if run.diverged { radius } else { 0.0 }, 1.0, Bound::Above))
}

fn pdmm_witness() -> pdtool_core::Result<(f64, f64, Bound)> {
    let p = jacobi_witness()?;
    let cfg = PdmmConfig::uniform(&p, 2, 0.5, 0);
    let run = run_saddle(&p, &SaddleMethod::Pdmm(cfg), SolverState::zeros(&p), 2000, 1e-6)?;
    let s = &run.state;
    Ok((p.kkt_residual(&s.x, &s.lambda)?, 1e-6, Bound::AtMost))
}

fn saddle_solvers_match() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut worst = 0.0_f64;
    for seed in 0..3 {
        let p = ProblemSpec::random_quadratic(&[3, 3], 2, 1.0, seed)?;
        let r = solve_saddle(&p)?;
        for method in [SaddleMethod::Alm, SaddleMethod::Admm, SaddleMethod::Ahu { alpha: None }] {
            let run = run_saddle(&p, &method, SolverState::zeros(&p), 100_000, 1e-10)?;
            worst = worst.max((p.objective(&run.state.x)? - r.objective).abs());
        }
    }
    Ok((worst, 1e-6, Bound::AtMost))
}

fn extra_forms_agree() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut worst = 0.0_f64;
    for (i, t) in topologies().into_iter().enumerate() {
        let n = t.n_nodes();
        let cp = build_consensus_problem(random_quadratics(n, 3, i as u64)?, t, 2.0)?;
        let f_star = cp.reference()?.f_star;
        let x0 = Matrix::from_fn(n, 3, |a, b| ((a * 3 + b) as f64).sin());
        worst = worst.max(extra_equivalence(&cp, x0, 100, f_star)?.2);
    }
    Ok((worst, 1e-10, Bound::AtMost))
}

fn tracking_mean() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut worst = 0.0_f64;
    for (i, t) in topologies().into_iter().enumerate() {
        let n = t.n_nodes();
        let cp = build_consensus_problem(random_quadratics(n, 2, 100 + i as u64)?, t, 1.0)?;
        let mut st = ConsensusState::new(&cp, Matrix::from_fn(n, 2, |a, b| (a as f64) - (b as f64)))?;
        for _ in 0..100 {
            st = gradient_tracking_step(&cp, &st)?;
            worst = worst.max((row_mean(&st.s) - row_mean(&cp.grad(&st.x)?)).amax());
        }
    }
    Ok((worst, 1e-12, Bound::AtMost))
}

fn consensus_methods_match() -> pdtool_core::Result<(f64, f64, Bound)> {
    let t = Topology::ring(6)?;
    let cp = build_consensus_problem(random_quadratics(6, 2, 5)?, t, 1.0)?;
    let f_star = cp.reference()?.f_star;
    let mut worst = 0.0_f64;
    for m in [ConsensusMethod::ExtraNative, ConsensusMethod::GradientTracking] {
        let run = run_consensus(&cp, &m, ConsensusState::zeros(&cp)?, 20_000, 1e-10, f_star)?;
        worst = worst.max(run.trace.last("objective_gap").unwrap_or(f64::INFINITY).abs());
    }
    Ok((worst, 1e-6, Bound::AtMost))
}

fn flow_problem() -> pdtool_core::Result<pdtool_core::consensus::ConsensusProblem> {
    build_consensus_problem(random_quadratics(5, 2, 21)?, Topology::ring(5)?, 1.0)
}

fn lyapunov_nonincreasing() -> pdtool_core::Result<(f64, f64, Bound)> {
    let cp = flow_problem()?;
    let r = flow_reference(&cp)?;
    let x0 = Matrix::from_fn(5, 2, |a, b| ((a + 2 * b) as f64).cos());
    let init = FlowState::new(x0, Matrix::zeros(5, 2), 0.5 * h_max(&cp))?;
    let (_, report) = euler_flow(&cp, &r, init, 2000)?;
    Ok((report.max_v_dot, 1e-10, Bound::AtMost))
}

fn pi_view_identity() -> pdtool_core::Result<(f64, f64, Bound)> {
    let cp = flow_problem()?;
    let x = Matrix::from_fn(5, 2, |a, b| ((a * b) as f64 + 0.5).sin());
    let eta = Matrix::from_fn(5, 2, |a, b| ((a + b) as f64).cos());
    let (x_dot, _) = flow_rhs(&cp, &x, &eta)?;
    let plant = -cp.grad(&x)? + pi_controller_view(&cp, &x, &eta)?;
    Ok(((plant - x_dot).amax(), 1e-12, Bound::AtMost))
}

fn fed_full_participation() -> pdtool_core::Result<(f64, f64, Bound)> {
    let inst = FederatedInstance::synthetic_quadratic(10, 3, 3)?;
    let (_, f_star) = inst.reference()?;
    let rho = 0.04;
    let cfg = FedConfig {
        rho,
        eta0: 2.0 * rho * 10.0,
        eta: vec![0.5 * rho; 10],
        blocks_per_round: 11,
        rounds: 500,
        local_solver: LocalSolver::Exact,
        variant: Variant::Convex,
        seed: 0,
    };
    let run = run_federated(&inst, &cfg, f_star)?;
    Ok((run.trace.last("gap").unwrap_or(f64::INFINITY).abs(), 1e-6, Bound::AtMost))
}

fn energy_ring() -> pdtool_core::Result<(f64, f64, Bound)> {
    let net = EnergyNetwork::ring_benchmark(5)?;
    let cfg = TradingConfig {
        mode: TradingMode::InexactAlm,
        ..TradingConfig::default()
    };
    let run = run_trading(&net, &cfg)?;
    let r = net.reference()?;
    let residual = run.trace.last("max_residual").unwrap_or(f64::INFINITY);
    let gap = (run.trace.last("objective").unwrap_or(f64::INFINITY) - r.objective).abs();
    Ok(((residual / 1e-5).max(gap / 1e-4), 1.0, Bound::AtMost))
}

fn energy_linear_pair() -> pdtool_core::Result<(f64, f64, Bound)> {
    let net = EnergyNetwork::linear_pair()?;
    let run = run_trading(&net, &TradingConfig::default())?;
    let flagged = run.trace.flags().iter().any(|f| f.starts_with("oscillation"));
    Ok((if flagged { 1.0 } else { 0.0 }, 0.0, Bound::Above))
}

fn csv_stable() -> pdtool_core::Result<(f64, f64, Bound)> {
    let mut t = Trace::new(&["k", "value"]);
    for k in 0..50 {
        t.push(vec![k as f64, (k as f64 * 0.37).exp() / 3.0])?;
    }
    let a = output::csv_bytes(&t, &["k", "value"]).map_err(|e| pdtool_core::Error::Capability(e.to_string()))?;
    let b = output::csv_bytes(&t.clone(), &["k", "value"]).map_err(|e| pdtool_core::Error::Capability(e.to_string()))?;
    Ok((if a == b { 0.0 } else { 1.0 }, 0.0, Bound::AtMost))
}

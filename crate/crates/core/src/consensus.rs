//! Consensus optimization over an undirected graph.
//!
//! Agent `i` holds `f_i` and a local copy `x_i ∈ R^d`; stacking the copies as
//! the rows of an `N × d` matrix `X`, agreement is the constraint `LX = 0`
//! with `L = I − W` the Laplacian of the mixing matrix. Dual variables are
//! stored pre-multiplied as `η = ρL^{1/2}λ`, so no matrix square root is ever
//! formed. Every product with `W` or `L` reads only neighbor rows.
//!
//! The mixing matrix is the lazy Metropolis matrix `(I + W_MH)/2`: its
//! eigenvalues are positive, which the second-order EXTRA recursion needs.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::graph::{metropolis_weights, Topology, WeightMatrix};
use crate::linalg::{max_eigenvalue, row_mean, Matrix, Vector};
use crate::oracle::FunctionOracle;
use crate::reference;
use crate::saddle::{inner_minimize, InexactConfig, InnerOutcome, DIVERGENCE_NORM};
use crate::trace::Trace;

#[derive(Debug, Clone)]
pub struct ConsensusProblem {
    oracles: Vec<FunctionOracle>,
    topology: Topology,
    weights: WeightMatrix,
    rho: f64,
    alpha: f64,
    dim: usize,
    /// `λ_max(L)`, fixed at construction.
    lap_max: f64,
    /// Reject primal-dual steps unless `αρ = 1`.
    coupled: bool,
}

/// `n` local quadratics `½(x − c_i)ᵀQ_i(x − c_i)` with `Q_i = BBᵀ/d + s_i I`,
/// `s_i ~ U(0.5, 2)`, and centers uniform in `[−3, 3]^d`.
pub fn random_quadratics(n: usize, dim: usize, seed: u64) -> Result<Vec<FunctionOracle>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let b = Matrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let q = &b * b.transpose() / dim as f64 + Matrix::identity(dim, dim) * rng.random_range(0.5..2.0);
            let c = Vector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let constant = 0.5 * c.dot(&(&q * &c));
            let qv = -(&q * c);
            FunctionOracle::quadratic_with_constant(q, qv, constant)
        })
        .collect()
}

/// Builds the problem with lazy Metropolis mixing and the safe default step.
pub fn build_consensus_problem(
    oracles: Vec<FunctionOracle>,
    topology: Topology,
    rho: f64,
) -> Result<ConsensusProblem> {
    let weights = metropolis_weights(&topology)?.lazy();
    ConsensusProblem::new(oracles, topology, weights, rho)
}

impl ConsensusProblem {
    pub fn new(
        oracles: Vec<FunctionOracle>,
        topology: Topology,
        weights: WeightMatrix,
        rho: f64,
    ) -> Result<Self> {
        let n = topology.n_nodes();
        check_dim("consensus oracles", n, oracles.len())?;
        check_dim("consensus weights", n, weights.dim())?;
        if !topology.is_connected() {
            return Err(crate::graph::GraphError::Disconnected.into());
        }
        for (i, j) in (0..n).flat_map(|i| (0..n).map(move |j| (i, j))) {
            if i != j && !topology.has_edge(i, j) && weights.matrix()[(i, j)] != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "weight ({i}, {j}) is nonzero but the agents are not neighbors"
                )));
            }
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("penalty {rho} must be positive")));
        }
        let dim = oracles[0].dim();
        for o in &oracles {
            check_dim("agent dimension", dim, o.dim())?;
        }
        let lap_max = max_eigenvalue(weights.laplacian());
        let mut out = Self {
            oracles,
            topology,
            weights,
            rho,
            alpha: 0.0,
            dim,
            lap_max,
            coupled: false,
        };
        out.alpha = out.default_alpha();
        Ok(out)
    }

    /// `min(1/ρ, 1/(ℓ_max + ρ·λ_max(L)))`.
    pub fn default_alpha(&self) -> f64 {
        let bound = 1.0 / (self.ell_max() + self.rho * self.lap_max);
        bound.min(1.0 / self.rho)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size {alpha} must be nonnegative")));
        }
        self.alpha = alpha;
        self.coupled = false;
        Ok(self)
    }

    /// Sets `α = 1/ρ` and makes the primal-dual steps insist on that coupling.
    pub fn with_coupled_step(mut self) -> Self {
        self.alpha = 1.0 / self.rho;
        self.coupled = true;
        self
    }

    pub fn oracles(&self) -> &[FunctionOracle] {
        &self.oracles
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn n_agents(&self) -> usize {
        self.oracles.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `λ_max(L)`.
    pub fn laplacian_max_eigenvalue(&self) -> f64 {
        self.lap_max
    }

    pub fn ell_max(&self) -> f64 {
        self.oracles.iter().map(|o| o.ell()).fold(0.0, f64::max)
    }

    pub(crate) fn check_x(&self, x: &Matrix) -> Result<()> {
        check_dim("agent rows", self.n_agents(), x.nrows())?;
        check_dim("agent columns", self.dim, x.ncols())
    }

    fn check_coupling(&self) -> Result<()> {
        if self.coupled && (self.alpha * self.rho - 1.0).abs() > 4.0 * f64::EPSILON {
            return Err(Error::InvalidParameter(format!(
                "equivalence mode needs αρ = 1, got α = {}, ρ = {}",
                self.alpha, self.rho
            )));
        }
        Ok(())
    }

    /// `WX`, each row combining only the agent's own row and its neighbors' rows.
    pub fn mix(&self, x: &Matrix) -> Result<Matrix> {
        self.check_x(x)?;
        let w = self.weights.matrix();
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        for i in 0..self.n_agents() {
            let mut row = x.row(i) * w[(i, i)];
            for &j in self.topology.neighbors(i) {
                row += x.row(j) * w[(i, j)];
            }
            out.set_row(i, &row);
        }
        Ok(out)
    }

    /// `LX = X − WX`.
    pub fn laplacian_apply(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x - self.mix(x)?)
    }

    /// Rows `∇f_i(x_i)`.
    pub fn grad(&self, x: &Matrix) -> Result<Matrix> {
        self.check_x(x)?;
        let mut g = Matrix::zeros(x.nrows(), x.ncols());
        for (i, o) in self.oracles.iter().enumerate() {
            let gi = o.grad(&x.row(i).transpose())?;
            g.set_row(i, &gi.transpose());
        }
        Ok(g)
    }

    /// `Σ_i f_i(x_i)`.
    pub fn objective(&self, x: &Matrix) -> Result<f64> {
        self.check_x(x)?;
        self.oracles
            .iter()
            .enumerate()
            .map(|(i, o)| o.eval(&x.row(i).transpose()))
            .sum()
    }

    /// `Σ_i f_i(z)` at a common point.
    pub fn objective_at(&self, z: &Vector) -> Result<f64> {
        self.oracles.iter().map(|o| o.eval(z)).sum()
    }

    /// Consensus optimum: every agent at `z* = argmin Σ f_i`, `η* = −∇F(X*)`, and `f*`.
    pub fn reference(&self) -> Result<ConsensusReference> {
        let (z, f_star) = reference::solve_sum(&self.oracles)?;
        let x = Matrix::from_fn(self.n_agents(), self.dim, |_, c| z[c]);
        let eta = -self.grad(&x)?;
        Ok(ConsensusReference { z, x, eta, f_star })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusReference {
    pub z: Vector,
    pub x: Matrix,
    pub eta: Matrix,
    pub f_star: f64,
}

/// Iterate shared by every consensus method.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub x: Matrix,
    /// Scaled dual `ρL^{1/2}λ`.
    pub eta: Matrix,
    /// Gradient tracker.
    pub s: Matrix,
    /// `∇F(x)`, kept in step with `x`.
    pub grad: Matrix,
    pub x_prev: Option<Matrix>,
    pub grad_prev: Option<Matrix>,
    pub k: usize,
    /// Neighbor exchanges so far.
    pub rounds: usize,
    /// Per-agent gradient evaluations so far.
    pub grad_evals: usize,
}

impl ConsensusState {
    /// `η = 0`, `s = ∇F(x0)`.
    pub fn new(cp: &ConsensusProblem, x0: Matrix) -> Result<Self> {
        let grad = cp.grad(&x0)?;
        Ok(Self {
            eta: Matrix::zeros(x0.nrows(), x0.ncols()),
            s: grad.clone(),
            grad,
            x: x0,
            x_prev: None,
            grad_prev: None,
            k: 0,
            rounds: 0,
            grad_evals: cp.n_agents(),
        })
    }

    pub fn zeros(cp: &ConsensusProblem) -> Result<Self> {
        Self::new(cp, Matrix::zeros(cp.n_agents(), cp.dim()))
    }

    fn advance(&self, cp: &ConsensusProblem, x: Matrix, rounds: usize, grad_evals: usize) -> Result<Self> {
        let grad = cp.grad(&x)?;
        Ok(Self {
            eta: self.eta.clone(),
            s: self.s.clone(),
            grad,
            x_prev: Some(self.x.clone()),
            grad_prev: Some(self.grad.clone()),
            x,
            k: self.k + 1,
            rounds: self.rounds + rounds,
            grad_evals: self.grad_evals + grad_evals + cp.n_agents(),
        })
    }

    fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.eta.norm_squared() + self.s.norm_squared()).sqrt()
    }
}

fn flatten(x: &Matrix) -> Vector {
    Vector::from_column_slice(x.as_slice())
}

fn unflatten(v: &Vector, rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v.as_slice())
}

/// Inexact minimization of `F(X) + ⟨X, η⟩ + (ρ/2)⟨X, LX⟩` from the current
/// iterate, then `η⁺ = η + ρLX⁺`. Each inner gradient costs one neighbor exchange.
pub fn distributed_alm_step(
    cp: &ConsensusProblem,
    st: &ConsensusState,
    inner: &InexactConfig,
) -> Result<(ConsensusState, InnerOutcome)> {
    cp.check_x(&st.x)?;
    inner.validate()?;
    if cp.oracles.iter().any(|o| !o.is_smooth()) {
        return Err(Error::Capability("distributed ALM needs smooth agents".into()));
    }
    let (n, d) = (cp.n_agents(), cp.dim());
    let evals = Cell::new(0usize);
    let lipschitz = cp.ell_max() + cp.rho * cp.lap_max;
    let mu = cp.oracles.iter().map(|o| o.mu()).fold(f64::INFINITY, f64::min);
    let (x, outcome) = inner_minimize(
        |v| {
            evals.set(evals.get() + 1);
            let x = unflatten(v, n, d);
            let g = cp.grad(&x)? + &st.eta + cp.laplacian_apply(&x)? * cp.rho;
            Ok(flatten(&g))
        },
        &flatten(&st.x),
        lipschitz.max(f64::MIN_POSITIVE),
        mu,
        inner.method,
        inner.schedule.at(st.k),
        inner.max_inner,
    )?;
    let x = unflatten(&x, n, d);
    let lx = cp.laplacian_apply(&x)?;
    let mut next = st.advance(cp, x, evals.get() + 1, evals.get() * n)?;
    next.eta += lx * cp.rho;
    Ok((next, outcome))
}

/// `x⁺ = 2Wx − α∇f(x) − Wx_prev + α∇f(x_prev)`, first step `x¹ = Wx⁰ − α∇f(x⁰)`.
pub fn extra_step_native(cp: &ConsensusProblem, st: &ConsensusState) -> Result<ConsensusState> {
    cp.check_x(&st.x)?;
    let wx = cp.mix(&st.x)?;
    let x = match (&st.x_prev, &st.grad_prev) {
        (Some(xp), Some(gp)) => wx * 2.0 - &st.grad * cp.alpha - cp.mix(xp)? + gp * cp.alpha,
        _ => wx - &st.grad * cp.alpha,
    };
    st.advance(cp, x, 1, 0)
}

/// `x⁺ = x − α∇_x𝓛(x, λ)`, `λ⁺ = λ + α∇_λ𝓛(x⁺, λ)`, written in `η`:
/// `x⁺ = x − α(∇f + η + ρLx)`, `η⁺ = η + αρ²Lx⁺`.
pub fn extra_step_pd(cp: &ConsensusProblem, st: &ConsensusState) -> Result<ConsensusState> {
    cp.check_x(&st.x)?;
    cp.check_coupling()?;
    let lx = cp.laplacian_apply(&st.x)?;
    let x = &st.x - (&st.grad + &st.eta + lx * cp.rho) * cp.alpha;
    let lx_new = cp.laplacian_apply(&x)?;
    let mut next = st.advance(cp, x, 2, 0)?;
    next.eta += lx_new * (cp.alpha * cp.rho * cp.rho);
    Ok(next)
}

/// `x⁺ = Wx − αs`, `s⁺ = Ws + ∇f(x⁺) − ∇f(x)`.
pub fn gradient_tracking_step(cp: &ConsensusProblem, st: &ConsensusState) -> Result<ConsensusState> {
    cp.check_x(&st.x)?;
    check_dim("tracker rows", cp.n_agents(), st.s.nrows())?;
    let x = cp.mix(&st.x)? - &st.s * cp.alpha;
    let ws = cp.mix(&st.s)?;
    let mut next = st.advance(cp, x, 1, 0)?;
    next.s = ws + &next.grad - &st.grad;
    Ok(next)
}

/// Primal-dual form of gradient tracking:
/// `x⁺ = x − α(∇f + η + ρLx)`, `η⁺ = η + αρ²(Lx⁺ − WLx)`.
pub fn gradient_tracking_step_pd(cp: &ConsensusProblem, st: &ConsensusState) -> Result<ConsensusState> {
    cp.check_x(&st.x)?;
    cp.check_coupling()?;
    let lx = cp.laplacian_apply(&st.x)?;
    let wlx = cp.mix(&lx)?;
    let x = &st.x - (&st.grad + &st.eta + &lx * cp.rho) * cp.alpha;
    let lx_new = cp.laplacian_apply(&x)?;
    let mut next = st.advance(cp, x, 3, 0)?;
    next.eta += (lx_new - wlx) * (cp.alpha * cp.rho * cp.rho);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusMetrics {
    pub consensus_error: f64,
    pub kkt_residual: f64,
    pub objective_gap: f64,
}

/// `max_i‖x_i − x̄‖`, `‖LX‖_F + ‖Σ_i∇f_i(x_i)‖/√N`, and `Σ_i f_i(x̄) − f*`.
pub fn consensus_metrics(cp: &ConsensusProblem, st: &ConsensusState, f_star: f64) -> Result<ConsensusMetrics> {
    cp.check_x(&st.x)?;
    let mean = row_mean(&st.x);
    let consensus_error = st
        .x
        .row_iter()
        .map(|r| (r.transpose() - &mean).norm())
        .fold(0.0, f64::max);
    let grad_sum = row_mean(&st.grad) * cp.n_agents() as f64;
    let kkt_residual =
        cp.laplacian_apply(&st.x)?.norm() + grad_sum.norm() / (cp.n_agents() as f64).sqrt();
    let objective_gap = cp.objective_at(&mean)? - f_star;
    Ok(ConsensusMetrics {
        consensus_error,
        kkt_residual,
        objective_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsensusMethod {
    DistributedAlm { inner: InexactConfig },
    ExtraNative,
    ExtraPd,
    GradientTracking,
    GradientTrackingPd,
}

impl ConsensusMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ConsensusMethod::DistributedAlm { .. } => "distributed_alm",
            ConsensusMethod::ExtraNative => "extra",
            ConsensusMethod::ExtraPd => "extra_pd",
            ConsensusMethod::GradientTracking => "gradient_tracking",
            ConsensusMethod::GradientTrackingPd => "gradient_tracking_pd",
        }
    }

    pub fn step(&self, cp: &ConsensusProblem, st: &ConsensusState) -> Result<(ConsensusState, Option<InnerOutcome>)> {
        Ok(match self {
            ConsensusMethod::DistributedAlm { inner } => {
                let (s, o) = distributed_alm_step(cp, st, inner)?;
                (s, Some(o))
            }
            ConsensusMethod::ExtraNative => (extra_step_native(cp, st)?, None),
            ConsensusMethod::ExtraPd => (extra_step_pd(cp, st)?, None),
            ConsensusMethod::GradientTracking => (gradient_tracking_step(cp, st)?, None),
            ConsensusMethod::GradientTrackingPd => (gradient_tracking_step_pd(cp, st)?, None),
        })
    }
}

pub const CONSENSUS_COLUMNS: [&str; 6] = [
    "k",
    "consensus_error",
    "kkt_residual",
    "objective_gap",
    "rounds",
    "grad_evals",
];

#[derive(Debug, Clone)]
pub struct ConsensusRun {
    pub state: ConsensusState,
    pub trace: Trace,
    pub diverged: bool,
}

/// Runs `budget` iterations (fewer if the KKT residual reaches `tol`).
pub fn run(
    cp: &ConsensusProblem,
    method: &ConsensusMethod,
    init: ConsensusState,
    budget: usize,
    tol: f64,
    f_star: f64,
) -> Result<ConsensusRun> {
    cp.check_x(&init.x)?;
    let mut trace = Trace::new(&CONSENSUS_COLUMNS);
    let mut state = init;
    let mut diverged = false;
    let mut unmet = 0usize;
    for _ in 0..budget {
        let (next, inner) = method.step(cp, &state)?;
        if inner.is_some_and(|o| !o.converged) {
            unmet += 1;
        }
        state = next;
        let norm = state.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            diverged = true;
            trace.flag(format!("{} diverged at iteration {}", method.name(), state.k));
            break;
        }
        let m = consensus_metrics(cp, &state, f_star)?;
        trace.push(vec![
            state.k as f64,
            m.consensus_error,
            m.kkt_residual,
            m.objective_gap,
            state.rounds as f64,
            state.grad_evals as f64,
        ])?;
        if m.kkt_residual <= tol {
            break;
        }
    }
    if unmet > 0 {
        trace.flag(format!("inner tolerance unmet in {unmet} outer iterations"));
    }
    Ok(ConsensusRun {
        state,
        trace,
        diverged,
    })
}

/// Runs the native and primal-dual EXTRA forms side by side at `α = 1/ρ`;
/// returns both traces and the largest iterate deviation.
pub fn extra_equivalence(
    cp: &ConsensusProblem,
    x0: Matrix,
    iterations: usize,
    f_star: f64,
) -> Result<(Trace, Trace, f64)> {
    let cp = cp.clone().with_coupled_step();
    let mut native = ConsensusState::new(&cp, x0)?;
    let mut pd = native.clone();
    let mut tn = Trace::new(&CONSENSUS_COLUMNS);
    let mut tp = Trace::new(&CONSENSUS_COLUMNS);
    let mut deviation = 0.0_f64;
    for _ in 0..iterations {
        native = extra_step_native(&cp, &native)?;
        pd = extra_step_pd(&cp, &pd)?;
        deviation = deviation.max((&native.x - &pd.x).amax());
        for (t, s) in [(&mut tn, &native), (&mut tp, &pd)] {
            let m = consensus_metrics(&cp, s, f_star)?;
            t.push(vec![
                s.k as f64,
                m.consensus_error,
                m.kkt_residual,
                m.objective_gap,
                s.rounds as f64,
                s.grad_evals as f64,
            ])?;
        }
    }
    Ok((tn, tp, deviation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saddle::{InnerMethod, ToleranceSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn topologies() -> Vec<Topology> {
        vec![
            Topology::path(5).unwrap(),
            Topology::ring(6).unwrap(),
            Topology::star(5).unwrap(),
            Topology::complete(4).unwrap(),
            connected_er(8, 0.4, 3),
        ]
    }

    fn connected_er(n: usize, p: f64, seed: u64) -> Topology {
        (0..)
            .map(|t| Topology::erdos_renyi(n, p, seed * 1000 + t).unwrap())
            .find(|t| t.is_connected())
            .unwrap()
    }

    fn random_quadratics(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<FunctionOracle> {
        (0..n)
            .map(|_| {
                let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let q = &b * b.transpose() + Matrix::identity(d, d) * 0.5;
                let qv = Vector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
                FunctionOracle::quadratic(q, qv).unwrap()
            })
            .collect()
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn two_agent_optimum() {
        let f1 = FunctionOracle::centered_quadratic(&v(&[1.0]), 2.0);
        let f2 = FunctionOracle::centered_quadratic(&v(&[-1.0]), 2.0);
        let cp = build_consensus_problem(vec![f1, f2], Topology::path(2).unwrap(), 1.0).unwrap();
        let r = cp.reference().unwrap();
        assert!(r.x.amax() < 1e-15);
        let st = ConsensusState::new(&cp, r.x.clone()).unwrap();
        let m = consensus_metrics(&cp, &st, r.f_star).unwrap();
        assert_eq!(m.consensus_error, 0.0);
        assert!(m.kkt_residual < 1e-15 && m.objective_gap.abs() < 1e-15);
    }

    #[test]
    fn identical_agents_share_minimizer() {
        let f = FunctionOracle::centered_quadratic(&v(&[0.3, -2.0]), 1.5);
        let cp = build_consensus_problem(vec![f; 4], Topology::ring(4).unwrap(), 1.0).unwrap();
        let r = cp.reference().unwrap();
        assert!((&r.z - v(&[0.3, -2.0])).amax() < 1e-14);
    }

    #[test]
    fn single_agent_is_centralized() {
        let f = FunctionOracle::quadratic(Matrix::identity(2, 2) * 2.0, v(&[2.0, -4.0])).unwrap();
        let cp = build_consensus_problem(vec![f], Topology::path(1).unwrap(), 1.0).unwrap();
        let r = cp.reference().unwrap();
        assert!((&r.z - v(&[-1.0, 2.0])).amax() < 1e-15);
        let run = run(&cp, &ConsensusMethod::ExtraNative, ConsensusState::zeros(&cp).unwrap(), 500, 1e-12, r.f_star).unwrap();
        assert!((row_mean(&run.state.x) - &r.z).amax() < 1e-10);
    }

    #[test]
    fn rejects_disconnected_graphs() {
        let t = Topology::new(4, &[(0, 1), (2, 3)]).unwrap();
        let f = FunctionOracle::zero(1);
        assert!(matches!(
            build_consensus_problem(vec![f; 4], t, 1.0),
            Err(Error::Graph(crate::graph::GraphError::Disconnected))
        ));
    }

    #[test]
    fn extra_native_and_pd_coincide() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=20);
            let d = rng.random_range(1..=3);
            let t = connected_er(n, 0.3, seed);
            let cp = build_consensus_problem(random_quadratics(&mut rng, n, d), t, rng.random_range(0.5..5.0)).unwrap();
            let (tn, tp, dev) = extra_equivalence(&cp, random_x(&mut rng, n, d), 100, 0.0).unwrap();
            assert!(dev <= 1e-10, "seed {seed}: deviation {dev}");
            assert_eq!(tn.len(), 100);
            assert_eq!(tp.len(), 100);
        }
    }

    #[test]
    fn coupling_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cp = build_consensus_problem(random_quadratics(&mut rng, 3, 1), Topology::path(3).unwrap(), 2.0)
            .unwrap()
            .with_coupled_step();
        let st = ConsensusState::zeros(&cp).unwrap();
        assert!(extra_step_pd(&cp, &st).is_ok());
        let mut bad = cp.clone();
        bad.alpha = 0.3;
        assert!(matches!(extra_step_pd(&bad, &st), Err(Error::InvalidParameter(_))));
        assert!(matches!(gradient_tracking_step_pd(&bad, &st), Err(Error::InvalidParameter(_))));
        // Outside equivalence mode any step is accepted.
        let free = cp.with_alpha(0.3).unwrap();
        assert!(extra_step_pd(&free, &st).is_ok());
    }

    #[test]
    fn extra_degenerate_cases() {
        let t = Topology::ring(5).unwrap();
        let cp = build_consensus_problem(vec![FunctionOracle::zero(1); 5], t.clone(), 1.0).unwrap();
        let x0 = Matrix::from_element(5, 1, 0.7);
        let mut st = ConsensusState::new(&cp, x0.clone()).unwrap();
        for _ in 0..5 {
            st = extra_step_native(&cp, &st).unwrap();
            assert!((&st.x - &x0).amax() < 1e-15);
        }
        // α = 0: pure second-order averaging.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cp = build_consensus_problem(random_quadratics(&mut rng, 5, 1), t, 1.0)
            .unwrap()
            .with_alpha(0.0)
            .unwrap();
        let x0 = random_x(&mut rng, 5, 1);
        let s0 = ConsensusState::new(&cp, x0.clone()).unwrap();
        let s1 = extra_step_native(&cp, &s0).unwrap();
        assert!((&s1.x - cp.mix(&x0).unwrap()).amax() < 1e-15);
        let s2 = extra_step_native(&cp, &s1).unwrap();
        let expected = cp.mix(&s1.x).unwrap() * 2.0 - cp.mix(&x0).unwrap();
        assert!((&s2.x - expected).amax() < 1e-15);
    }

    #[test]
    fn pd_forms_fix_the_saddle_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cp = build_consensus_problem(random_quadratics(&mut rng, 6, 2), Topology::ring(6).unwrap(), 2.0).unwrap();
        let r = cp.reference().unwrap();
        let mut st = ConsensusState::new(&cp, r.x.clone()).unwrap();
        st.eta = r.eta.clone();
        for step in [extra_step_pd, gradient_tracking_step_pd] {
            let next = step(&cp, &st).unwrap();
            assert!((&next.x - &r.x).amax() < 1e-12);
            assert!((&next.eta - &r.eta).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_objective_pd_is_averaging() {
        let cp = build_consensus_problem(vec![FunctionOracle::zero(1); 4], Topology::path(4).unwrap(), 1.0)
            .unwrap()
            .with_coupled_step();
        let x0 = Matrix::from_column_slice(4, 1, &[1.0, 0.0, -1.0, 2.0]);
        let s0 = ConsensusState::new(&cp, x0.clone()).unwrap();
        let s1 = extra_step_pd(&cp, &s0).unwrap();
        // αρ = 1: x¹ = x⁰ − Lx⁰ = Wx⁰.
        assert!((&s1.x - cp.mix(&x0).unwrap()).amax() < 1e-15);
        // L and W commute, so with no gradients the scaled dual stays at zero.
        let g = gradient_tracking_step_pd(&cp, &s0).unwrap();
        assert!((&g.x - &s1.x).amax() < 1e-15);
        assert!(g.eta.amax() < 1e-15);
    }

    #[test]
    fn gradient_tracking_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in topologies() {
            let n = t.n_nodes();
            let cp = build_consensus_problem(random_quadratics(&mut rng, n, 2), t, 1.0).unwrap();
            let mut st = ConsensusState::new(&cp, random_x(&mut rng, n, 2)).unwrap();
            for _ in 0..200 {
                st = gradient_tracking_step(&cp, &st).unwrap();
                let gap = (row_mean(&st.s) - row_mean(&cp.grad(&st.x).unwrap())).amax();
                assert!(gap <= 1e-12, "tracking gap {gap}");
            }
        }
    }

    #[test]
    fn gradient_tracking_pd_matches_native() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = rng.random_range(2..=12);
            let t = connected_er(n, 0.4, seed);
            let cp = build_consensus_problem(random_quadratics(&mut rng, n, 2), t, rng.random_range(1.0..4.0))
                .unwrap()
                .with_coupled_step();
            let mut a = ConsensusState::new(&cp, random_x(&mut rng, n, 2)).unwrap();
            let mut b = a.clone();
            for _ in 0..100 {
                a = gradient_tracking_step(&cp, &a).unwrap();
                b = gradient_tracking_step_pd(&cp, &b).unwrap();
                let scale = 1.0 + a.x.amax();
                assert!((&a.x - &b.x).amax() <= 1e-10 * scale, "seed {seed}");
            }
        }
    }

    #[test]
    fn identical_agents_tracking_reaches_common_gradient() {
        let f = FunctionOracle::centered_quadratic(&v(&[1.0]), 1.0);
        let cp = build_consensus_problem(vec![f; 5], Topology::ring(5).unwrap(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = ConsensusState::new(&cp, random_x(&mut rng, 5, 1)).unwrap();
        for _ in 0..500 {
            st = gradient_tracking_step(&cp, &st).unwrap();
        }
        let m = consensus_metrics(&cp, &st, 0.0).unwrap();
        assert!(m.consensus_error < 1e-10);
        assert!((&st.s - &st.grad).amax() < 1e-10);
    }

    fn converges(method: ConsensusMethod, cp: &ConsensusProblem) -> f64 {
        let r = cp.reference().unwrap();
        let out = run(cp, &method, ConsensusState::zeros(cp).unwrap(), 20_000, 1e-10, r.f_star).unwrap();
        assert!(!out.diverged);
        (&out.state.x - &r.x).amax()
    }

    #[test]
    fn methods_reach_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inner = InexactConfig {
            method: InnerMethod::Nesterov,
            schedule: ToleranceSchedule::Polynomial { c: 1.0, p: 2.0 },
            max_inner: 1000,
        };
        for t in topologies() {
            let n = t.n_nodes();
            let cp = build_consensus_problem(random_quadratics(&mut rng, n, 2), t, 2.0).unwrap();
            let ell = cp.ell_max();
            let extra = cp.clone().with_alpha(crate::linalg::min_eigenvalue(cp.weights().matrix()) / ell).unwrap();
            assert!(converges(ConsensusMethod::ExtraNative, &extra) <= 1e-6);
            assert!(converges(ConsensusMethod::DistributedAlm { inner }, &cp) <= 1e-6);
            let gt = cp.clone().with_alpha(0.2 / ell).unwrap();
            assert!(converges(ConsensusMethod::GradientTracking, &gt) <= 1e-6);
        }
    }

    #[test]
    fn distributed_alm_keeps_eta_orthogonal_to_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cp = build_consensus_problem(random_quadratics(&mut rng, 6, 2), Topology::star(6).unwrap(), 1.0).unwrap();
        let inner = InexactConfig {
            method: InnerMethod::Gradient,
            schedule: ToleranceSchedule::Fixed { tol: 1e-3 },
            max_inner: 5,
        };
        let mut st = ConsensusState::zeros(&cp).unwrap();
        for _ in 0..50 {
            st = distributed_alm_step(&cp, &st, &inner).unwrap().0;
            assert!(row_mean(&st.eta).amax() < 1e-12);
        }
    }

    #[test]
    fn single_inner_iteration_still_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cp = build_consensus_problem(random_quadratics(&mut rng, 5, 1), Topology::ring(5).unwrap(), 1.0).unwrap();
        let r = cp.reference().unwrap();
        let inner = InexactConfig {
            method: InnerMethod::Gradient,
            schedule: ToleranceSchedule::Fixed { tol: 1e-14 },
            max_inner: 1,
        };
        let out = run(&cp, &ConsensusMethod::DistributedAlm { inner }, ConsensusState::zeros(&cp).unwrap(), 20_000, 1e-10, r.f_star).unwrap();
        assert!((&out.state.x - &r.x).amax() < 1e-6);
        assert!(out.trace.is_flagged());
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cp = build_consensus_problem(random_quadratics(&mut rng, 5, 2), Topology::ring(5).unwrap(), 1.0).unwrap();
        let r = cp.reference().unwrap();
        let st = ConsensusState::new(&cp, random_x(&mut rng, 5, 2)).unwrap();
        let m = consensus_metrics(&cp, &st, r.f_star).unwrap();

        let n = 5.0;
        let mean: Vector = (0..5).map(|i| st.x.row(i).transpose()).sum::<Vector>() / n;
        let err = (0..5).map(|i| (st.x.row(i).transpose() - &mean).norm()).fold(0.0, f64::max);
        let lx = cp.weights().laplacian() * &st.x;
        let g: Vector = (0..5).map(|i| cp.oracles()[i].grad(&st.x.row(i).transpose()).unwrap()).sum();
        let gap: f64 = cp.oracles().iter().map(|o| o.eval(&mean).unwrap()).sum::<f64>() - r.f_star;
        assert!((m.consensus_error - err).abs() < 1e-14);
        assert!((m.kkt_residual - (lx.norm() + g.norm() / n.sqrt())).abs() < 1e-12);
        assert!((m.objective_gap - gap).abs() < 1e-12);
        assert!(m.objective_gap >= 0.0);
    }

    #[test]
    fn steps_read_only_neighbor_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Topology::path(6).unwrap();
        let cp = build_consensus_problem(random_quadratics(&mut rng, 6, 2), t.clone(), 1.5).unwrap();
        let mut masked = cp.clone();
        let mut w = cp.weights.matrix().clone();
        for i in 0..6 {
            for j in 0..6 {
                if i != j && !t.has_edge(i, j) {
                    w[(i, j)] = f64::NAN;
                }
            }
        }
        masked.weights = WeightMatrix::from_matrix_unchecked(w);
        let inner = InexactConfig {
            method: InnerMethod::Nesterov,
            schedule: ToleranceSchedule::Fixed { tol: 1e-6 },
            max_inner: 20,
        };
        let methods = [
            ConsensusMethod::DistributedAlm { inner },
            ConsensusMethod::ExtraNative,
            ConsensusMethod::ExtraPd,
            ConsensusMethod::GradientTracking,
            ConsensusMethod::GradientTrackingPd,
        ];
        for method in methods {
            let mut a = ConsensusState::new(&cp, random_x(&mut rng, 6, 2)).unwrap();
            let mut b = a.clone();
            for _ in 0..10 {
                a = method.step(&cp, &a).unwrap().0;
                b = method.step(&masked, &b).unwrap().0;
                assert_eq!(a, b, "{}", method.name());
            }
        }
    }

    #[test]
    fn extra_converges_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in topologies() {
            let n = t.n_nodes();
            let cp = build_consensus_problem(random_quadratics(&mut rng, n, 2), t, 1.0).unwrap();
            let r = cp.reference().unwrap();
            let alpha = 0.1 * crate::linalg::min_eigenvalue(cp.weights().matrix()) / cp.ell_max();
            let cp = cp.with_alpha(alpha).unwrap();
            let out = run(&cp, &ConsensusMethod::ExtraNative, ConsensusState::zeros(&cp).unwrap(), 5000, 1e-11, r.f_star).unwrap();
            // Fit only above the round-off floor.
            let ys: Vec<f64> = out
                .trace
                .column("kkt_residual")
                .unwrap()
                .iter()
                .take_while(|v| **v > 1e-11)
                .map(|v| v.ln())
                .collect();
            assert!(ys.len() >= 20);
            let tail = &ys[ys.len() / 2..];
            let xs: Vec<f64> = (0..tail.len()).map(|i| i as f64).collect();
            let (slope, r2) = linear_fit(&xs, tail);
            assert!(slope < 0.0 && r2 >= 0.99, "n {n}: slope {slope}, r2 {r2}");
        }
    }

    fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let slope = sxy / sxx;
        (slope, sxy * sxy / (sxx * syy))
    }
}

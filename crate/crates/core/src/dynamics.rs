//! Continuous-time primal-dual flow on a consensus problem,
//!
//! ```text
//! ẋ = −∇f(x) − Lη − Lx
//! η̇ = Lx
//! ```
//!
//! integrated by explicit Euler and monitored with the Lyapunov function
//! `V = ½‖x − x*‖² + ½‖η − η*‖²`. Along exact trajectories
//! `V̇ = −(x − x*)ᵀ(∇f(x) − ∇f(x*)) − (x − x*)ᵀL(x − x*) ≤ 0`, and trajectories
//! approach the KKT set `{Lx = 0, ∇f(x) + Lη = 0}`.

use crate::consensus::ConsensusProblem;
use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::saddle::DIVERGENCE_NORM;
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Matrix,
    pub eta: Matrix,
    pub t: f64,
    pub h: f64,
}

impl FlowState {
    pub fn new(x: Matrix, eta: Matrix, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("step {h} must be positive")));
        }
        check_dim("flow dual rows", x.nrows(), eta.nrows())?;
        check_dim("flow dual columns", x.ncols(), eta.ncols())?;
        Ok(Self { x, eta, t: 0.0, h })
    }
}

/// A KKT point `(x*, η*)` of the flow with `η*` of minimum norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowReference {
    pub x: Matrix,
    pub eta: Matrix,
    /// `∇f(x*)`, cached for `V̇`.
    pub grad: Matrix,
}

/// `x*` from the consensus optimum; `η*` solves `(L + 𝟙𝟙ᵀ/N)η = −∇f(x*)`,
/// the minimum-norm solution of `Lη = −∇f(x*)`.
pub fn flow_reference(cp: &ConsensusProblem) -> Result<FlowReference> {
    let r = cp.reference()?;
    let grad = cp.grad(&r.x)?;
    let n = cp.n_agents();
    let shifted = cp.weights().laplacian() + Matrix::from_element(n, n, 1.0 / n as f64);
    let lu = shifted.lu();
    let eta = lu
        .solve(&-&grad)
        .ok_or_else(|| Error::NotConverged("singular shifted Laplacian".into()))?;
    Ok(FlowReference { x: r.x, eta, grad })
}

/// Largest recommended Euler step `1 / (ℓ_max + 2λ_max(L))`.
pub fn h_max(cp: &ConsensusProblem) -> f64 {
    1.0 / (cp.ell_max() + 2.0 * cp.laplacian_max_eigenvalue())
}

/// Right-hand side `(ẋ, η̇)`.
pub fn flow_rhs(cp: &ConsensusProblem, x: &Matrix, eta: &Matrix) -> Result<(Matrix, Matrix)> {
    let lx = cp.laplacian_apply(x)?;
    let x_dot = -cp.grad(x)? - cp.laplacian_apply(eta)? - &lx;
    Ok((x_dot, lx))
}

/// Actuator `u = e + L∫e` with error `e = −Lx` and `∫e = −η`, i.e. `u = −Lx − Lη`.
/// Driving the plant `ẋ = −∇f(x) + u` with it gives the flow.
pub fn pi_controller_view(cp: &ConsensusProblem, x: &Matrix, eta: &Matrix) -> Result<Matrix> {
    let e = -cp.laplacian_apply(x)?;
    let integral = -eta;
    Ok(&e + cp.laplacian_apply(&integral)?)
}

pub fn lyapunov(reference: &FlowReference, x: &Matrix, eta: &Matrix) -> f64 {
    0.5 * (x - &reference.x).norm_squared() + 0.5 * (eta - &reference.eta).norm_squared()
}

/// `−(x − x*)ᵀ(∇f(x) − ∇f(x*)) − (x − x*)ᵀL(x − x*)`.
pub fn lyapunov_dot(cp: &ConsensusProblem, reference: &FlowReference, x: &Matrix) -> Result<f64> {
    let dx = x - &reference.x;
    let dg = cp.grad(x)? - &reference.grad;
    Ok(-dx.dot(&dg) - dx.dot(&cp.laplacian_apply(&dx)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    /// Time grid, starting at the initial state.
    pub times: Vec<f64>,
    pub v: Vec<f64>,
    pub v_dot: Vec<f64>,
    /// Largest `V_{k+1} − V_k` along the discrete trajectory.
    pub max_v_increase: f64,
    pub max_v_dot: f64,
    /// Terminal `‖Lx‖`.
    pub consensus_residual: f64,
    /// Terminal `‖∇f(x) + Lη‖`.
    pub stationarity_residual: f64,
    pub trace: Trace,
}

pub const FLOW_COLUMNS: [&str; 5] = ["t", "V", "V_dot", "lx_norm", "stationarity"];

fn residuals(cp: &ConsensusProblem, x: &Matrix, eta: &Matrix) -> Result<(f64, f64)> {
    let lx = cp.laplacian_apply(x)?.norm();
    let stat = (cp.grad(x)? + cp.laplacian_apply(eta)?).norm();
    Ok((lx, stat))
}

/// Integrates `steps` Euler steps of size `init.h`.
///
/// Steps above [`h_max`] are allowed but flagged. Iterates with norm above
/// `1e12` abort the run with [`Error::Diverged`].
pub fn euler_flow(
    cp: &ConsensusProblem,
    reference: &FlowReference,
    init: FlowState,
    steps: usize,
) -> Result<(FlowState, LyapunovReport)> {
    cp.check_x(&init.x)?;
    cp.check_x(&init.eta)?;
    let mut trace = Trace::new(&FLOW_COLUMNS);
    let limit = h_max(cp);
    if init.h > limit {
        trace.flag(format!("step {} exceeds the stability bound {limit}", init.h));
    }
    let mut state = init;
    let mut times = vec![state.t];
    let mut v = vec![lyapunov(reference, &state.x, &state.eta)];
    let mut v_dot = vec![lyapunov_dot(cp, reference, &state.x)?];
    let mut max_v_increase = f64::NEG_INFINITY;
    for step in 0..steps {
        let (x_dot, eta_dot) = flow_rhs(cp, &state.x, &state.eta)?;
        state.x += x_dot * state.h;
        state.eta += eta_dot * state.h;
        state.t = (step + 1) as f64 * state.h;
        let norm = (state.x.norm_squared() + state.eta.norm_squared()).sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Diverged { step: step + 1, norm });
        }
        let vk = lyapunov(reference, &state.x, &state.eta);
        let vd = lyapunov_dot(cp, reference, &state.x)?;
        max_v_increase = max_v_increase.max(vk - v.last().unwrap());
        let (lx, stat) = residuals(cp, &state.x, &state.eta)?;
        trace.push(vec![state.t, vk, vd, lx, stat])?;
        times.push(state.t);
        v.push(vk);
        v_dot.push(vd);
    }
    let (consensus_residual, stationarity_residual) = residuals(cp, &state.x, &state.eta)?;
    let max_v_dot = v_dot.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let report = LyapunovReport {
        times,
        v,
        v_dot,
        max_v_increase,
        max_v_dot,
        consensus_residual,
        stationarity_residual,
        trace,
    };
    Ok((state, report))
}

/// Largest `|V_h(t) − V_{h/4}(t)|` over the coarse grid, the deviation of
/// the `V` trajectory from a run with a quarter of the step.
pub fn quarter_step_deviation(
    cp: &ConsensusProblem,
    reference: &FlowReference,
    x0: &Matrix,
    eta0: &Matrix,
    h: f64,
    horizon: f64,
) -> Result<f64> {
    let steps = (horizon / h).round() as usize;
    let (_, coarse) = euler_flow(cp, reference, FlowState::new(x0.clone(), eta0.clone(), h)?, steps)?;
    let (_, fine) = euler_flow(cp, reference, FlowState::new(x0.clone(), eta0.clone(), h / 4.0)?, 4 * steps)?;
    Ok(coarse
        .v
        .iter()
        .zip(fine.v.iter().step_by(4))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

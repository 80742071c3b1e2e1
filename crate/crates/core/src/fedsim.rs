//! Federated learning simulation: a server variable `z` and `N` devices
//! solving `minimize Σ_i p_i F_i(z)` through the split
//! `minimize Σ_i f_i(x_i) subject to x_i = z`, `f_i = p_i F_i`.
//!
//! Each round samples `M` blocks from `{0, 1, …, N}` (block 0 is `z`). The
//! server refreshes `z` only when block 0 is drawn; sampled devices minimize
//!
//! ```text
//! f_i(x) + λ_iᵀ(x − z) + (ρ/2)‖x − z‖² + η_i‖x − x_i‖²
//! ```
//!
//! and the duals move by `λ_i += ρ(x_i − z)`. The nonconvex variant drops
//! the damping (`η_i = η_0 = 0`), lets devices see the fresh `z`, and only
//! updates the duals of sampled devices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::oracle::FunctionOracle;
use crate::reference;
use crate::trace::Trace;

#[derive(Debug, Clone)]
pub struct FederatedInstance {
    devices: Vec<FunctionOracle>,
    weights: Vec<f64>,
    scaled: Vec<FunctionOracle>,
    dim: usize,
}

impl FederatedInstance {
    /// Device objectives `F_i` with weights `p_i > 0` summing to one.
    pub fn new(devices: Vec<FunctionOracle>, weights: Vec<f64>) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::InvalidParameter("at least one device is required".into()));
        }
        check_dim("device weights", devices.len(), weights.len())?;
        if weights.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidParameter("device weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("device weights sum to {total}, not 1")));
        }
        let dim = devices[0].dim();
        for d in &devices {
            check_dim("device dimension", dim, d.dim())?;
        }
        let scaled = devices
            .iter()
            .zip(&weights)
            .map(|(d, p)| d.scaled(*p))
            .collect::<Result<_>>()?;
        Ok(Self {
            devices,
            weights,
            scaled,
            dim,
        })
    }

    pub fn uniform(devices: Vec<FunctionOracle>) -> Result<Self> {
        let n = devices.len().max(1);
        Self::new(devices, vec![1.0 / n as f64; n])
    }

    /// `N` strongly convex quadratics `F_i = ½(x − a_i)ᵀQ_i(x − a_i)` with
    /// scattered centers and random positive weights.
    pub fn synthetic_quadratic(n: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut devices = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        for _ in 0..n {
            let b = Matrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let q = &b * b.transpose() / dim as f64 + Matrix::identity(dim, dim) * rng.random_range(0.5..2.0);
            let center = Vector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let qv = -(&q * &center);
            let constant = 0.5 * center.dot(&(&q * &center));
            devices.push(FunctionOracle::quadratic_with_constant(q, qv, constant)?);
            raw.push(rng.random_range(0.5..1.5));
        }
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // Put the rounding remainder on the last weight so the sum is 1 to the last bit.
        let head: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - head;
        Self::new(devices, weights)
    }

    pub fn devices(&self) -> &[FunctionOracle] {
        &self.devices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `f_i = p_i F_i`.
    pub fn scaled(&self) -> &[FunctionOracle] {
        &self.scaled
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `f(z) = Σ_i p_i F_i(z)`.
    pub fn objective(&self, z: &Vector) -> Result<f64> {
        self.scaled.iter().map(|f| f.eval(z)).sum()
    }

    /// `(z*, f*)` for `Σ_i p_i F_i`.
    pub fn reference(&self) -> Result<(Vector, f64)> {
        reference::solve_sum(&self.scaled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Convex,
    Nonconvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalSolver {
    Exact,
    GradientSteps { steps: usize },
}

impl Default for LocalSolver {
    fn default() -> Self {
        LocalSolver::GradientSteps { steps: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rho: f64,
    pub eta0: f64,
    /// Per-device Bregman weights.
    pub eta: Vec<f64>,
    /// Blocks drawn per round, out of `N + 1`.
    pub blocks_per_round: usize,
    pub rounds: usize,
    pub local_solver: LocalSolver,
    pub variant: Variant,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self, inst: &FederatedInstance) -> Result<()> {
        let n = inst.n_devices();
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("penalty {} must be positive", self.rho)));
        }
        if !(self.eta0 >= 0.0) || self.eta.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidParameter("Bregman weights must be nonnegative".into()));
        }
        check_dim("device Bregman weights", n, self.eta.len())?;
        if self.blocks_per_round == 0 || self.blocks_per_round > n + 1 {
            return Err(Error::InvalidParameter(format!(
                "blocks per round must lie in 1..={}, got {}",
                n + 1,
                self.blocks_per_round
            )));
        }
        if let LocalSolver::GradientSteps { steps: 0 } = self.local_solver {
            return Err(Error::InvalidParameter("at least one local gradient step is required".into()));
        }
        Ok(())
    }

    /// Damping weights in force: the nonconvex variant zeroes them.
    fn effective_eta(&self, i: usize) -> f64 {
        match self.variant {
            Variant::Convex => self.eta[i],
            Variant::Nonconvex => 0.0,
        }
    }

    fn effective_eta0(&self) -> f64 {
        match self.variant {
            Variant::Convex => self.eta0,
            Variant::Nonconvex => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedState {
    pub z: Vector,
    pub x: Vec<Vector>,
    pub lambda: Vec<Vector>,
    pub k: usize,
}

impl FedState {
    pub fn zeros(inst: &FederatedInstance) -> Self {
        let d = inst.dim();
        let n = inst.n_devices();
        Self {
            z: Vector::zeros(d),
            x: vec![Vector::zeros(d); n],
            lambda: vec![Vector::zeros(d); n],
            k: 0,
        }
    }

    /// `Σ_i‖x_i − z‖²`.
    pub fn feasibility_residual(&self) -> f64 {
        self.x.iter().map(|x| (x - &self.z).norm_squared()).sum()
    }
}

/// Generator for round `k`: stream `k` of a ChaCha generator keyed by `seed`.
pub fn round_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// `m` distinct blocks from `{0, …, n_devices}`, uniformly, sorted.
pub fn sample_blocks<R: Rng + ?Sized>(n_devices: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > n_devices + 1 {
        return Err(Error::InvalidParameter(format!(
            "cannot draw {m} blocks out of {}",
            n_devices + 1
        )));
    }
    let mut s = rand::seq::index::sample(rng, n_devices + 1, m).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// `z⁺ = (ρΣx_i + Σλ_i + η_0 z) / (ρN + η_0)`.
pub fn server_z_update(st: &FedState, rho: f64, eta0: f64) -> Result<Vector> {
    let denom = rho * st.x.len() as f64 + eta0;
    if !(denom > 0.0) {
        return Err(Error::InvalidParameter("ρN + η_0 must be positive".into()));
    }
    let mut num = &st.z * eta0;
    for (x, l) in st.x.iter().zip(&st.lambda) {
        num += x * rho + l;
    }
    Ok(num / denom)
}

/// Device `i` (zero-based) minimizes
/// `f_i(x) + λ_iᵀ(x − z) + (ρ/2)‖x − z‖² + η‖x − x_i‖²` against the given `z`.
pub fn client_local_solve(
    inst: &FederatedInstance,
    i: usize,
    st: &FedState,
    z: &Vector,
    rho: f64,
    eta: f64,
    solver: LocalSolver,
) -> Result<Vector> {
    let f = &inst.scaled()[i];
    let (xi, li) = (&st.x[i], &st.lambda[i]);
    let d = inst.dim();
    match solver {
        LocalSolver::Exact => {
            let a = li - z * rho - xi * (2.0 * eta);
            let h = Matrix::identity(d, d) * (rho + 2.0 * eta);
            f.argmin_shifted(&a, &h)
        }
        LocalSolver::GradientSteps { steps } => {
            if !f.is_smooth() {
                return Err(Error::Capability("local gradient steps need a smooth device objective".into()));
            }
            let step = 1.0 / (f.ell() + rho + 2.0 * eta);
            let mut x = xi.clone();
            for _ in 0..steps {
                let g = f.grad(&x)? + li + (&x - z) * rho + (&x - xi) * (2.0 * eta);
                x -= g * step;
            }
            Ok(x)
        }
    }
}

/// Per-round counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundStats {
    /// Sampled devices (block 0 excluded).
    pub participants: usize,
    pub server_updated: bool,
    pub msgs_up: usize,
    pub msgs_down: usize,
    /// Device solves that produced non-finite values and were discarded.
    pub failed_solves: usize,
}

fn solve_devices<F>(devices: &[usize], solve: F) -> Vec<(usize, Result<Vector>)>
where
    F: Fn(usize) -> Result<Vector> + Sync,
{
    // Independent solves; collecting keeps index order whatever the thread count.
    devices.par_iter().map(|&i| (i, solve(i))).collect()
}

fn commit(st: &mut FedState, results: Vec<(usize, Result<Vector>)>) -> Result<usize> {
    let mut failed = 0;
    for (i, r) in results {
        let x = r?;
        if x.iter().all(|v| v.is_finite()) {
            st.x[i] = x;
        } else {
            failed += 1;
        }
    }
    Ok(failed)
}

/// One round of the PDMM method.
pub fn pdmm_round(inst: &FederatedInstance, cfg: &FedConfig, st: &FedState) -> Result<(FedState, RoundStats)> {
    let blocks = sample_blocks(inst.n_devices(), cfg.blocks_per_round, &mut round_rng(cfg.seed, st.k))?;
    pdmm_round_with(inst, cfg, st, &blocks)
}

/// One round of the PDMM method on a given block set.
pub fn pdmm_round_with(
    inst: &FederatedInstance,
    cfg: &FedConfig,
    st: &FedState,
    blocks: &[usize],
) -> Result<(FedState, RoundStats)> {
    let server_updated = blocks.first() == Some(&0);
    let devices: Vec<usize> = blocks.iter().filter(|&&b| b > 0).map(|b| b - 1).collect();
    let z_new = if server_updated {
        server_z_update(st, cfg.rho, cfg.effective_eta0())?
    } else {
        st.z.clone()
    };
    let z_seen = match cfg.variant {
        Variant::Convex => &st.z,
        Variant::Nonconvex => &z_new,
    };
    let results = solve_devices(&devices, |i| {
        client_local_solve(inst, i, st, z_seen, cfg.rho, cfg.effective_eta(i), cfg.local_solver)
    });
    let mut next = st.clone();
    let failed_solves = commit(&mut next, results)?;
    next.z = z_new;
    match cfg.variant {
        Variant::Convex => {
            for i in 0..inst.n_devices() {
                next.lambda[i] += (&next.x[i] - &next.z) * cfg.rho;
            }
        }
        Variant::Nonconvex => {
            for &i in &devices {
                next.lambda[i] += (&next.x[i] - &next.z) * cfg.rho;
            }
        }
    }
    next.k += 1;
    let stats = RoundStats {
        participants: devices.len(),
        server_updated,
        msgs_up: devices.len(),
        msgs_down: 2 * devices.len(),
        failed_solves,
    };
    Ok((next, stats))
}

/// One FedProx-style round: sampled devices minimize `F_i(x) + (ρ/2)‖x − z‖²`
/// and the server takes the `p`-weighted mean of the participants.
pub fn fedprox_round(inst: &FederatedInstance, cfg: &FedConfig, st: &FedState) -> Result<(FedState, RoundStats)> {
    let blocks = sample_blocks(inst.n_devices(), cfg.blocks_per_round, &mut round_rng(cfg.seed, st.k))?;
    let devices: Vec<usize> = blocks.iter().filter(|&&b| b > 0).map(|b| b - 1).collect();
    let d = inst.dim();
    let results = solve_devices(&devices, |i| {
        let f = &inst.devices()[i];
        match cfg.local_solver {
            LocalSolver::Exact => {
                let h = Matrix::identity(d, d) * cfg.rho;
                f.argmin_shifted(&(-&st.z * cfg.rho), &h)
            }
            LocalSolver::GradientSteps { steps } => {
                let step = 1.0 / (f.ell() + cfg.rho);
                let mut x = st.x[i].clone();
                for _ in 0..steps {
                    let g = f.grad(&x)? + (&x - &st.z) * cfg.rho;
                    x -= g * step;
                }
                Ok(x)
            }
        }
    });
    let mut next = st.clone();
    let failed_solves = commit(&mut next, results)?;
    if !devices.is_empty() {
        let mut num = Vector::zeros(d);
        let mut den = 0.0;
        for &i in &devices {
            num += &next.x[i] * inst.weights()[i];
            den += inst.weights()[i];
        }
        next.z = num / den;
    }
    next.k += 1;
    let stats = RoundStats {
        participants: devices.len(),
        server_updated: !devices.is_empty(),
        msgs_up: devices.len(),
        msgs_down: devices.len(),
        failed_solves,
    };
    Ok((next, stats))
}

pub const FED_COLUMNS: [&str; 6] = ["round", "gap", "feas_residual", "participants", "msgs_up", "msgs_down"];

#[derive(Debug, Clone)]
pub struct FedRun {
    pub state: FedState,
    pub trace: Trace,
}

fn run_rounds<F>(inst: &FederatedInstance, cfg: &FedConfig, f_star: f64, mut round: F) -> Result<FedRun>
where
    F: FnMut(&FedState) -> Result<(FedState, RoundStats)>,
{
    cfg.validate(inst)?;
    let mut trace = Trace::new(&FED_COLUMNS);
    let mut state = FedState::zeros(inst);
    let mut failed = 0;
    for _ in 0..cfg.rounds {
        let (next, stats) = round(&state)?;
        state = next;
        failed += stats.failed_solves;
        trace.push(vec![
            state.k as f64,
            inst.objective(&state.z)? - f_star,
            state.feasibility_residual(),
            stats.participants as f64,
            stats.msgs_up as f64,
            stats.msgs_down as f64,
        ])?;
    }
    if failed > 0 {
        trace.flag(format!("{failed} local solves diverged and were discarded"));
    }
    Ok(FedRun { state, trace })
}

/// `cfg.rounds` PDMM rounds from zero; `gap` is `f(z) − f_star`.
pub fn run_federated(inst: &FederatedInstance, cfg: &FedConfig, f_star: f64) -> Result<FedRun> {
    run_rounds(inst, cfg, f_star, |st| pdmm_round(inst, cfg, st))
}

/// FedProx-style baseline with the same sampling and trace columns.
pub fn run_fedprox_baseline(inst: &FederatedInstance, cfg: &FedConfig, f_star: f64) -> Result<FedRun> {
    run_rounds(inst, cfg, f_star, |st| fedprox_round(inst, cfg, st))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn cfg(inst: &FederatedInstance, m: usize, eta: f64) -> FedConfig {
        FedConfig {
            rho: 1.0,
            eta0: eta,
            eta: vec![eta; inst.n_devices()],
            blocks_per_round: m,
            rounds: 100,
            local_solver: LocalSolver::Exact,
            variant: Variant::Convex,
            seed: 7,
        }
    }

    #[test]
    fn weights_must_form_a_simplex() {
        let f = FunctionOracle::zero(1);
        assert!(FederatedInstance::new(vec![f.clone(); 2], vec![0.5, 0.6]).is_err());
        assert!(FederatedInstance::new(vec![f.clone(); 2], vec![1.0, 0.0]).is_err());
        assert!(FederatedInstance::new(vec![f; 2], vec![0.25, 0.75]).is_ok());
        let inst = FederatedInstance::synthetic_quadratic(20, 3, 1).unwrap();
        assert!((inst.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sampling_examples() {
        let mut rng = round_rng(1, 0);
        assert_eq!(sample_blocks(4, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_blocks(4, 6, &mut rng).is_err());
        assert!(sample_blocks(4, 0, &mut rng).is_err());
        let a: Vec<_> = (0..20).map(|k| sample_blocks(9, 3, &mut round_rng(5, k)).unwrap()).collect();
        let b: Vec<_> = (0..20).map(|k| sample_blocks(9, 3, &mut round_rng(5, k)).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_sampling_is_uniform() {
        let n = 9;
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; n + 1];
        for _ in 0..draws {
            counts[sample_blocks(n, 1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 1.0 / (n + 1) as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "{freq}");
        }
    }

    #[test]
    fn server_update_examples() {
        let st = FedState { z: v(&[0.0]), x: vec![v(&[3.0])], lambda: vec![v(&[0.0])], k: 0 };
        assert_eq!(server_z_update(&st, 1.0, 0.0).unwrap(), v(&[3.0]));

        let z = v(&[1.0, -2.0]);
        let st = FedState { z: z.clone(), x: vec![z.clone(); 3], lambda: vec![v(&[0.0, 0.0]); 3], k: 0 };
        assert!((server_z_update(&st, 2.0, 0.5).unwrap() - &z).amax() < 1e-15);

        let st = FedState { z: v(&[1.0]), x: vec![v(&[5.0]); 2], lambda: vec![v(&[3.0]); 2], k: 0 };
        let frozen = server_z_update(&st, 1.0, 1e12).unwrap();
        assert!((frozen[0] - 1.0).abs() <= 1e-9);
        assert!(server_z_update(&st, 0.0, 0.0).is_err());
    }

    #[test]
    fn local_solve_examples() {
        let a = v(&[2.0, -1.0]);
        let p = 0.25;
        let inst = FederatedInstance::new(
            vec![FunctionOracle::centered_quadratic(&a, 1.0), FunctionOracle::zero(2)],
            vec![p, 1.0 - p],
        )
        .unwrap();
        let z = v(&[0.5, 0.5]);
        let mut st = FedState::zeros(&inst);
        st.z = z.clone();
        let rho = 1.5;
        let x = client_local_solve(&inst, 0, &st, &z, rho, 0.0, LocalSolver::Exact).unwrap();
        let expected = (&a * p + &z * rho) / (p + rho);
        assert!((x - expected).amax() < 1e-14);

        let x = client_local_solve(&inst, 0, &st, &z, 1e12, 0.0, LocalSolver::Exact).unwrap();
        assert!((x - &z).amax() < 1e-10);

        st.x[0] = v(&[-4.0, 4.0]);
        let x = client_local_solve(&inst, 0, &st, &z, rho, 1e12, LocalSolver::Exact).unwrap();
        assert!((x - &st.x[0]).amax() < 1e-10);

        // Many gradient steps approach the exact solve.
        st.lambda[0] = v(&[0.3, -0.2]);
        let exact = client_local_solve(&inst, 0, &st, &z, rho, 0.4, LocalSolver::Exact).unwrap();
        let approx = client_local_solve(&inst, 0, &st, &z, rho, 0.4, LocalSolver::GradientSteps { steps: 500 }).unwrap();
        assert!((exact - approx).amax() < 1e-12);
    }

    #[test]
    fn duals_accumulate_constraint_violation() {
        let inst = FederatedInstance::synthetic_quadratic(6, 2, 3).unwrap();
        let c = cfg(&inst, 3, 1.0);
        let mut st = FedState::zeros(&inst);
        let mut acc = Vector::zeros(2);
        for _ in 0..50 {
            st = pdmm_round(&inst, &c, &st).unwrap().0;
            for x in &st.x {
                acc += (x - &st.z) * c.rho;
            }
            let total: Vector = st.lambda.iter().sum();
            assert!((&total - &acc).amax() < 1e-10);
        }
    }

    #[test]
    fn feasible_iterates_keep_duals() {
        let inst = FederatedInstance::uniform(vec![FunctionOracle::centered_quadratic(&v(&[1.0]), 1.0); 3]).unwrap();
        let c = cfg(&inst, 4, 0.0);
        let st = FedState { z: v(&[1.0]), x: vec![v(&[1.0]); 3], lambda: vec![v(&[0.0]); 3], k: 0 };
        let (next, _) = pdmm_round(&inst, &c, &st).unwrap();
        assert!(next.lambda.iter().all(|l| l.amax() < 1e-15));
    }

    #[test]
    fn nonconvex_variant_touches_only_sampled_duals() {
        let inst = FederatedInstance::synthetic_quadratic(8, 2, 4).unwrap();
        let mut c = cfg(&inst, 3, 1.0);
        c.variant = Variant::Nonconvex;
        let mut st = FedState::zeros(&inst);
        for (i, l) in st.lambda.iter_mut().enumerate() {
            *l = v(&[i as f64 * 0.1, -0.3]);
        }
        for _ in 0..30 {
            let blocks = sample_blocks(8, 3, &mut round_rng(c.seed, st.k)).unwrap();
            let (next, _) = pdmm_round(&inst, &c, &st).unwrap();
            for i in 0..8 {
                if !blocks.contains(&(i + 1)) {
                    assert_eq!(next.lambda[i], st.lambda[i]);
                    assert_eq!(next.x[i], st.x[i]);
                }
            }
            st = next;
        }
    }

    #[test]
    fn single_device_is_proximal_iteration() {
        // N = 1 with full participation: z⁺ = x + λ/ρ, then x⁺ and λ⁺ in closed form.
        let a = v(&[2.0]);
        let inst = FederatedInstance::uniform(vec![FunctionOracle::centered_quadratic(&a, 3.0)]).unwrap();
        let c = FedConfig { rounds: 40, ..cfg(&inst, 2, 0.0) };
        let mut st = FedState::zeros(&inst);
        let (mut z, mut x, mut l) = (0.0_f64, 0.0_f64, 0.0_f64);
        for _ in 0..40 {
            st = pdmm_round(&inst, &c, &st).unwrap().0;
            let z_new = x + l / c.rho;
            x = (3.0 * 2.0 - l + c.rho * z) / (3.0 + c.rho);
            z = z_new;
            l += c.rho * (x - z);
            assert!((st.z[0] - z).abs() < 1e-12 && (st.x[0][0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn full_participation_nonconvex_variant_is_consensus_admm() {
        let (n, d) = (6, 3);
        let inst = FederatedInstance::synthetic_quadratic(n, d, 9).unwrap();
        let c = FedConfig { rounds: 60, variant: Variant::Nonconvex, ..cfg(&inst, n + 1, 0.0) };
        let parts: Vec<_> = inst.scaled().iter().map(|f| f.quadratic_parts().unwrap()).collect();
        let mut st = FedState::zeros(&inst);
        let mut z: Vector;
        let mut x = vec![Vector::zeros(d); n];
        let mut l = vec![Vector::zeros(d); n];
        for _ in 0..c.rounds {
            st = pdmm_round(&inst, &c, &st).unwrap().0;
            // z-update, then x-update against the new z, then the dual ascent.
            z = x.iter().zip(&l).map(|(xi, li)| xi + li / c.rho).sum::<Vector>() / n as f64;
            for i in 0..n {
                let (q, qv) = &parts[i];
                let h = q + Matrix::identity(d, d) * c.rho;
                x[i] = h.lu().solve(&(&z * c.rho - &l[i] - qv)).unwrap();
                l[i] += (&x[i] - &z) * c.rho;
            }
            let scale = 1.0 + z.amax();
            assert!((&st.z - &z).amax() <= 1e-10 * scale);
            for i in 0..n {
                assert!((&st.x[i] - &x[i]).amax() <= 1e-10 * scale);
                assert!((&st.lambda[i] - &l[i]).amax() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn full_participation_converges() {
        let inst = FederatedInstance::synthetic_quadratic(10, 3, 5).unwrap();
        let (_, f_star) = inst.reference().unwrap();
        // Penalty near the device curvature p_i·μ_i, heavy damping on z.
        let rho = 0.04;
        let c = FedConfig {
            rho,
            eta0: 2.0 * rho * 10.0,
            eta: vec![0.5 * rho; 10],
            rounds: 500,
            ..cfg(&inst, 11, 0.0)
        };
        let run = run_federated(&inst, &c, f_star).unwrap();
        let gap = run.trace.last("gap").unwrap();
        assert!((-1e-12..=1e-6).contains(&gap), "gap {gap}");
        assert!(run.trace.last("feas_residual").unwrap() <= 1e-8);
    }

    #[test]
    fn fedprox_examples() {
        let f = FunctionOracle::centered_quadratic(&v(&[1.0, -1.0]), 2.0);
        let inst = FederatedInstance::uniform(vec![f; 4]).unwrap();
        let (z_star, f_star) = inst.reference().unwrap();
        let c = FedConfig { rounds: 300, ..cfg(&inst, 3, 0.5) };
        let prox = run_fedprox_baseline(&inst, &c, f_star).unwrap();
        let pdmm = run_federated(&inst, &c, f_star).unwrap();
        assert!((&prox.state.z - &z_star).amax() < 1e-6);
        assert!((&pdmm.state.z - &z_star).amax() < 1e-6);
        assert_eq!(prox.trace.columns(), pdmm.trace.columns());

        let c = FedConfig { rho: 1e12, rounds: 20, ..c };
        let frozen = run_fedprox_baseline(&inst, &c, f_star).unwrap();
        assert!(frozen.state.z.amax() < 1e-10);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let inst = FederatedInstance::synthetic_quadratic(12, 3, 6).unwrap();
        let c = FedConfig { rounds: 50, ..cfg(&inst, 6, 0.5) };
        let run_with = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_federated(&inst, &c, 0.0).unwrap().trace)
        };
        assert_eq!(run_with(1), run_with(4));
    }

    #[test]
    fn rejects_bad_config() {
        let inst = FederatedInstance::synthetic_quadratic(3, 1, 1).unwrap();
        let mut c = cfg(&inst, 5, 0.0);
        assert!(run_federated(&inst, &c, 0.0).is_err());
        c.blocks_per_round = 2;
        c.eta = vec![0.0; 2];
        assert!(run_federated(&inst, &c, 0.0).is_err());
    }
}

//! Peer-to-peer energy trading over an undirected trading graph.
//!
//! Peer `i` consumes `E_i^{(c)}`, sells `ε_i` in total and buys `E_ji` from
//! each neighbor `j`, so it generates `g_i = E_i^{(c)} + ε_i − Σ_j E_ji`. The
//! market clears when every offer matches the purchases requested from it,
//! `r_i = ε_i − Σ_j E_ij = 0`; the multiplier `λ_i` of that constraint is the
//! local price (`−λ_i` is what peer `i` earns per unit sold).
//!
//! Every trade is capped at `E_max`, and offers at `deg(i)·E_max`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::graph::Topology;
use crate::linalg::{max_eigenvalue, Matrix, Vector};
use crate::oracle::FunctionOracle;
use crate::reference::pinv_solve;
use crate::saddle::{projected_minimize, InnerMethod};
use crate::trace::Trace;

/// Change per sweep below which Dykstra's iteration stops.
pub const DYKSTRA_TOL: f64 = 1e-12;
const DYKSTRA_MAX_SWEEPS: usize = 100_000;
/// Gradient-mapping tolerance for iterative peer subproblems.
pub const SUBPROBLEM_TOL: f64 = 1e-10;
/// Largest local dimension solved by active-set enumeration.
const ENUMERATION_MAX_DIM: usize = 9;
const REFERENCE_TOL: f64 = 1e-9;
const REFERENCE_BUDGET: usize = 500_000;

#[derive(Debug, Clone)]
pub struct EnergyNetwork {
    topology: Topology,
    consumption: Vec<f64>,
    costs: Vec<FunctionOracle>,
    /// `arc_costs[i][k]` is `γ_ji` for `j = neighbors(i)[k]`.
    arc_costs: Vec<Vec<FunctionOracle>>,
    offsets: Vec<usize>,
    trade_cap: f64,
}

impl EnergyNetwork {
    /// `arc_costs` maps every directed arc `(seller, buyer)` of the topology to
    /// its transfer cost `γ`. The trade cap defaults to `10·max_i E_i^{(c)}`.
    pub fn new(
        topology: Topology,
        consumption: Vec<f64>,
        costs: Vec<FunctionOracle>,
        arc_costs: BTreeMap<(usize, usize), FunctionOracle>,
    ) -> Result<Self> {
        let n = topology.n_nodes();
        check_dim("peer consumption", n, consumption.len())?;
        check_dim("peer generation costs", n, costs.len())?;
        if consumption.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidParameter("consumption must be finite and nonnegative".into()));
        }
        for (i, c) in costs.iter().enumerate() {
            check_dim("generation cost dimension", 1, c.dim())?;
            if !c.is_convex() {
                return Err(Error::InvalidParameter(format!("generation cost of peer {i} is not convex")));
            }
        }
        let mut arcs = arc_costs;
        let mut per_peer = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            let mut row = Vec::with_capacity(topology.degree(i));
            for &j in topology.neighbors(i) {
                let g = arcs
                    .remove(&(j, i))
                    .ok_or_else(|| Error::InvalidParameter(format!("missing transfer cost for arc {j} -> {i}")))?;
                check_dim("transfer cost dimension", 1, g.dim())?;
                if !g.is_convex() {
                    return Err(Error::InvalidParameter(format!("transfer cost on arc {j} -> {i} is not convex")));
                }
                row.push(g);
            }
            offsets.push(offsets[i] + row.len());
            per_peer.push(row);
        }
        if let Some(((j, i), _)) = arcs.into_iter().next() {
            return Err(Error::InvalidParameter(format!("transfer cost given for non-arc {j} -> {i}")));
        }
        let trade_cap = 10.0 * consumption.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            topology,
            consumption,
            costs,
            arc_costs: per_peer,
            offsets,
            trade_cap,
        })
    }

    /// Strictly convex ring: quadratic generation costs of varied steepness and
    /// quadratic transfer costs, so cheap peers export to expensive ones.
    pub fn ring_benchmark(n: usize) -> Result<Self> {
        let topology = Topology::ring(n)?;
        let consumption = (0..n).map(|i| [1.0, 2.0, 0.5, 3.0, 1.5][i % 5]).collect();
        let costs = (0..n)
            .map(|i| {
                let (q, l) = [(0.5, 1.0), (2.0, 2.0), (0.4, 0.5), (1.5, 3.0), (1.0, 1.5)][i % 5];
                FunctionOracle::quadratic(Matrix::from_element(1, 1, q), Vector::from_element(1, l))
            })
            .collect::<Result<_>>()?;
        let gamma = FunctionOracle::quadratic(Matrix::from_element(1, 1, 0.5), Vector::from_element(1, 0.2))?;
        Self::with_uniform_transfer(topology, consumption, costs, gamma)
    }

    /// Two peers with linear costs: peer 0 generates at unit cost 1, peer 1 at
    /// 3, transfer costs 0.5 per unit. Peer 0 should cover peer 1's demand.
    pub fn linear_pair() -> Result<Self> {
        let topology = Topology::path(2)?;
        let costs = vec![
            FunctionOracle::linear(Vector::from_element(1, 1.0)),
            FunctionOracle::linear(Vector::from_element(1, 3.0)),
        ];
        let gamma = FunctionOracle::linear(Vector::from_element(1, 0.5));
        Self::with_uniform_transfer(topology, vec![1.0, 2.0], costs, gamma)
    }

    /// The same transfer cost on every arc.
    pub fn with_uniform_transfer(
        topology: Topology,
        consumption: Vec<f64>,
        costs: Vec<FunctionOracle>,
        gamma: FunctionOracle,
    ) -> Result<Self> {
        let arcs = directed_arcs(&topology).into_iter().map(|a| (a, gamma.clone())).collect();
        Self::new(topology, consumption, costs, arcs)
    }

    pub fn with_trade_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap.is_finite() && cap >= 0.0) {
            return Err(Error::InvalidParameter(format!("trade cap {cap} must be finite and nonnegative")));
        }
        self.trade_cap = cap;
        Ok(self)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn n_peers(&self) -> usize {
        self.topology.n_nodes()
    }

    pub fn consumption(&self) -> &[f64] {
        &self.consumption
    }

    pub fn costs(&self) -> &[FunctionOracle] {
        &self.costs
    }

    pub fn trade_cap(&self) -> f64 {
        self.trade_cap
    }

    /// Number of directed arcs.
    pub fn n_arcs(&self) -> usize {
        self.offsets[self.n_peers()]
    }

    /// Directed arcs `(seller, buyer)`, grouped by buyer.
    pub fn arcs(&self) -> Vec<(usize, usize)> {
        (0..self.n_peers())
            .flat_map(|i| self.topology.neighbors(i).iter().map(move |&j| (j, i)))
            .collect()
    }

    /// Position of arc `seller -> buyer` in [`arcs`](Self::arcs).
    pub fn arc_index(&self, seller: usize, buyer: usize) -> Option<usize> {
        let pos = self.topology.neighbors(buyer).binary_search(&seller).ok()?;
        Some(self.offsets[buyer] + pos)
    }

    /// Whether every cost is strictly convex.
    pub fn is_strictly_convex(&self) -> bool {
        self.costs.iter().chain(self.arc_costs.iter().flatten()).all(|c| c.mu() > 0.0)
    }

    /// Upper bounds on peer `i`'s local variables `(ε_i, E_ji…)`.
    fn local_upper(&self, i: usize) -> Vector {
        let d = self.topology.degree(i);
        let mut u = Vector::from_element(d + 1, self.trade_cap);
        u[0] = self.trade_cap * d as f64;
        u
    }

    /// `a` with `aᵀ(ε_i, E_ji…) ≤ E_i^{(c)}` encoding `g_i ≥ 0`.
    fn local_halfspace(&self, i: usize) -> Vector {
        let mut a = Vector::from_element(self.topology.degree(i) + 1, 1.0);
        a[0] = -1.0;
        a
    }

    /// Halfspaces `g_i(E) ≥ 0` over the arc vector.
    fn global_halfspaces(&self) -> Vec<(Vector, f64)> {
        let m = self.n_arcs();
        (0..self.n_peers())
            .map(|i| {
                let mut a = Vector::zeros(m);
                for &j in self.topology.neighbors(i) {
                    a[self.arc_index(j, i).unwrap()] += 1.0;
                    a[self.arc_index(i, j).unwrap()] -= 1.0;
                }
                (a, self.consumption[i])
            })
            .collect()
    }

    /// Generation `g_i(E) = E_i^{(c)} + Σ_j E_ij − Σ_j E_ji` for an arc vector.
    pub fn generation(&self, trades: &Vector) -> Result<Vec<f64>> {
        check_dim("trade vector", self.n_arcs(), trades.len())?;
        Ok((0..self.n_peers())
            .map(|i| {
                self.topology.neighbors(i).iter().fold(self.consumption[i], |g, &j| {
                    g + trades[self.arc_index(i, j).unwrap()] - trades[self.arc_index(j, i).unwrap()]
                })
            })
            .collect())
    }

    /// Total generation and transfer cost of an arc vector.
    pub fn objective(&self, trades: &Vector) -> Result<f64> {
        let gen = self.generation(trades)?;
        let mut total = 0.0;
        for (c, g) in self.costs.iter().zip(gen) {
            total += c.eval(&Vector::from_element(1, g))?;
        }
        for i in 0..self.n_peers() {
            for (k, gamma) in self.arc_costs[i].iter().enumerate() {
                total += gamma.eval(&Vector::from_element(1, trades[self.offsets[i] + k]))?;
            }
        }
        Ok(total)
    }

    fn objective_grad(&self, trades: &Vector) -> Result<Vector> {
        let gen = self.generation(trades)?;
        let mut g = Vector::zeros(self.n_arcs());
        for i in 0..self.n_peers() {
            let dc = self.costs[i].grad(&Vector::from_element(1, gen[i]))?[0];
            for (k, &j) in self.topology.neighbors(i).iter().enumerate() {
                let buy = self.offsets[i] + k;
                g[buy] += self.arc_costs[i][k].grad(&Vector::from_element(1, trades[buy]))?[0] - dc;
                g[self.arc_index(i, j).unwrap()] += dc;
            }
        }
        Ok(g)
    }

    fn objective_lipschitz(&self) -> f64 {
        let m = self.n_arcs();
        let mut h = Matrix::zeros(m, m);
        for (i, (a, _)) in self.global_halfspaces().iter().enumerate() {
            h += a * a.transpose() * self.costs[i].ell();
        }
        for i in 0..self.n_peers() {
            for (k, gamma) in self.arc_costs[i].iter().enumerate() {
                h[(self.offsets[i] + k, self.offsets[i] + k)] += gamma.ell();
            }
        }
        max_eigenvalue(&h)
    }

    /// Projection of an arc vector onto the feasible trades.
    pub fn project_trades(&self, trades: &Vector) -> Result<Vector> {
        check_dim("trade vector", self.n_arcs(), trades.len())?;
        let upper = Vector::from_element(self.n_arcs(), self.trade_cap);
        Ok(dykstra(trades, &upper, &self.global_halfspaces()))
    }

    /// Centralized solution of the trading problem by projected Nesterov.
    pub fn reference(&self) -> Result<EnergyReference> {
        let m = self.n_arcs();
        if m == 0 {
            let trades = Vector::zeros(0);
            let objective = self.objective(&trades)?;
            return Ok(EnergyReference { trades, objective });
        }
        if self.costs.iter().chain(self.arc_costs.iter().flatten()).any(|c| !c.is_smooth()) {
            return Err(Error::Capability("reference trading solve needs smooth costs".into()));
        }
        let upper = Vector::from_element(m, self.trade_cap);
        let halfspaces = self.global_halfspaces();
        let (trades, outcome) = projected_minimize(
            |e| self.objective_grad(e),
            |v| Ok(dykstra(&v, &upper, &halfspaces)),
            &Vector::zeros(m),
            curvature_floor(self.objective_lipschitz()),
            0.0,
            InnerMethod::Nesterov,
            REFERENCE_TOL,
            REFERENCE_BUDGET,
        )?;
        if !outcome.converged {
            return Err(Error::NotConverged("reference trading solve hit its budget".into()));
        }
        let objective = self.objective(&trades)?;
        Ok(EnergyReference { trades, objective })
    }
}

/// Step-size curvature for gradient loops; purely linear costs get a unit step.
fn curvature_floor(lipschitz: f64) -> f64 {
    if lipschitz > 0.0 {
        lipschitz
    } else {
        1.0
    }
}

fn directed_arcs(t: &Topology) -> Vec<(usize, usize)> {
    t.edges().iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReference {
    /// Arc vector in [`EnergyNetwork::arcs`] order.
    pub trades: Vector,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeState {
    /// Offers `ε_i`.
    pub eps: Vec<f64>,
    /// `purchases[i][k]` is `E_ji` for `j = neighbors(i)[k]`.
    pub purchases: Vec<Vector>,
    pub prices: Vec<f64>,
    pub k: usize,
}

impl TradeState {
    pub fn zeros(net: &EnergyNetwork) -> Self {
        let n = net.n_peers();
        Self {
            eps: vec![0.0; n],
            purchases: (0..n).map(|i| Vector::zeros(net.topology.degree(i))).collect(),
            prices: vec![0.0; n],
            k: 0,
        }
    }

    fn check(&self, net: &EnergyNetwork) -> Result<()> {
        let n = net.n_peers();
        check_dim("offers", n, self.eps.len())?;
        check_dim("prices", n, self.prices.len())?;
        check_dim("purchase lists", n, self.purchases.len())?;
        for (i, p) in self.purchases.iter().enumerate() {
            check_dim("purchases", net.topology.degree(i), p.len())?;
        }
        Ok(())
    }

    /// Purchases as an arc vector.
    pub fn trades(&self) -> Vector {
        Vector::from_iterator(
            self.purchases.iter().map(|p| p.len()).sum(),
            self.purchases.iter().flat_map(|p| p.iter().cloned()),
        )
    }

    /// Local variables `(ε_i, E_ji…)` of peer `i`.
    pub fn local(&self, i: usize) -> Vector {
        let p = &self.purchases[i];
        Vector::from_fn(p.len() + 1, |r, _| if r == 0 { self.eps[i] } else { p[r - 1] })
    }

    fn set_local(&mut self, i: usize, v: &Vector) {
        self.eps[i] = v[0];
        self.purchases[i] = v.rows(1, v.len() - 1).into_owned();
    }
}

/// `r_i = ε_i − Σ_j E_ij`, the unmatched part of each offer.
pub fn balance_residual(net: &EnergyNetwork, st: &TradeState) -> Result<Vec<f64>> {
    st.check(net)?;
    Ok((0..net.n_peers())
        .map(|i| {
            net.topology.neighbors(i).iter().fold(st.eps[i], |r, &j| {
                let pos = net.topology.neighbors(j).binary_search(&i).unwrap();
                r - st.purchases[j][pos]
            })
        })
        .collect())
}

fn max_abs(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Euclidean projection onto `{0 ≤ v ≤ upper} ∩ ⋂_k {a_kᵀv ≤ b_k}` by Dykstra's algorithm.
pub(crate) fn dykstra(point: &Vector, upper: &Vector, halfspaces: &[(Vector, f64)]) -> Vector {
    let clamp = |v: &Vector| v.zip_map(upper, |x, u| x.clamp(0.0, u));
    let feasible = |v: &Vector| {
        v.iter().zip(upper.iter()).all(|(x, u)| *x >= 0.0 && x <= u) && halfspaces.iter().all(|(a, b)| a.dot(v) <= *b)
    };
    if feasible(point) {
        return point.clone();
    }
    let mut x = point.clone();
    let mut p = Vector::zeros(x.len());
    let mut q = vec![Vector::zeros(x.len()); halfspaces.len()];
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        let prev = x.clone();
        let y = &x + &p;
        x = clamp(&y);
        p = y - &x;
        for ((a, b), qk) in halfspaces.iter().zip(q.iter_mut()) {
            let y = &x + &*qk;
            let excess = a.dot(&y) - b;
            x = if excess > 0.0 { &y - a * (excess / a.norm_squared()) } else { y.clone() };
            *qk = y - &x;
        }
        if (&x - &prev).amax() <= DYKSTRA_TOL * (1.0 + x.amax()) {
            break;
        }
    }
    clamp(&x)
}

/// Projection of peer `i`'s local variables onto its feasible set.
pub fn project_feasible_i(net: &EnergyNetwork, i: usize, point: &Vector) -> Result<Vector> {
    check_dim("local variables", net.topology.degree(i) + 1, point.len())?;
    Ok(dykstra(point, &net.local_upper(i), &[(net.local_halfspace(i), net.consumption[i])]))
}

/// Minimizer of `½vᵀHv + gᵀv` over `{0 ≤ v ≤ u, aᵀv ≤ b}` by enumerating
/// active sets; the first KKT point found is returned.
fn box_halfspace_qp(h: &Matrix, g: &Vector, u: &Vector, a: &Vector, b: f64) -> Result<Option<Vector>> {
    let n = g.len();
    let tol = 1e-9 * (1.0 + h.amax() + g.amax() + u.amax() + b.abs());
    let mut status = vec![0u8; n];
    let combos = 3usize.pow(n as u32);
    for code in 0..combos {
        let mut c = code;
        for s in status.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        // 0: at zero, 1: at the cap, 2: free.
        if status.iter().zip(u.iter()).any(|(s, ui)| *s == 1 && *ui == 0.0) {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&j| status[j] == 2).collect();
        for active in [false, true] {
            let mut v = Vector::from_fn(n, |j, _| if status[j] == 1 { u[j] } else { 0.0 });
            let mu = if free.is_empty() {
                if active {
                    if (a.dot(&v) - b).abs() > tol {
                        continue;
                    }
                    // Any μ ≥ 0 keeping every fixed multiplier signed correctly.
                    let s = h * &v + g;
                    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
                    for j in 0..n {
                        // Need s_j + μa_j ≥ 0 at zero and ≤ 0 at the cap.
                        let (coef, rhs) = if status[j] == 0 { (a[j], -s[j]) } else { (-a[j], s[j]) };
                        if coef > 0.0 {
                            lo = lo.max(rhs / coef);
                        } else if coef < 0.0 {
                            hi = hi.min(rhs / coef);
                        } else if rhs > tol {
                            lo = f64::INFINITY;
                        }
                    }
                    if lo > hi + tol {
                        continue;
                    }
                    lo
                } else {
                    0.0
                }
            } else {
                let nf = free.len();
                let dim = nf + usize::from(active);
                let mut kkt = Matrix::zeros(dim, dim);
                let mut rhs = Vector::zeros(dim);
                let fixed_part = h * &v + g;
                for (r, &jr) in free.iter().enumerate() {
                    for (c, &jc) in free.iter().enumerate() {
                        kkt[(r, c)] = h[(jr, jc)];
                    }
                    rhs[r] = -fixed_part[jr];
                    if active {
                        kkt[(r, nf)] = a[jr];
                        kkt[(nf, r)] = a[jr];
                    }
                }
                if active {
                    rhs[nf] = b - a.dot(&v);
                }
                let sol = match kkt.clone().lu().solve(&rhs) {
                    Some(s) if s.iter().all(|x| x.is_finite()) => s,
                    _ => pinv_solve(&kkt, &rhs)?,
                };
                if (&kkt * &sol - &rhs).amax() > tol {
                    continue;
                }
                for (r, &j) in free.iter().enumerate() {
                    v[j] = sol[r];
                }
                if active {
                    sol[nf]
                } else {
                    0.0
                }
            };
            if mu < -tol || v.iter().zip(u.iter()).any(|(x, ui)| *x < -tol || *x > ui + tol) || a.dot(&v) > b + tol {
                continue;
            }
            let s = h * &v + g + a * mu;
            let ok = (0..n).all(|j| match status[j] {
                0 => s[j] >= -tol,
                1 => s[j] <= tol,
                _ => true,
            });
            if ok {
                return Ok(Some(v.zip_map(u, |x, ui| x.clamp(0.0, ui))));
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradingMode {
    DualDecomposition,
    InexactAlm,
}

/// Dual step `α_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α_0/√(k+1)`.
    InvSqrt { alpha0: f64 },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::InvSqrt { alpha0 } => alpha0 / ((k + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradingConfig {
    pub mode: TradingMode,
    /// Penalty and price step of the augmented variant.
    pub rho: f64,
    /// Price step of dual decomposition.
    pub step: StepSchedule,
    pub inner: InnerMethod,
    /// Inner tolerance is `inner_tol_factor · eps_out`.
    pub inner_tol_factor: f64,
    /// Inner iteration budget `R`.
    pub max_inner: usize,
    pub eps_out: f64,
    pub max_outer: usize,
    /// Rounds without a new smallest residual before the oscillation flag.
    pub window: usize,
}

impl Default for TradingConfig {
    fn default() -> Self {
        Self {
            mode: TradingMode::DualDecomposition,
            rho: 1.0,
            step: StepSchedule::InvSqrt { alpha0: 0.5 },
            inner: InnerMethod::Nesterov,
            inner_tol_factor: 0.1,
            max_inner: 10_000,
            eps_out: 1e-5,
            max_outer: 5_000,
            window: 50,
        }
    }
}

impl TradingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let step_ok = match self.step {
            StepSchedule::Constant { alpha } => alpha >= 0.0 && alpha.is_finite(),
            StepSchedule::InvSqrt { alpha0 } => alpha0 >= 0.0 && alpha0.is_finite(),
        };
        if !positive(self.rho) || !positive(self.eps_out) || !positive(self.inner_tol_factor) || !step_ok {
            return Err(Error::InvalidParameter("trading parameters must be positive".into()));
        }
        if self.max_inner == 0 || self.max_outer == 0 || self.window == 0 {
            return Err(Error::InvalidParameter("iteration budgets and window must be positive".into()));
        }
        Ok(())
    }

    pub fn inner_tol(&self) -> f64 {
        self.inner_tol_factor * self.eps_out
    }
}

/// A peer's reply to a price vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerDecision {
    /// `(ε_i, E_ji…)`.
    pub local: Vector,
    pub iterations: usize,
    /// Some variable sits at the trade cap.
    pub capped: bool,
}

/// Peer `i` minimizes
/// `C_i(E_i^{(c)} + ε_i − Σ_j E_ji) + Σ_j γ_ji(E_ji) + λ_i ε_i − Σ_j λ_j E_ji`
/// over its feasible set.
pub fn peer_subproblem_solve(net: &EnergyNetwork, i: usize, prices: &[f64], cfg: &TradingConfig) -> Result<PeerDecision> {
    check_dim("prices", net.n_peers(), prices.len())?;
    let nbrs = net.topology.neighbors(i);
    let n = nbrs.len() + 1;
    let upper = net.local_upper(i);
    let a = net.local_halfspace(i);
    let b = net.consumption[i];
    let mut lin = Vector::zeros(n);
    lin[0] = prices[i];
    for (k, &j) in nbrs.iter().enumerate() {
        lin[k + 1] = -prices[j];
    }
    let cost = &net.costs[i];
    let gammas = &net.arc_costs[i];
    let quad = cost.quadratic_parts().zip(gammas.iter().map(|g| g.quadratic_parts()).collect::<Option<Vec<_>>>());
    let mut solution = None;
    let mut iterations = 0;
    if let (Some(((qc, lc), parts)), true) = (quad, n <= ENUMERATION_MAX_DIM) {
        // g = E^{(c)} − aᵀv, so C(g) contributes qc·aaᵀ and −(qc·E^{(c)} + lc)·a.
        let mut h = &a * a.transpose() * qc[(0, 0)];
        let mut g = &lin - &a * (qc[(0, 0)] * b + lc[0]);
        for (k, (qg, lg)) in parts.iter().enumerate() {
            h[(k + 1, k + 1)] += qg[(0, 0)];
            g[k + 1] += lg[0];
        }
        solution = box_halfspace_qp(&h, &g, &upper, &a, b)?;
    }
    let v = match solution {
        Some(v) => v,
        None => {
            if !cost.is_smooth() || gammas.iter().any(|g| !g.is_smooth()) {
                return Err(Error::Capability("peer subproblem needs smooth costs".into()));
            }
            let lipschitz = cost.ell() * n as f64 + gammas.iter().map(|g| g.ell()).fold(0.0, f64::max);
            let (v, outcome) = projected_minimize(
                |v| peer_grad(net, i, v, &lin),
                |v| Ok(dykstra(&v, &upper, &[(a.clone(), b)])),
                &Vector::zeros(n),
                curvature_floor(lipschitz),
                0.0,
                cfg.inner,
                SUBPROBLEM_TOL,
                cfg.max_inner,
            )?;
            iterations = outcome.iterations;
            v
        }
    };
    let capped = v.iter().zip(upper.iter()).any(|(x, u)| *u > 0.0 && *x >= u - 1e-9 * (1.0 + u));
    Ok(PeerDecision { local: v, iterations, capped })
}

/// Gradient of peer `i`'s local cost plus the linear price term `lin`.
fn peer_grad(net: &EnergyNetwork, i: usize, v: &Vector, lin: &Vector) -> Result<Vector> {
    let g = net.consumption[i] + v[0] - v.rows(1, v.len() - 1).sum();
    let dc = net.costs[i].grad(&Vector::from_element(1, g))?[0];
    let mut out = lin.clone();
    out[0] += dc;
    for (k, gamma) in net.arc_costs[i].iter().enumerate() {
        out[k + 1] += gamma.grad(&Vector::from_element(1, v[k + 1]))?[0] - dc;
    }
    Ok(out)
}

/// `λ_i⁺ = λ_i + α(ε_i − Σ_j E_ij)`.
pub fn price_update(net: &EnergyNetwork, st: &TradeState, alpha: f64) -> Result<Vec<f64>> {
    let r = balance_residual(net, st)?;
    Ok(st.prices.iter().zip(r).map(|(l, ri)| l + alpha * ri).collect())
}

/// Counts messages and rejects any that do not follow an edge.
struct Exchange<'a> {
    topology: &'a Topology,
    sent: usize,
}

impl<'a> Exchange<'a> {
    fn new(topology: &'a Topology) -> Self {
        Self { topology, sent: 0 }
    }

    fn send(&mut self, from: usize, to: usize) -> Result<()> {
        if !self.topology.has_edge(from, to) {
            return Err(Error::InvalidParameter(format!("message {from} -> {to} does not follow an edge")));
        }
        self.sent += 1;
        Ok(())
    }

    /// One message from every peer to each neighbor.
    fn broadcast(&mut self) -> Result<()> {
        for i in 0..self.topology.n_nodes() {
            for &j in self.topology.neighbors(i) {
                self.send(i, j)?;
            }
        }
        Ok(())
    }
}

pub const TRADING_COLUMNS: [&str; 6] = ["k", "max_residual", "objective", "inner_iters", "msgs", "price_norm"];

#[derive(Debug, Clone)]
pub struct TradingRun {
    pub state: TradeState,
    pub trace: Trace,
    pub converged: bool,
}

/// Flags rounds in which the residual stopped reaching new lows.
struct OscillationDetector {
    window: usize,
    history: Vec<f64>,
    fired: bool,
}

impl OscillationDetector {
    fn new(window: usize) -> Self {
        Self { window, history: Vec::new(), fired: false }
    }

    /// Records a residual; returns true the first time no new minimum has
    /// appeared over the last `window` rounds while above `tol`.
    fn observe(&mut self, residual: f64, tol: f64) -> bool {
        self.history.push(residual);
        let k = self.history.len();
        if self.fired || k < 2 * self.window {
            return false;
        }
        let split = k - self.window;
        let before = self.history[..split].iter().cloned().fold(f64::INFINITY, f64::min);
        let recent = self.history[split..].iter().cloned().fold(f64::INFINITY, f64::min);
        if recent >= before && recent > tol {
            self.fired = true;
        }
        self.fired
    }
}

fn trade_objective(net: &EnergyNetwork, st: &TradeState) -> Result<f64> {
    net.objective(&net.project_trades(&st.trades())?)
}

fn record(
    net: &EnergyNetwork,
    st: &TradeState,
    trace: &mut Trace,
    residual: f64,
    inner: usize,
    msgs: usize,
) -> Result<()> {
    let price_norm = st.prices.iter().map(|p| p * p).sum::<f64>().sqrt();
    trace.push(vec![
        st.k as f64,
        residual,
        trade_objective(net, st)?,
        inner as f64,
        msgs as f64,
        price_norm,
    ])
}

/// Dual decomposition: peers answer the current prices, then prices move
/// along the clearing residual. Stops once `max|r_i| ≤ eps_out`.
pub fn run_dual_decomposition(net: &EnergyNetwork, cfg: &TradingConfig) -> Result<TradingRun> {
    cfg.validate()?;
    let mut st = TradeState::zeros(net);
    let mut trace = Trace::new(&TRADING_COLUMNS);
    let mut detector = OscillationDetector::new(cfg.window);
    let mut capped_rounds = 0;
    let mut converged = false;
    for _ in 0..cfg.max_outer {
        let mut ex = Exchange::new(&net.topology);
        // Prices go out, purchase requests come back.
        ex.broadcast()?;
        let decisions: Vec<Result<PeerDecision>> = (0..net.n_peers())
            .into_par_iter()
            .map(|i| peer_subproblem_solve(net, i, &st.prices, cfg))
            .collect();
        let mut inner = 0;
        let mut capped = false;
        for (i, d) in decisions.into_iter().enumerate() {
            let d = d?;
            inner += d.iterations;
            capped |= d.capped;
            st.set_local(i, &d.local);
        }
        ex.broadcast()?;
        capped_rounds += usize::from(capped);
        let r = balance_residual(net, &st)?;
        let residual = max_abs(&r);
        record(net, &st, &mut trace, residual, inner, ex.sent)?;
        if detector.observe(residual, cfg.eps_out) && !trace.flags().iter().any(|f| f.starts_with("oscillation")) {
            trace.flag(format!(
                "oscillation: max residual made no progress over {} rounds (at round {})",
                cfg.window, st.k
            ));
        }
        if residual <= cfg.eps_out {
            converged = true;
            break;
        }
        let alpha = cfg.step.at(st.k);
        st.prices = st.prices.iter().zip(&r).map(|(l, ri)| l + alpha * ri).collect();
        st.k += 1;
    }
    if capped_rounds > 0 {
        trace.flag(format!("trade cap bound peer subproblems in {capped_rounds} rounds"));
    }
    if !converged {
        trace.flag(format!("max residual above {:e} after {} rounds", cfg.eps_out, cfg.max_outer));
    }
    Ok(TradingRun { state: st, trace, converged })
}

/// Stacked local variables of all peers.
fn stack(st: &TradeState) -> Vector {
    let blocks: Vec<Vector> = (0..st.eps.len()).map(|i| st.local(i)).collect();
    let n = blocks.iter().map(|b| b.len()).sum();
    Vector::from_iterator(n, blocks.iter().flat_map(|b| b.iter().cloned()))
}

fn unstack(net: &EnergyNetwork, st: &mut TradeState, v: &Vector) {
    let mut at = 0;
    for i in 0..net.n_peers() {
        let len = net.topology.degree(i) + 1;
        st.set_local(i, &v.rows(at, len).into_owned());
        at += len;
    }
}

/// Gradient of the augmented Lagrangian over the stacked variables.
fn aug_grad(net: &EnergyNetwork, v: &Vector, prices: &[f64], rho: f64) -> Result<Vector> {
    let mut st = TradeState::zeros(net);
    unstack(net, &mut st, v);
    let r = balance_residual(net, &st)?;
    let mut out = Vector::zeros(v.len());
    let mut at = 0;
    for i in 0..net.n_peers() {
        let nbrs = net.topology.neighbors(i);
        let mut lin = Vector::zeros(nbrs.len() + 1);
        lin[0] = prices[i] + rho * r[i];
        for (k, &j) in nbrs.iter().enumerate() {
            lin[k + 1] = -(prices[j] + rho * r[j]);
        }
        let g = peer_grad(net, i, &st.local(i), &lin)?;
        out.rows_mut(at, g.len()).copy_from(&g);
        at += g.len();
    }
    Ok(out)
}

fn project_all(net: &EnergyNetwork, v: Vector) -> Vector {
    let mut out = v;
    let mut at = 0;
    for i in 0..net.n_peers() {
        let len = net.topology.degree(i) + 1;
        let local = out.rows(at, len).into_owned();
        let p = dykstra(&local, &net.local_upper(i), &[(net.local_halfspace(i), net.consumption[i])]);
        out.rows_mut(at, len).copy_from(&p);
        at += len;
    }
    out
}

/// Augmented-Lagrangian trading: each round minimizes the augmented
/// Lagrangian over all peers' feasible sets by inner projected gradient loops
/// to `inner_tol_factor · eps_out`, then moves prices by `ρ·r`.
pub fn run_inexact_alm_trading(net: &EnergyNetwork, cfg: &TradingConfig) -> Result<TradingRun> {
    cfg.validate()?;
    if net.costs.iter().chain(net.arc_costs.iter().flatten()).any(|c| !c.is_smooth()) {
        return Err(Error::Capability("augmented trading needs smooth costs".into()));
    }
    let lipschitz = (0..net.n_peers())
        .map(|i| net.costs[i].ell() * (net.topology.degree(i) + 1) as f64)
        .fold(0.0, f64::max)
        + net.arc_costs.iter().flatten().map(|g| g.ell()).fold(0.0, f64::max)
        + cfg.rho * (net.topology.max_degree() + 1) as f64;
    let mut st = TradeState::zeros(net);
    let mut v = stack(&st);
    let mut trace = Trace::new(&TRADING_COLUMNS);
    let mut exhausted = 0;
    let mut converged = false;
    for _ in 0..cfg.max_outer {
        let mut evals = 0usize;
        let (next, outcome) = projected_minimize(
            |x| {
                evals += 1;
                aug_grad(net, x, &st.prices, cfg.rho)
            },
            |x| Ok(project_all(net, x)),
            &v,
            lipschitz,
            0.0,
            cfg.inner,
            cfg.inner_tol(),
            cfg.max_inner,
        )?;
        v = next;
        unstack(net, &mut st, &v);
        exhausted += usize::from(!outcome.converged);
        let mut ex = Exchange::new(&net.topology);
        // Each gradient needs purchases sent to sellers and residuals sent back.
        for _ in 0..evals {
            ex.broadcast()?;
            ex.broadcast()?;
        }
        ex.broadcast()?;
        let r = balance_residual(net, &st)?;
        let residual = max_abs(&r);
        record(net, &st, &mut trace, residual, outcome.iterations, ex.sent)?;
        if residual <= cfg.eps_out && outcome.converged {
            converged = true;
            break;
        }
        st.prices = st.prices.iter().zip(&r).map(|(l, ri)| l + cfg.rho * ri).collect();
        st.k += 1;
    }
    if exhausted > 0 {
        trace.flag(format!("inner budget exhausted in {exhausted} rounds"));
    }
    if !converged {
        trace.flag(format!("max residual above {:e} after {} rounds", cfg.eps_out, cfg.max_outer));
    }
    Ok(TradingRun { state: st, trace, converged })
}

/// Runs the mode selected in `cfg`.
pub fn run_trading(net: &EnergyNetwork, cfg: &TradingConfig) -> Result<TradingRun> {
    match cfg.mode {
        TradingMode::DualDecomposition => run_dual_decomposition(net, cfg),
        TradingMode::InexactAlm => run_inexact_alm_trading(net, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeerAllocation {
    pub eps: f64,
    /// Amount sold to each neighbor.
    pub sales: BTreeMap<String, f64>,
    pub price: f64,
}

/// Final allocation keyed by peer index.
pub fn allocation(net: &EnergyNetwork, st: &TradeState) -> Result<BTreeMap<String, PeerAllocation>> {
    st.check(net)?;
    Ok((0..net.n_peers())
        .map(|i| {
            let sales = net
                .topology
                .neighbors(i)
                .iter()
                .map(|&j| {
                    let pos = net.topology.neighbors(j).binary_search(&i).unwrap();
                    (j.to_string(), st.purchases[j][pos])
                })
                .collect();
            (i.to_string(), PeerAllocation { eps: st.eps[i], sales, price: st.prices[i] })
        })
        .collect())
}

//! Steppers for `minimize Σ f_i(x_i) subject to Σ A_i x_i = 0`.
//!
//! All steppers share the augmented Lagrangian
//!
//! ```text
//! L(x, λ) = f(x) + λᵀAx + (ρ/2)‖Ax‖²
//! ```
//!
//! and differ in how the primal variable is updated before the dual ascent
//! step `λ⁺ = λ + ρAx⁺`:
//!
//! | stepper             | primal update                                         |
//! |---------------------|-------------------------------------------------------|
//! | [`alm_step`]        | exact joint minimization                              |
//! | [`inexact_alm_step`]| inner gradient / Nesterov loop to a scheduled tolerance|
//! | [`ahu_step`]        | a single gradient step                                |
//! | [`admm_step`]       | two blocks, Gauss–Seidel                              |
//! | [`jacobi_step`]     | all blocks in parallel (may diverge)                  |
//! | [`pdmm_step`]       | `K` random blocks with Bregman damping and a backward dual step |
//!
//! Every stepper is a pure function of `(problem, state)`; PDMM draws its
//! block subset from a counter-based stream so it stays pure as well.

use std::sync::OnceLock;

use nalgebra::{Cholesky, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{max_eigenvalue, min_eigenvalue, Matrix, Vector};
use crate::oracle::FunctionOracle;
use crate::trace::Trace;

/// Iterates whose norm exceeds this are declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// One separable block `f_i` with its constraint columns `A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub oracle: FunctionOracle,
    pub a: Matrix,
}

impl Block {
    pub fn new(oracle: FunctionOracle, a: Matrix) -> Self {
        Self { oracle, a }
    }
}

#[derive(Debug)]
struct Factors {
    /// Cholesky of `blkdiag(Q_i) + ρAᵀA` when every block is quadratic.
    joint: Option<Cholesky<f64, Dyn>>,
    /// Cholesky of `Q_i + ρA_iᵀA_i` per quadratic block.
    blocks: Vec<Option<Cholesky<f64, Dyn>>>,
}

/// Linearly constrained separable problem with penalty `ρ`.
#[derive(Debug)]
pub struct ProblemSpec {
    blocks: Vec<Block>,
    rho: f64,
    m: usize,
    offsets: Vec<usize>,
    a_full: Matrix,
    ata: Matrix,
    factors: OnceLock<Factors>,
}

impl Clone for ProblemSpec {
    fn clone(&self) -> Self {
        Self::new(self.blocks.clone(), self.rho).expect("cloned problem is valid")
    }
}

impl ProblemSpec {
    /// Random strictly convex quadratic blocks `½xᵀQx + qᵀx` with
    /// `Q = BBᵀ + I/2` and uniform coupling matrices, one block per entry of `dims`.
    pub fn random_quadratic(dims: &[usize], m: usize, rho: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = dims
            .iter()
            .map(|&d| {
                let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let q = &b * b.transpose() + Matrix::identity(d, d) * 0.5;
                let qv = Vector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
                let a = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                Ok(Block::new(FunctionOracle::quadratic(q, qv)?, a))
            })
            .collect::<Result<_>>()?;
        Self::new(blocks, rho)
    }

    pub fn new(blocks: Vec<Block>, rho: f64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidParameter("problem needs at least one block".into()));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("penalty {rho} must be nonnegative")));
        }
        let m = blocks[0].a.nrows();
        let mut offsets = vec![0];
        for b in &blocks {
            check_dim("constraint block rows", m, b.a.nrows())?;
            check_dim("constraint block cols", b.oracle.dim(), b.a.ncols())?;
            offsets.push(offsets.last().unwrap() + b.oracle.dim());
        }
        let n = *offsets.last().unwrap();
        let mut a_full = Matrix::zeros(m, n);
        for (i, b) in blocks.iter().enumerate() {
            a_full.view_mut((0, offsets[i]), (m, b.oracle.dim())).copy_from(&b.a);
        }
        let ata = a_full.transpose() * &a_full;
        Ok(Self {
            blocks,
            rho,
            m,
            offsets,
            a_full,
            ata,
            factors: OnceLock::new(),
        })
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.blocks.clone(), rho)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of constraint rows.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Total primal dimension.
    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn a(&self) -> &Matrix {
        &self.a_full
    }

    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn block_of(&self, x: &Vector, i: usize) -> Vector {
        let r = self.block_range(i);
        x.rows(r.start, r.len()).into_owned()
    }

    fn set_block(&self, x: &mut Vector, i: usize, value: &Vector) {
        let r = self.block_range(i);
        x.rows_mut(r.start, r.len()).copy_from(value);
    }

    fn check_state(&self, x: &Vector, lambda: &Vector) -> Result<()> {
        check_dim("primal vector", self.n(), x.len())?;
        check_dim("dual vector", self.m, lambda.len())
    }

    pub fn objective(&self, x: &Vector) -> Result<f64> {
        check_dim("primal vector", self.n(), x.len())?;
        let mut total = 0.0;
        for (i, b) in self.blocks.iter().enumerate() {
            total += b.oracle.eval(&self.block_of(x, i))?;
        }
        Ok(total)
    }

    pub fn grad_f(&self, x: &Vector) -> Result<Vector> {
        check_dim("primal vector", self.n(), x.len())?;
        let mut g = Vector::zeros(self.n());
        for (i, b) in self.blocks.iter().enumerate() {
            self.set_block(&mut g, i, &b.oracle.grad(&self.block_of(x, i))?);
        }
        Ok(g)
    }

    pub fn constraint_residual(&self, x: &Vector) -> Vector {
        &self.a_full * x
    }

    /// `f(x) + λᵀAx + (ρ/2)‖Ax‖²`.
    pub fn aug_lagrangian(&self, x: &Vector, lambda: &Vector) -> Result<f64> {
        self.check_state(x, lambda)?;
        let ax = self.constraint_residual(x);
        Ok(self.objective(x)? + lambda.dot(&ax) + 0.5 * self.rho * ax.norm_squared())
    }

    /// `∇f(x) + Aᵀλ + ρAᵀAx`.
    pub fn grad_x_aug_lagrangian(&self, x: &Vector, lambda: &Vector) -> Result<Vector> {
        self.check_state(x, lambda)?;
        Ok(self.grad_f(x)? + self.a_full.transpose() * lambda + &self.ata * x * self.rho)
    }

    /// `(‖Ax‖, ‖∇f(x) + Aᵀλ‖)`.
    pub fn kkt_parts(&self, x: &Vector, lambda: &Vector) -> Result<(f64, f64)> {
        self.check_state(x, lambda)?;
        let primal = self.constraint_residual(x).norm();
        let dual = (self.grad_f(x)? + self.a_full.transpose() * lambda).norm();
        Ok((primal, dual))
    }

    /// `‖Ax‖ + ‖∇f(x) + Aᵀλ‖`.
    pub fn kkt_residual(&self, x: &Vector, lambda: &Vector) -> Result<f64> {
        let (p, d) = self.kkt_parts(x, lambda)?;
        Ok(p + d)
    }

    /// Largest block gradient Lipschitz constant.
    pub fn ell_f(&self) -> f64 {
        self.blocks.iter().map(|b| b.oracle.ell()).fold(0.0, f64::max)
    }

    /// Smallest block strong convexity constant.
    pub fn mu_f(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.oracle.mu())
            .fold(f64::INFINITY, f64::min)
    }

    /// Lipschitz constant of `∇_x L(·, λ)`: `ℓ + ρ·λ_max(AᵀA)`.
    pub fn lagrangian_lipschitz(&self) -> f64 {
        self.ell_f() + self.rho * max_eigenvalue(&self.ata)
    }

    /// Default AHU primal step `1 / (ℓ + ρ·λ_max(AᵀA))`.
    pub fn default_ahu_step(&self) -> f64 {
        1.0 / self.lagrangian_lipschitz()
    }

    fn all_quadratic(&self) -> Option<Vec<(Matrix, Vector)>> {
        self.blocks.iter().map(|b| b.oracle.quadratic_parts()).collect()
    }

    fn factors(&self) -> &Factors {
        self.factors.get_or_init(|| {
            let parts = self.all_quadratic();
            let joint = parts.as_ref().and_then(|parts| {
                let mut h = Matrix::zeros(self.n(), self.n());
                for (i, (q, _)) in parts.iter().enumerate() {
                    let r = self.block_range(i);
                    h.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(q);
                }
                Cholesky::new(h + &self.ata * self.rho)
            });
            let blocks = self
                .blocks
                .iter()
                .map(|b| {
                    let (q, _) = b.oracle.quadratic_parts()?;
                    Cholesky::new(q + b.a.transpose() * &b.a * self.rho)
                })
                .collect();
            Factors { joint, blocks }
        })
    }

    fn blocks_decoupled(&self) -> bool {
        for i in 0..self.n_blocks() {
            for j in 0..self.n_blocks() {
                if i == j {
                    continue;
                }
                let (ri, rj) = (self.block_range(i), self.block_range(j));
                if self
                    .ata
                    .view((ri.start, rj.start), (ri.len(), rj.len()))
                    .iter()
                    .any(|v| *v != 0.0)
                {
                    return false;
                }
            }
        }
        true
    }

    /// `argmin_x L(x, λ)`.
    pub fn exact_primal(&self, lambda: &Vector) -> Result<Vector> {
        check_dim("dual vector", self.m, lambda.len())?;
        if let Some(parts) = self.all_quadratic() {
            let chol = self.factors().joint.as_ref().ok_or_else(|| {
                Error::Capability("augmented Lagrangian is not strictly convex in x".into())
            })?;
            let mut q = Vector::zeros(self.n());
            for (i, (_, qi)) in parts.iter().enumerate() {
                self.set_block(&mut q, i, qi);
            }
            let rhs = -q - self.a_full.transpose() * lambda;
            return Ok(chol.solve(&rhs));
        }
        if self.n_blocks() == 1 || self.blocks_decoupled() {
            let zeros = Vector::zeros(self.m);
            let mut x = Vector::zeros(self.n());
            for i in 0..self.n_blocks() {
                let xi = self.block_argmin(i, lambda, &zeros, None)?;
                self.set_block(&mut x, i, &xi);
            }
            return Ok(x);
        }
        Err(Error::Capability(
            "exact joint minimization needs quadratic or decoupled blocks".into(),
        ))
    }

    /// `argmin_{x_i} L(x_i, x_{j≠i}, λ) [+ η B(x_i, center)]`, where `others`
    /// is `Σ_{j≠i} A_j x_j`.
    fn block_argmin(
        &self,
        i: usize,
        lambda: &Vector,
        others: &Vector,
        bregman: Option<(f64, &Bregman, &Vector)>,
    ) -> Result<Vector> {
        let b = &self.blocks[i];
        let at = b.a.transpose();
        match bregman {
            None => {
                if let (Some(chol), Some((_, q))) =
                    (self.factors().blocks[i].as_ref(), b.oracle.quadratic_parts())
                {
                    let rhs = -q - &at * lambda - &at * others * self.rho;
                    return Ok(chol.solve(&rhs));
                }
                let a_lin = &at * lambda + &at * others * self.rho;
                let h = &at * &b.a * self.rho;
                b.oracle.argmin_shifted(&a_lin, &h)
            }
            Some((eta, gen, center)) => {
                let d = b.oracle.dim();
                let mut a_lin = &at * lambda + &at * others * self.rho;
                let mut h = &at * &b.a * self.rho;
                match gen {
                    Bregman::Euclidean => {
                        // B(u, v) = ‖u - v‖².
                        h += Matrix::identity(d, d) * (2.0 * eta);
                        a_lin -= center * (2.0 * eta);
                    }
                    Bregman::Quadratic(mats) => {
                        // B(u, v) = ½ (u - v)ᵀP(u - v).
                        let p = &mats[i];
                        h += p * eta;
                        a_lin -= p * center * eta;
                    }
                }
                b.oracle.argmin_shifted(&a_lin, &h)
            }
        }
    }

    fn quadratic_inverse_parts(&self) -> Result<Vec<(Cholesky<f64, Dyn>, Vector)>> {
        self.blocks
            .iter()
            .map(|b| {
                let (q, qv) = b.oracle.quadratic_parts().ok_or_else(|| {
                    Error::Capability("closed-form dual needs quadratic blocks".into())
                })?;
                let chol = Cholesky::new(q).ok_or_else(|| {
                    Error::Capability("closed-form dual needs positive definite Q".into())
                })?;
                Ok((chol, qv))
            })
            .collect()
    }
}

/// Primal-dual iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vector,
    pub lambda: Vector,
    /// Forwarded dual used by PDMM.
    pub lambda_hat: Option<Vector>,
    pub k: usize,
}

impl SolverState {
    pub fn new(x: Vector, lambda: Vector) -> Self {
        Self {
            x,
            lambda,
            lambda_hat: None,
            k: 0,
        }
    }

    pub fn zeros(p: &ProblemSpec) -> Self {
        Self::new(Vector::zeros(p.n()), Vector::zeros(p.m()))
    }

    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.lambda.norm_squared()).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(self.lambda.iter()).all(|v| v.is_finite())
    }
}

fn dual_step(p: &ProblemSpec, s: &SolverState, x: Vector) -> SolverState {
    let lambda = &s.lambda + p.constraint_residual(&x) * p.rho;
    SolverState {
        x,
        lambda,
        lambda_hat: None,
        k: s.k + 1,
    }
}

/// Exact primal minimization followed by `λ⁺ = λ + ρAx⁺`.
pub fn alm_step(p: &ProblemSpec, s: &SolverState) -> Result<SolverState> {
    p.check_state(&s.x, &s.lambda)?;
    let x = p.exact_primal(&s.lambda)?;
    Ok(dual_step(p, s, x))
}

/// `argmax_μ D(μ) − ‖μ − λ‖²/(2ρ)`, solved in closed form for quadratic blocks.
pub fn prox_point_dual_step(p: &ProblemSpec, lambda: &Vector) -> Result<Vector> {
    check_dim("dual vector", p.m(), lambda.len())?;
    if !(p.rho() > 0.0) {
        return Err(Error::InvalidParameter("proximal dual step needs ρ > 0".into()));
    }
    // D(μ) = Σ_i −½ (q_i + A_iᵀμ)ᵀ Q_i⁻¹ (q_i + A_iᵀμ) + const, so the
    // maximizer solves (A Q⁻¹ Aᵀ + I/ρ) μ = λ/ρ − A Q⁻¹ q.
    let parts = p.quadratic_inverse_parts()?;
    let m = p.m();
    let mut lhs = Matrix::identity(m, m) / p.rho();
    let mut rhs = lambda / p.rho();
    for (b, (chol, q)) in p.blocks().iter().zip(parts.iter()) {
        let qinv_at = chol.solve(&b.a.transpose());
        lhs += &b.a * qinv_at;
        rhs -= &b.a * chol.solve(q);
    }
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotConverged("singular proximal dual system".into()))
}

/// `D(λ) = inf_x f(x) + λᵀAx` for strictly convex quadratic blocks.
pub fn dual_function_value(p: &ProblemSpec, lambda: &Vector) -> Result<f64> {
    check_dim("dual vector", p.m(), lambda.len())?;
    let parts = p.quadratic_inverse_parts()?;
    let mut total = 0.0;
    for (b, (chol, q)) in p.blocks().iter().zip(parts.iter()) {
        let g = q + b.a.transpose() * lambda;
        let xi = -chol.solve(&g);
        total += b.oracle.eval(&xi)? + lambda.dot(&(&b.a * &xi));
    }
    Ok(total)
}

/// One gradient step on `L(·, λ)` followed by the dual ascent step.
pub fn ahu_step(p: &ProblemSpec, s: &SolverState, alpha: f64) -> Result<SolverState> {
    p.check_state(&s.x, &s.lambda)?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("step size {alpha} must be nonnegative")));
    }
    if p.blocks().iter().any(|b| !b.oracle.is_smooth()) {
        return Err(Error::Capability("AHU needs smooth blocks".into()));
    }
    let g = p.grad_x_aug_lagrangian(&s.x, &s.lambda)?;
    let x = &s.x - g * alpha;
    Ok(dual_step(p, s, x))
}

/// Two-block ADMM: `x_1`, then `x_2`, then the dual.
pub fn admm_step(p: &ProblemSpec, s: &SolverState) -> Result<SolverState> {
    p.check_state(&s.x, &s.lambda)?;
    if p.n_blocks() != 2 {
        return Err(Error::InvalidParameter(format!(
            "ADMM needs exactly 2 blocks, got {}",
            p.n_blocks()
        )));
    }
    let mut x = s.x.clone();
    let x2 = p.block_of(&x, 1);
    let x1 = p.block_argmin(0, &s.lambda, &(&p.blocks()[1].a * &x2), None)?;
    p.set_block(&mut x, 0, &x1);
    let x2 = p.block_argmin(1, &s.lambda, &(&p.blocks()[0].a * &x1), None)?;
    p.set_block(&mut x, 1, &x2);
    Ok(dual_step(p, s, x))
}

/// Parallel block minimization against the frozen previous iterate.
///
/// Not convergent in general; see [`jacobi_iteration_matrix`].
pub fn jacobi_step(p: &ProblemSpec, s: &SolverState) -> Result<SolverState> {
    p.check_state(&s.x, &s.lambda)?;
    let ax = p.constraint_residual(&s.x);
    let mut x = Vector::zeros(p.n());
    for i in 0..p.n_blocks() {
        let xi_old = p.block_of(&s.x, i);
        let others = &ax - &p.blocks()[i].a * xi_old;
        let xi = p.block_argmin(i, &s.lambda, &others, None)?;
        p.set_block(&mut x, i, &xi);
    }
    Ok(dual_step(p, s, x))
}

/// Linear part of the affine Jacobi map `(x, λ) ↦ (x⁺, λ⁺)` for quadratic blocks.
pub fn jacobi_iteration_matrix(p: &ProblemSpec) -> Result<Matrix> {
    let (n, m, rho) = (p.n(), p.m(), p.rho());
    let mut d = Matrix::zeros(n, n);
    let mut coupling = p.ata.clone() * rho;
    for (i, b) in p.blocks().iter().enumerate() {
        let (q, _) = b
            .oracle
            .quadratic_parts()
            .ok_or_else(|| Error::Capability("iteration matrix needs quadratic blocks".into()))?;
        let r = p.block_range(i);
        let own = b.a.transpose() * &b.a * rho;
        d.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&(q + &own));
        let mut view = coupling.view_mut((r.start, r.start), (r.len(), r.len()));
        view -= own;
    }
    let d_lu = d.lu();
    let jx = -d_lu
        .solve(&coupling)
        .ok_or_else(|| Error::Capability("singular block system".into()))?;
    let jl = -d_lu.solve(&p.a().transpose()).unwrap();
    let mut out = Matrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&jx);
    out.view_mut((0, n), (n, m)).copy_from(&jl);
    out.view_mut((n, 0), (m, n)).copy_from(&(p.a() * &jx * rho));
    out.view_mut((n, n), (m, m))
        .copy_from(&(Matrix::identity(m, m) + p.a() * &jl * rho));
    Ok(out)
}

/// Bregman generator for the PDMM damping term.
#[derive(Debug, Clone, PartialEq)]
pub enum Bregman {
    /// `B(u, v) = ‖u − v‖²`.
    Euclidean,
    /// `B(u, v) = ½ (u − v)ᵀ P_i (u − v)`, one positive semidefinite `P_i` per block.
    Quadratic(Vec<Matrix>),
}

/// PDMM parameters. `tau` and `nu` weight the dual coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmmConfig {
    pub blocks_per_iter: usize,
    pub tau: Vec<f64>,
    pub nu: Vec<f64>,
    pub eta: Vec<f64>,
    pub bregman: Bregman,
    pub seed: u64,
}

impl PdmmConfig {
    /// `Θ = (1/K)·I`, `Θ′ = 0`, Euclidean damping with weight `eta` on every block.
    pub fn uniform(p: &ProblemSpec, blocks_per_iter: usize, eta: f64, seed: u64) -> Self {
        let k = blocks_per_iter.max(1) as f64;
        Self {
            blocks_per_iter,
            tau: vec![1.0 / k; p.m()],
            nu: vec![0.0; p.m()],
            eta: vec![eta; p.n_blocks()],
            bregman: Bregman::Euclidean,
            seed,
        }
    }

    pub fn validate(&self, p: &ProblemSpec) -> Result<()> {
        let n = p.n_blocks();
        if self.blocks_per_iter == 0 || self.blocks_per_iter > n {
            return Err(Error::InvalidParameter(format!(
                "PDMM needs 1 <= K <= N, got K = {} with N = {n}",
                self.blocks_per_iter
            )));
        }
        check_dim("PDMM tau", p.m(), self.tau.len())?;
        check_dim("PDMM nu", p.m(), self.nu.len())?;
        check_dim("PDMM eta", n, self.eta.len())?;
        if self.tau.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidParameter("PDMM tau entries must be positive".into()));
        }
        if self.nu.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::InvalidParameter("PDMM nu entries must lie in [0, 1)".into()));
        }
        if self.eta.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidParameter("PDMM eta entries must be nonnegative".into()));
        }
        if let Bregman::Quadratic(mats) = &self.bregman {
            check_dim("Bregman generators", n, mats.len())?;
            for (b, mat) in p.blocks().iter().zip(mats) {
                check_dim("Bregman generator", b.oracle.dim(), mat.nrows())?;
                check_dim("Bregman generator", b.oracle.dim(), mat.ncols())?;
                if crate::linalg::asymmetry(mat) > 1e-12 || min_eigenvalue(mat) < -1e-12 {
                    return Err(Error::InvalidParameter(
                        "Bregman generator is not positive semidefinite".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The `K` blocks PDMM updates at iteration `k`, sorted.
///
/// Drawn from stream `k` of a ChaCha generator keyed by the seed, so the
/// selection depends only on `(seed, k)`.
pub fn pdmm_selection(cfg: &PdmmConfig, n_blocks: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);
    let mut idx = rand::seq::index::sample(&mut rng, n_blocks, cfg.blocks_per_iter).into_vec();
    idx.sort_unstable();
    idx
}

pub fn pdmm_step(p: &ProblemSpec, s: &SolverState, cfg: &PdmmConfig) -> Result<SolverState> {
    p.check_state(&s.x, &s.lambda)?;
    cfg.validate(p)?;
    let lambda_hat = s.lambda_hat.clone().unwrap_or_else(|| s.lambda.clone());
    let ax = p.constraint_residual(&s.x);
    let mut x = s.x.clone();
    for i in pdmm_selection(cfg, p.n_blocks(), s.k) {
        let xi_old = p.block_of(&s.x, i);
        let others = &ax - &p.blocks()[i].a * &xi_old;
        let eta = cfg.eta[i];
        let bregman = (eta > 0.0).then_some((eta, &cfg.bregman, &xi_old));
        let xi = p.block_argmin(i, &lambda_hat, &others, bregman)?;
        p.set_block(&mut x, i, &xi);
    }
    let scaled = p.constraint_residual(&x) * p.rho();
    let mut lambda = s.lambda.clone();
    let mut lambda_hat = Vector::zeros(p.m());
    for r in 0..p.m() {
        lambda[r] += cfg.tau[r] * scaled[r];
        lambda_hat[r] = lambda[r] - cfg.nu[r] * scaled[r];
    }
    Ok(SolverState {
        x,
        lambda,
        lambda_hat: Some(lambda_hat),
        k: s.k + 1,
    })
}

/// Inner solver for inexact primal updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    Gradient,
    Nesterov,
}

/// Inner tolerance at outer iteration `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToleranceSchedule {
    Fixed { tol: f64 },
    /// `c / (k + 1)^p`.
    Polynomial { c: f64, p: f64 },
}

impl ToleranceSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            ToleranceSchedule::Fixed { tol } => tol,
            ToleranceSchedule::Polynomial { c, p } => c / ((k + 1) as f64).powf(p),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ToleranceSchedule::Fixed { tol } => tol > 0.0,
            ToleranceSchedule::Polynomial { c, p } => c > 0.0 && p >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("inner tolerances must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InexactConfig {
    pub method: InnerMethod,
    pub schedule: ToleranceSchedule,
    pub max_inner: usize,
}

impl InexactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_inner == 0 {
            return Err(Error::InvalidParameter("at least one inner iteration is required".into()));
        }
        self.schedule.validate()
    }
}

/// Result of an inexact primal solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub iterations: usize,
    /// Whether the gradient norm reached the tolerance before the budget ran out.
    pub converged: bool,
}

/// Minimizes a smooth function from `x0` until `‖∇‖ ≤ tol` or `max_iter` steps.
///
/// `lipschitz` and `mu` are the curvature bounds used for the step size and
/// the Nesterov momentum.
pub(crate) fn inner_minimize<G>(
    grad: G,
    x0: &Vector,
    lipschitz: f64,
    mu: f64,
    method: InnerMethod,
    tol: f64,
    max_iter: usize,
) -> Result<(Vector, InnerOutcome)>
where
    G: FnMut(&Vector) -> Result<Vector>,
{
    projected_minimize(grad, Ok, x0, lipschitz, mu, method, tol, max_iter)
}

/// Projected gradient or Nesterov iterations onto a closed convex set.
///
/// Stops once the gradient mapping `L(x − P(x − ∇f(x)/L))` has norm at most
/// `tol`. `x0` must already be feasible.
#[allow(clippy::too_many_arguments)]
pub(crate) fn projected_minimize<G, P>(
    mut grad: G,
    mut project: P,
    x0: &Vector,
    lipschitz: f64,
    mu: f64,
    method: InnerMethod,
    tol: f64,
    max_iter: usize,
) -> Result<(Vector, InnerOutcome)>
where
    G: FnMut(&Vector) -> Result<Vector>,
    P: FnMut(Vector) -> Result<Vector>,
{
    let step = 1.0 / lipschitz;
    let mut x = x0.clone();
    let mut x_prev = x0.clone();
    let mut t = 1.0_f64;
    let strong = mu > 0.0 && mu.is_finite();
    let beta_strong = if strong {
        let (sl, sm) = (lipschitz.sqrt(), mu.sqrt());
        (sl - sm) / (sl + sm)
    } else {
        0.0
    };
    for it in 0..max_iter {
        let gx = grad(&x)?;
        let px = project(&x - &gx * step)?;
        if (&x - &px).norm() * lipschitz <= tol {
            return Ok((x, InnerOutcome { iterations: it, converged: true }));
        }
        let next = match method {
            InnerMethod::Gradient => px,
            InnerMethod::Nesterov => {
                let beta = if strong {
                    beta_strong
                } else {
                    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                    let b = (t - 1.0) / t_next;
                    t = t_next;
                    b
                };
                let y = &x + (&x - &x_prev) * beta;
                let g = grad(&y)?;
                project(y - g * step)?
            }
        };
        x_prev = std::mem::replace(&mut x, next);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: it, norm: f64::INFINITY });
        }
    }
    let gx = grad(&x)?;
    let converged = (&x - project(&x - &gx * step)?).norm() * lipschitz <= tol;
    Ok((x, InnerOutcome { iterations: max_iter, converged }))
}

/// Inexact primal minimization of `L(·, λ)` from the current iterate, then the dual step.
pub fn inexact_alm_step(
    p: &ProblemSpec,
    s: &SolverState,
    cfg: &InexactConfig,
) -> Result<(SolverState, InnerOutcome)> {
    p.check_state(&s.x, &s.lambda)?;
    cfg.validate()?;
    if p.blocks().iter().any(|b| !b.oracle.is_smooth()) || !p.ell_f().is_finite() {
        return Err(Error::Capability("inexact ALM needs smooth blocks".into()));
    }
    let lipschitz = p.lagrangian_lipschitz();
    let mu = p.mu_f() + p.rho() * min_eigenvalue(&p.ata).max(0.0);
    let (x, outcome) = inner_minimize(
        |x| p.grad_x_aug_lagrangian(x, &s.lambda),
        &s.x,
        lipschitz.max(f64::MIN_POSITIVE),
        mu,
        cfg.method,
        cfg.schedule.at(s.k),
        cfg.max_inner,
    )?;
    Ok((dual_step(p, s, x), outcome))
}

/// Method selector for [`run`].
#[derive(Debug, Clone, PartialEq)]
pub enum SaddleMethod {
    Alm,
    InexactAlm(InexactConfig),
    /// `None` uses [`ProblemSpec::default_ahu_step`].
    Ahu { alpha: Option<f64> },
    Admm,
    Jacobi,
    Pdmm(PdmmConfig),
}

impl SaddleMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SaddleMethod::Alm => "alm",
            SaddleMethod::InexactAlm(_) => "inexact_alm",
            SaddleMethod::Ahu { .. } => "ahu",
            SaddleMethod::Admm => "admm",
            SaddleMethod::Jacobi => "jacobi",
            SaddleMethod::Pdmm(_) => "pdmm",
        }
    }
}

pub const SADDLE_COLUMNS: [&str; 6] = [
    "k",
    "objective",
    "primal_residual",
    "dual_residual",
    "dual_value",
    "inner_iters",
];

#[derive(Debug, Clone)]
pub struct SaddleRun {
    pub state: SolverState,
    pub trace: Trace,
    /// KKT residual dropped to the tolerance.
    pub converged: bool,
    pub diverged: bool,
}

/// Applies `method` until the KKT residual is at most `tol` or `budget` steps ran.
///
/// Divergence (non-finite iterate or norm above [`DIVERGENCE_NORM`]) stops the
/// run and raises a trace flag instead of an error.
pub fn run(
    p: &ProblemSpec,
    method: &SaddleMethod,
    init: SolverState,
    budget: usize,
    tol: f64,
) -> Result<SaddleRun> {
    p.check_state(&init.x, &init.lambda)?;
    let alpha = match method {
        SaddleMethod::Ahu { alpha } => alpha.unwrap_or_else(|| p.default_ahu_step()),
        _ => 0.0,
    };
    let mut trace = Trace::new(&SADDLE_COLUMNS);
    let mut state = init;
    let mut converged = false;
    let mut diverged = false;
    let mut unmet = 0usize;
    for _ in 0..budget {
        let (next, inner) = match method {
            SaddleMethod::Alm => (alm_step(p, &state)?, 0),
            SaddleMethod::InexactAlm(cfg) => {
                let (next, outcome) = inexact_alm_step(p, &state, cfg)?;
                if !outcome.converged {
                    unmet += 1;
                }
                (next, outcome.iterations)
            }
            SaddleMethod::Ahu { .. } => (ahu_step(p, &state, alpha)?, 0),
            SaddleMethod::Admm => (admm_step(p, &state)?, 0),
            SaddleMethod::Jacobi => (jacobi_step(p, &state)?, 0),
            SaddleMethod::Pdmm(cfg) => (pdmm_step(p, &state, cfg)?, 0),
        };
        state = next;
        if !state.is_finite() || state.norm() > DIVERGENCE_NORM {
            diverged = true;
            trace.flag(format!("{} diverged at iteration {}", method.name(), state.k));
            break;
        }
        let (primal, dual) = p.kkt_parts(&state.x, &state.lambda)?;
        let dual_value = dual_function_value(p, &state.lambda).unwrap_or(f64::NAN);
        trace.push(vec![
            state.k as f64,
            p.objective(&state.x)?,
            primal,
            dual,
            dual_value,
            inner as f64,
        ])?;
        if primal + dual <= tol {
            converged = true;
            break;
        }
    }
    if unmet > 0 {
        trace.flag(format!("inner tolerance unmet in {unmet} outer iterations"));
    }
    Ok(SaddleRun {
        state,
        trace,
        converged,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn scalar_problem(rho: f64) -> ProblemSpec {
        let f = FunctionOracle::quadratic(Matrix::identity(1, 1), v(&[0.0])).unwrap();
        ProblemSpec::new(vec![Block::new(f, Matrix::identity(1, 1))], rho).unwrap()
    }

    fn two_var_problem(q: &[f64], rho: f64) -> ProblemSpec {
        let f = FunctionOracle::quadratic(Matrix::identity(2, 2), v(q)).unwrap();
        ProblemSpec::new(vec![Block::new(f, Matrix::from_row_slice(1, 2, &[1.0, 1.0]))], rho).unwrap()
    }

    /// Dense KKT solve of `[Q Aᵀ; A 0] (x, λ) = (-q, 0)` by LU.
    fn kkt_reference(p: &ProblemSpec) -> (Vector, Vector) {
        let (n, m) = (p.n(), p.m());
        let mut kkt = Matrix::zeros(n + m, n + m);
        let mut rhs = Vector::zeros(n + m);
        for (i, b) in p.blocks().iter().enumerate() {
            let (q, qv) = b.oracle.quadratic_parts().unwrap();
            let r = p.block_range(i);
            kkt.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&q);
            rhs.rows_mut(r.start, r.len()).copy_from(&-qv);
        }
        kkt.view_mut((0, n), (n, m)).copy_from(&p.a().transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(p.a());
        let sol = kkt.lu().solve(&rhs).unwrap();
        (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
    }

    fn random_quadratic_problem(rng: &mut ChaCha8Rng, dims: &[usize], m: usize, rho: f64) -> ProblemSpec {
        let blocks = dims
            .iter()
            .map(|&d| {
                let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let q = &b * b.transpose() + Matrix::identity(d, d) * 0.5;
                let qv = Vector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
                let a = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                Block::new(FunctionOracle::quadratic(q, qv).unwrap(), a)
            })
            .collect();
        ProblemSpec::new(blocks, rho).unwrap()
    }

    #[test]
    fn aug_lagrangian_examples() {
        let p = scalar_problem(1.0);
        assert_eq!(p.aug_lagrangian(&v(&[1.0]), &v(&[1.0])).unwrap(), 2.0);
        let p0 = scalar_problem(0.0);
        assert_eq!(p0.aug_lagrangian(&v(&[1.5]), &v(&[0.0])).unwrap(), 0.5 * 1.5 * 1.5);
        // Feasible point: both coupling terms vanish.
        let p = two_var_problem(&[1.0, -1.0], 3.0);
        let x = v(&[2.0, -2.0]);
        assert_eq!(p.aug_lagrangian(&x, &v(&[5.0])).unwrap(), p.objective(&x).unwrap());
        assert!(matches!(p.aug_lagrangian(&v(&[1.0]), &v(&[0.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn alm_step_examples() {
        let p = two_var_problem(&[1.0, -1.0], 1.0);
        let s = alm_step(&p, &SolverState::zeros(&p)).unwrap();
        let (x_ref, _) = kkt_reference(&p);
        assert!((&s.x - v(&[-1.0, 1.0])).amax() < 1e-14);
        assert!((&s.x - &x_ref).amax() < 1e-14);
        assert!(s.lambda.amax() < 1e-14);

        let p = two_var_problem(&[0.0, 0.0], 1.0);
        let s = alm_step(&p, &SolverState::zeros(&p)).unwrap();
        assert_eq!(s.x, Vector::zeros(2));
        assert_eq!(s.lambda, Vector::zeros(1));

        // No coupling: λ unchanged, x the unconstrained minimizer.
        let f = FunctionOracle::quadratic(Matrix::identity(2, 2) * 2.0, v(&[1.0, -4.0])).unwrap();
        let p = ProblemSpec::new(vec![Block::new(f, Matrix::zeros(1, 2))], 1.0).unwrap();
        let s0 = SolverState::new(v(&[3.0, 3.0]), v(&[0.7]));
        let s = alm_step(&p, &s0).unwrap();
        assert_eq!(s.lambda, v(&[0.7]));
        assert!((&s.x - v(&[-0.5, 2.0])).amax() < 1e-15);
    }

    #[test]
    fn alm_needs_exact_argmin() {
        let f = FunctionOracle::sine_quadratic(Matrix::identity(1, 1), v(&[0.0]), 0.1, 1.0).unwrap();
        let p = ProblemSpec::new(vec![Block::new(f, Matrix::identity(1, 1))], 1.0).unwrap();
        assert!(matches!(alm_step(&p, &SolverState::zeros(&p)), Err(Error::Capability(_))));
    }

    #[test]
    fn prox_point_dual_examples() {
        let p = scalar_problem(1.0);
        assert!((prox_point_dual_step(&p, &v(&[2.0])).unwrap()[0] - 1.0).abs() < 1e-15);
        assert_eq!(prox_point_dual_step(&p, &v(&[0.0])).unwrap()[0], 0.0);
        let lin = ProblemSpec::new(
            vec![Block::new(FunctionOracle::linear(v(&[1.0])), Matrix::identity(1, 1))],
            1.0,
        )
        .unwrap();
        assert!(matches!(prox_point_dual_step(&lin, &v(&[0.0])), Err(Error::Capability(_))));
    }

    #[test]
    fn alm_dual_sequence_is_proximal_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_quadratic_problem(&mut rng, &[3, 2, 4], 2, 0.8);
        let mut s = SolverState::zeros(&p);
        let mut mu = Vector::zeros(2);
        for _ in 0..50 {
            s = alm_step(&p, &s).unwrap();
            mu = prox_point_dual_step(&p, &mu).unwrap();
            assert!((&s.lambda - &mu).amax() <= 1e-8);
        }
    }

    #[test]
    fn dual_function_examples() {
        let p = scalar_problem(1.0);
        assert!((dual_function_value(&p, &v(&[2.0])).unwrap() + 2.0).abs() < 1e-15);
        let p = two_var_problem(&[1.0, -1.0], 1.0);
        // λ = 0: the unconstrained minimum of f, −½‖q‖² = −1.
        assert!((dual_function_value(&p, &v(&[0.0])).unwrap() + 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_quadratic_problem(&mut rng, &[2, 3], 2, 1.0);
        for _ in 0..50 {
            let a = Vector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            let b = Vector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            let mid = dual_function_value(&p, &((&a + &b) * 0.5)).unwrap();
            let avg = 0.5 * (dual_function_value(&p, &a).unwrap() + dual_function_value(&p, &b).unwrap());
            assert!(mid >= avg - 1e-10);
        }
    }

    #[test]
    fn alm_is_dual_ascent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = random_quadratic_problem(&mut rng, &[2, 2, 3], 3, 2.0);
            let mut s = SolverState::zeros(&p);
            let mut prev = dual_function_value(&p, &s.lambda).unwrap();
            for _ in 0..30 {
                s = alm_step(&p, &s).unwrap();
                let cur = dual_function_value(&p, &s.lambda).unwrap();
                assert!(cur >= prev - 1e-10);
                prev = cur;
            }
        }
    }

    #[test]
    fn ahu_step_examples() {
        let p = scalar_problem(1.0);
        let s = ahu_step(&p, &SolverState::new(v(&[1.0]), v(&[0.0])), 0.1).unwrap();
        assert!((s.x[0] - 0.8).abs() < 1e-15 && (s.lambda[0] - 0.8).abs() < 1e-15);

        let s0 = SolverState::new(v(&[0.4]), v(&[0.3]));
        let s = ahu_step(&p, &s0, 0.0).unwrap();
        assert_eq!(s.x, s0.x);
        assert!((s.lambda[0] - 0.7).abs() < 1e-15);

        let p = two_var_problem(&[1.0, -1.0], 1.0);
        let (xs, ls) = kkt_reference(&p);
        let s = ahu_step(&p, &SolverState::new(xs.clone(), ls.clone()), 0.2).unwrap();
        assert!((&s.x - &xs).amax() < 1e-14 && (&s.lambda - &ls).amax() < 1e-14);

        let nonsmooth = FunctionOracle::piecewise(1, 0.0, vec![(1.0, 0.0), (-1.0, 0.0)], None).unwrap();
        let p = ProblemSpec::new(vec![Block::new(nonsmooth, Matrix::identity(1, 1))], 1.0).unwrap();
        assert!(matches!(ahu_step(&p, &SolverState::zeros(&p), 0.1), Err(Error::Capability(_))));
    }

    #[test]
    fn admm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_quadratic_problem(&mut rng, &[3, 2], 2, 1.0);
        let (xs, ls) = kkt_reference(&p);
        let r = run(&p, &SaddleMethod::Admm, SolverState::zeros(&p), 5000, 1e-12).unwrap();
        assert!(r.converged);
        assert!((&r.state.x - &xs).amax() <= 1e-8 && (&r.state.lambda - &ls).amax() <= 1e-8);

        let s = admm_step(&p, &SolverState::new(xs.clone(), ls.clone())).unwrap();
        assert!((&s.x - &xs).amax() < 1e-12 && (&s.lambda - &ls).amax() < 1e-12);

        // Consensus-style second block: A₂ = −I, f₂ = 0.
        let f1 = FunctionOracle::quadratic(Matrix::identity(2, 2), v(&[1.0, 2.0])).unwrap();
        let a1 = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let p = ProblemSpec::new(
            vec![Block::new(f1, a1.clone()), Block::new(FunctionOracle::zero(2), -Matrix::identity(2, 2))],
            2.0,
        )
        .unwrap();
        let s0 = SolverState::new(v(&[0.1, 0.2, 0.3, 0.4]), v(&[0.5, -1.0]));
        let s = admm_step(&p, &s0).unwrap();
        let x1 = p.block_of(&s.x, 0);
        let expected = &a1 * x1 + &s0.lambda / 2.0;
        assert!((p.block_of(&s.x, 1) - expected).amax() < 1e-14);

        let three = random_quadratic_problem(&mut rng, &[1, 1, 1], 1, 1.0);
        assert!(matches!(admm_step(&three, &SolverState::zeros(&three)), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn jacobi_with_one_block_is_alm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_quadratic_problem(&mut rng, &[4], 2, 1.3);
        let mut a = SolverState::zeros(&p);
        let mut b = a.clone();
        for _ in 0..20 {
            a = alm_step(&p, &a).unwrap();
            b = jacobi_step(&p, &b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn jacobi_matches_alm_when_decoupled() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Block-diagonal A: each block owns its own constraint rows.
        let f1 = FunctionOracle::quadratic(Matrix::identity(2, 2) * 2.0, v(&[1.0, 0.0])).unwrap();
        let f2 = FunctionOracle::quadratic(Matrix::identity(1, 1), v(&[-1.0])).unwrap();
        let a1 = Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
        let a2 = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let p = ProblemSpec::new(vec![Block::new(f1, a1), Block::new(f2, a2)], 1.5).unwrap();
        let mut s = SolverState::new(
            Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
            Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
        );
        for _ in 0..10 {
            let a = alm_step(&p, &s).unwrap();
            let b = jacobi_step(&p, &s).unwrap();
            assert!((&a.x - &b.x).amax() < 1e-14 && (&a.lambda - &b.lambda).amax() < 1e-14);
            s = a;
        }
    }

    #[test]
    fn jacobi_diverges_on_coupled_blocks() {
        let f = |q: f64| FunctionOracle::quadratic(Matrix::identity(1, 1) * q, v(&[1.0])).unwrap();
        let one = Matrix::identity(1, 1);
        let p = ProblemSpec::new(vec![Block::new(f(0.1), one.clone()), Block::new(f(0.1), one)], 1.0).unwrap();
        let radius = crate::linalg::spectral_radius(&jacobi_iteration_matrix(&p).unwrap());
        assert!(radius > 1.0, "spectral radius {radius}");
        let r = run(&p, &SaddleMethod::Jacobi, SolverState::zeros(&p), 200, 1e-10).unwrap();
        assert!(r.diverged && r.trace.is_flagged());
    }

    #[test]
    fn pdmm_converges_where_jacobi_diverges() {
        let f = |q: f64| FunctionOracle::quadratic(Matrix::identity(1, 1) * q, v(&[1.0])).unwrap();
        let one = Matrix::identity(1, 1);
        let p = ProblemSpec::new(vec![Block::new(f(0.1), one.clone()), Block::new(f(0.1), one)], 1.0).unwrap();
        let cfg = PdmmConfig::uniform(&p, 2, 0.5, 0);
        assert_eq!(cfg.tau, vec![0.5]);
        let r = run(&p, &SaddleMethod::Pdmm(cfg), SolverState::zeros(&p), 2000, 1e-6).unwrap();
        assert!(r.converged && !r.diverged);
        assert!(r.trace.len() <= 2000);
        let reference = crate::reference::solve_saddle(&p).unwrap();
        assert!((&r.state.x - &reference.x).amax() < 1e-5);
    }

    #[test]
    fn pdmm_degenerates_to_alm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_quadratic_problem(&mut rng, &[3], 2, 1.0);
        let cfg = PdmmConfig {
            blocks_per_iter: 1,
            tau: vec![1.0; 2],
            nu: vec![0.0; 2],
            eta: vec![0.0],
            bregman: Bregman::Euclidean,
            seed: 0,
        };
        let mut a = SolverState::zeros(&p);
        let mut b = a.clone();
        for _ in 0..10 {
            a = alm_step(&p, &a).unwrap();
            b = pdmm_step(&p, &b, &cfg).unwrap();
            assert!((&a.x - &b.x).amax() < 1e-14 && (&a.lambda - &b.lambda).amax() < 1e-14);
            // ν = 0: the forwarded dual equals the dual.
            assert_eq!(b.lambda_hat.as_ref().unwrap(), &b.lambda);
        }
    }

    #[test]
    fn pdmm_large_bregman_weight_freezes_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_quadratic_problem(&mut rng, &[2, 2], 1, 1.0);
        let mut cfg = PdmmConfig::uniform(&p, 2, 1e12, 3);
        cfg.tau = vec![0.5];
        let s0 = SolverState::new(v(&[0.3, -0.2, 1.0, 0.5]), v(&[0.1]));
        let s = pdmm_step(&p, &s0, &cfg).unwrap();
        assert!((&s.x - &s0.x).amax() < 1e-10);
    }

    #[test]
    fn pdmm_rejects_bad_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random_quadratic_problem(&mut rng, &[1, 1], 1, 1.0);
        let s = SolverState::zeros(&p);
        let cfg = PdmmConfig::uniform(&p, 3, 1.0, 0);
        assert!(matches!(pdmm_step(&p, &s, &cfg), Err(Error::InvalidParameter(_))));
        let mut cfg = PdmmConfig::uniform(&p, 1, 1.0, 0);
        cfg.bregman = Bregman::Quadratic(vec![-Matrix::identity(1, 1), Matrix::identity(1, 1)]);
        assert!(matches!(pdmm_step(&p, &s, &cfg), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn pdmm_selection_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = random_quadratic_problem(&mut rng, &[1; 6], 1, 1.0);
        let cfg = PdmmConfig::uniform(&p, 3, 1.0, 99);
        let a: Vec<_> = (0..50).map(|k| pdmm_selection(&cfg, 6, k)).collect();
        let b: Vec<_> = (0..50).map(|k| pdmm_selection(&cfg, 6, k)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() == 3 && s.windows(2).all(|w| w[0] < w[1])));
        let first: Vec<_> = a.iter().map(|s| s[0]).collect();
        assert!(first.iter().any(|&i| i != first[0]), "selection never varies");
    }

    #[test]
    fn pdmm_quadratic_bregman_matches_euclidean_special_case() {
        // B = ½(u−v)ᵀ(2I)(u−v) equals the Euclidean ‖u−v‖².
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = random_quadratic_problem(&mut rng, &[2, 3], 2, 1.0);
        let eu = PdmmConfig::uniform(&p, 2, 0.7, 1);
        let mut quad = eu.clone();
        quad.bregman = Bregman::Quadratic(vec![Matrix::identity(2, 2) * 2.0, Matrix::identity(3, 3) * 2.0]);
        let s0 = SolverState::new(Vector::from_element(5, 0.3), v(&[0.2, -0.1]));
        let a = pdmm_step(&p, &s0, &eu).unwrap();
        let b = pdmm_step(&p, &s0, &quad).unwrap();
        assert!((&a.x - &b.x).amax() < 1e-12);
    }

    #[test]
    fn inexact_alm_tight_tolerance_tracks_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_quadratic_problem(&mut rng, &[2, 2], 1, 1.0);
        let cfg = InexactConfig {
            method: InnerMethod::Gradient,
            schedule: ToleranceSchedule::Fixed { tol: 1e-12 },
            max_inner: 100_000,
        };
        let mut exact = SolverState::zeros(&p);
        let mut inexact = exact.clone();
        for _ in 0..20 {
            exact = alm_step(&p, &exact).unwrap();
            let (next, outcome) = inexact_alm_step(&p, &inexact, &cfg).unwrap();
            assert!(outcome.converged);
            inexact = next;
            assert!((&exact.x - &inexact.x).amax() <= 1e-8);
            assert!((&exact.lambda - &inexact.lambda).amax() <= 1e-8);
        }
    }

    #[test]
    fn inexact_alm_with_decaying_tolerance_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let p = random_quadratic_problem(&mut rng, &[2, 3], 2, 1.0);
        let (xs, ls) = kkt_reference(&p);
        for method in [InnerMethod::Gradient, InnerMethod::Nesterov] {
            let cfg = InexactConfig {
                method,
                schedule: ToleranceSchedule::Polynomial { c: 1.0, p: 2.0 },
                max_inner: 10_000,
            };
            let r = run(&p, &SaddleMethod::InexactAlm(cfg), SolverState::zeros(&p), 200, 0.0).unwrap();
            assert!((&r.state.x - &xs).amax() <= 1e-4, "{method:?}");
            assert!((&r.state.lambda - &ls).amax() <= 1e-4, "{method:?}");
        }
    }

    #[test]
    fn polynomial_schedule_is_nonincreasing() {
        let s = ToleranceSchedule::Polynomial { c: 1.0, p: 2.0 };
        let vals: Vec<_> = (0..100).map(|k| s.at(k)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(vals[0], 1.0);
        assert_eq!(vals[1], 0.25);
    }

    #[test]
    fn inner_budget_exhaustion_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = random_quadratic_problem(&mut rng, &[3], 1, 1.0);
        let cfg = InexactConfig {
            method: InnerMethod::Gradient,
            schedule: ToleranceSchedule::Fixed { tol: 1e-14 },
            max_inner: 1,
        };
        let r = run(&p, &SaddleMethod::InexactAlm(cfg), SolverState::zeros(&p), 3, 0.0).unwrap();
        assert!(r.trace.is_flagged());
        assert_eq!(r.trace.len(), 3);
    }

    #[test]
    fn solvers_reach_kkt_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p = random_quadratic_problem(&mut rng, &[2, 3], 2, 1.0);
        for method in [SaddleMethod::Alm, SaddleMethod::Admm, SaddleMethod::Ahu { alpha: None }] {
            let r = run(&p, &method, SolverState::zeros(&p), 20_000, 1e-6).unwrap();
            assert!(r.converged, "{} did not converge", method.name());
        }
    }
}

//! Objective blocks: value, gradient, proximal map and shifted exact minimization.
//!
//! Every [`FunctionOracle`] carries a positive `scale` so that weighted blocks
//! such as `p_i · F_i` share the parameters of `F_i`. The declared constants
//! `mu` (strong convexity) and `ell` (gradient Lipschitz) always refer to the
//! scaled function.

use nalgebra::Cholesky;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{asymmetry, max_eigenvalue, min_eigenvalue, Matrix, Vector};

/// Central finite-difference step used by gradient checks.
pub const FD_STEP: f64 = 1e-6;

const PSD_TOL: f64 = 1e-10;

/// How a nonsmooth piecewise-linear term picks a subgradient at a kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubgradientRule {
    /// Largest slope among the active pieces.
    MaxSlope,
    /// Smallest slope among the active pieces.
    MinSlope,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleKind {
    /// `½ xᵀQx + qᵀx + constant`.
    Quadratic { q_mat: Matrix, q_vec: Vector, constant: f64 },
    /// `cᵀx + constant`.
    Linear { c: Vector, constant: f64 },
    /// Mean logistic loss over rows of `features` plus `(l2/2)‖x‖²`.
    Logistic { features: Matrix, labels: Vector, l2: f64 },
    /// `Σ_k [ ½·quad·x_k² + max_j (slope_j·x_k + intercept_j) ]`.
    PiecewiseQuadratic {
        dim: usize,
        quad: f64,
        pieces: Vec<(f64, f64)>,
        rule: Option<SubgradientRule>,
    },
    /// Nonconvex test function `½ xᵀQx + qᵀx + amplitude · Σ_k sin(frequency · x_k)`.
    SineQuadratic {
        q_mat: Matrix,
        q_vec: Vector,
        amplitude: f64,
        frequency: f64,
    },
}

/// An objective block with declared curvature constants.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionOracle {
    kind: OracleKind,
    dim: usize,
    scale: f64,
    mu: f64,
    ell: f64,
}

impl FunctionOracle {
    /// Quadratic with symmetric positive semidefinite `Q`.
    pub fn quadratic(q_mat: Matrix, q_vec: Vector) -> Result<Self> {
        Self::quadratic_with_constant(q_mat, q_vec, 0.0)
    }

    pub fn quadratic_with_constant(q_mat: Matrix, q_vec: Vector, constant: f64) -> Result<Self> {
        let dim = q_vec.len();
        check_dim("quadratic Q rows", dim, q_mat.nrows())?;
        check_dim("quadratic Q cols", dim, q_mat.ncols())?;
        if asymmetry(&q_mat) > PSD_TOL {
            return Err(Error::InvalidParameter("quadratic Q is not symmetric".into()));
        }
        let (mu, ell) = if dim == 0 {
            (0.0, 0.0)
        } else {
            (min_eigenvalue(&q_mat), max_eigenvalue(&q_mat))
        };
        if mu < -PSD_TOL {
            return Err(Error::InvalidParameter(format!(
                "quadratic Q is not positive semidefinite (λ_min = {mu:e})"
            )));
        }
        Ok(Self {
            kind: OracleKind::Quadratic { q_mat, q_vec, constant },
            dim,
            scale: 1.0,
            mu: mu.max(0.0),
            ell,
        })
    }

    /// `½‖x - center‖²` scaled by `weight`; handy for tests and simulators.
    pub fn centered_quadratic(center: &Vector, weight: f64) -> Self {
        let d = center.len();
        Self::quadratic_with_constant(
            Matrix::identity(d, d) * weight,
            -center * weight,
            0.5 * weight * center.norm_squared(),
        )
        .expect("weighted identity is positive semidefinite")
    }

    pub fn linear(c: Vector) -> Self {
        Self::linear_with_constant(c, 0.0)
    }

    pub fn linear_with_constant(c: Vector, constant: f64) -> Self {
        let dim = c.len();
        Self {
            kind: OracleKind::Linear { c, constant },
            dim,
            scale: 1.0,
            mu: 0.0,
            ell: 0.0,
        }
    }

    /// The zero function on `R^dim`.
    pub fn zero(dim: usize) -> Self {
        Self::linear(Vector::zeros(dim))
    }

    /// Logistic regression loss; labels must be ±1.
    pub fn logistic(features: Matrix, labels: Vector, l2: f64) -> Result<Self> {
        check_dim("logistic labels", features.nrows(), labels.len())?;
        if features.nrows() == 0 {
            return Err(Error::InvalidParameter("logistic loss needs at least one sample".into()));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidParameter("logistic labels must be -1 or +1".into()));
        }
        if l2 < 0.0 {
            return Err(Error::InvalidParameter("l2 coefficient must be nonnegative".into()));
        }
        let m = features.nrows() as f64;
        let gram = features.transpose() * &features;
        let ell = max_eigenvalue(&gram) / (4.0 * m) + l2;
        let dim = features.ncols();
        Ok(Self {
            kind: OracleKind::Logistic { features, labels, l2 },
            dim,
            scale: 1.0,
            mu: l2,
            ell,
        })
    }

    /// Separable piecewise-linear-plus-quadratic function.
    pub fn piecewise(
        dim: usize,
        quad: f64,
        pieces: Vec<(f64, f64)>,
        rule: Option<SubgradientRule>,
    ) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidParameter("piecewise function needs at least one piece".into()));
        }
        if quad < 0.0 {
            return Err(Error::InvalidParameter("quadratic coefficient must be nonnegative".into()));
        }
        let ell = if pieces.len() == 1 { quad } else { f64::INFINITY };
        Ok(Self {
            kind: OracleKind::PiecewiseQuadratic { dim, quad, pieces, rule },
            dim,
            scale: 1.0,
            mu: quad,
            ell,
        })
    }

    /// Smooth nonconvex block used to exercise nonconvex code paths.
    pub fn sine_quadratic(q_mat: Matrix, q_vec: Vector, amplitude: f64, frequency: f64) -> Result<Self> {
        let base = Self::quadratic(q_mat, q_vec)?;
        let OracleKind::Quadratic { q_mat, q_vec, .. } = base.kind else {
            unreachable!()
        };
        let ell = base.ell + amplitude.abs() * frequency * frequency;
        Ok(Self {
            kind: OracleKind::SineQuadratic { q_mat, q_vec, amplitude, frequency },
            dim: base.dim,
            scale: 1.0,
            mu: 0.0,
            ell,
        })
    }

    /// The same function multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale factor {factor} must be positive")));
        }
        let mut out = self.clone();
        out.scale *= factor;
        out.mu *= factor;
        out.ell *= factor;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &OracleKind {
        &self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Strong convexity constant (0 when not strongly convex or nonconvex).
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Gradient Lipschitz constant, infinite for nonsmooth kinds.
    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Condition number `ell / mu` when both are finite and `mu > 0`.
    pub fn condition_number(&self) -> Option<f64> {
        (self.mu > 0.0 && self.ell.is_finite()).then(|| self.ell / self.mu)
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self.kind, OracleKind::SineQuadratic { .. })
    }

    pub fn is_smooth(&self) -> bool {
        match &self.kind {
            OracleKind::PiecewiseQuadratic { pieces, rule, .. } => pieces.len() == 1 || rule.is_some(),
            _ => true,
        }
    }

    /// Scaled `(Q, q)` if the function is quadratic or linear.
    pub fn quadratic_parts(&self) -> Option<(Matrix, Vector)> {
        match &self.kind {
            OracleKind::Quadratic { q_mat, q_vec, .. } => Some((q_mat * self.scale, q_vec * self.scale)),
            OracleKind::Linear { c, .. } => Some((Matrix::zeros(self.dim, self.dim), c * self.scale)),
            _ => None,
        }
    }

    pub fn eval(&self, x: &Vector) -> Result<f64> {
        check_dim("oracle eval", self.dim, x.len())?;
        let base = match &self.kind {
            OracleKind::Quadratic { q_mat, q_vec, constant } => {
                0.5 * x.dot(&(q_mat * x)) + q_vec.dot(x) + constant
            }
            OracleKind::Linear { c, constant } => c.dot(x) + constant,
            OracleKind::Logistic { features, labels, l2 } => {
                let margins = features * x;
                let m = labels.len() as f64;
                let loss: f64 = margins
                    .iter()
                    .zip(labels.iter())
                    .map(|(z, y)| softplus(-y * z))
                    .sum();
                loss / m + 0.5 * l2 * x.norm_squared()
            }
            OracleKind::PiecewiseQuadratic { quad, pieces, .. } => x
                .iter()
                .map(|&t| 0.5 * quad * t * t + max_piece(pieces, t))
                .sum(),
            OracleKind::SineQuadratic { q_mat, q_vec, amplitude, frequency } => {
                0.5 * x.dot(&(q_mat * x))
                    + q_vec.dot(x)
                    + amplitude * x.iter().map(|t| (frequency * t).sin()).sum::<f64>()
            }
        };
        Ok(self.scale * base)
    }

    pub fn grad(&self, x: &Vector) -> Result<Vector> {
        check_dim("oracle grad", self.dim, x.len())?;
        let base = match &self.kind {
            OracleKind::Quadratic { q_mat, q_vec, .. } => q_mat * x + q_vec,
            OracleKind::Linear { c, .. } => c.clone(),
            OracleKind::Logistic { features, labels, l2 } => {
                let margins = features * x;
                let m = labels.len() as f64;
                let weights = Vector::from_iterator(
                    labels.len(),
                    margins
                        .iter()
                        .zip(labels.iter())
                        .map(|(z, y)| -y * sigmoid(-y * z) / m),
                );
                features.transpose() * weights + x * *l2
            }
            OracleKind::PiecewiseQuadratic { quad, pieces, rule, .. } => {
                let rule = match (pieces.len(), rule) {
                    (1, _) => SubgradientRule::MaxSlope,
                    (_, Some(r)) => *r,
                    (_, None) => {
                        return Err(Error::Capability(
                            "piecewise-linear function has no subgradient selection rule".into(),
                        ))
                    }
                };
                x.map(|t| quad * t + select_slope(pieces, t, rule))
            }
            OracleKind::SineQuadratic { q_mat, q_vec, amplitude, frequency } => {
                q_mat * x + q_vec + x.map(|t| amplitude * frequency * (frequency * t).cos())
            }
        };
        Ok(base * self.scale)
    }

    /// Hessian for twice-differentiable kinds.
    pub fn hessian(&self, x: &Vector) -> Result<Matrix> {
        check_dim("oracle hessian", self.dim, x.len())?;
        let d = self.dim;
        let base = match &self.kind {
            OracleKind::Quadratic { q_mat, .. } => q_mat.clone(),
            OracleKind::Linear { .. } => Matrix::zeros(d, d),
            OracleKind::Logistic { features, labels, l2 } => {
                let margins = features * x;
                let m = labels.len() as f64;
                let mut h = Matrix::identity(d, d) * *l2;
                for (row, z) in features.row_iter().zip(margins.iter()) {
                    let s = sigmoid(*z);
                    h += row.transpose() * row * (s * (1.0 - s) / m);
                }
                h
            }
            OracleKind::SineQuadratic { q_mat, amplitude, frequency, .. } => {
                let mut h = q_mat.clone();
                for k in 0..d {
                    h[(k, k)] -= amplitude * frequency * frequency * (frequency * x[k]).sin();
                }
                h
            }
            OracleKind::PiecewiseQuadratic { .. } => {
                return Err(Error::Capability("piecewise-linear function has no Hessian".into()))
            }
        };
        Ok(base * self.scale)
    }

    /// `argmin_x f(x) + (1/(2·step))‖x − v‖²`.
    pub fn prox(&self, v: &Vector, step: f64) -> Result<Vector> {
        check_dim("oracle prox", self.dim, v.len())?;
        if !(step > 0.0) {
            return Err(Error::InvalidParameter(format!("prox step {step} must be positive")));
        }
        let inv = 1.0 / step;
        let h = Matrix::identity(self.dim, self.dim) * inv;
        self.argmin_shifted(&(-v * inv), &h)
    }

    /// Exact minimizer of `f(x) + aᵀx + ½ xᵀHx`.
    pub fn argmin_shifted(&self, a: &Vector, h: &Matrix) -> Result<Vector> {
        check_dim("argmin_shifted linear term", self.dim, a.len())?;
        check_dim("argmin_shifted H rows", self.dim, h.nrows())?;
        check_dim("argmin_shifted H cols", self.dim, h.ncols())?;
        let s = self.scale;
        match &self.kind {
            OracleKind::Quadratic { q_mat, q_vec, .. } => {
                solve_pd(q_mat * s + h, -(q_vec * s + a))
            }
            OracleKind::Linear { c, .. } => solve_pd(h.clone(), -(c * s + a)),
            OracleKind::Logistic { .. } => self.newton_shifted(a, h),
            OracleKind::PiecewiseQuadratic { quad, pieces, .. } => {
                let off_diag = (0..self.dim)
                    .flat_map(|i| (0..self.dim).map(move |j| (i, j)))
                    .filter(|(i, j)| i != j)
                    .any(|(i, j)| h[(i, j)] != 0.0);
                if off_diag {
                    return Err(Error::Capability(
                        "piecewise argmin requires a diagonal quadratic term".into(),
                    ));
                }
                let mut out = Vector::zeros(self.dim);
                for k in 0..self.dim {
                    out[k] = argmin_piecewise_1d(s * quad + h[(k, k)], a[k], s, pieces).ok_or_else(
                        || Error::Capability("shifted piecewise problem is unbounded below".into()),
                    )?;
                }
                Ok(out)
            }
            OracleKind::SineQuadratic { .. } => Err(Error::Capability(
                "no exact minimizer for a nonconvex block".into(),
            )),
        }
    }

    fn newton_shifted(&self, a: &Vector, h: &Matrix) -> Result<Vector> {
        let objective = |x: &Vector| -> Result<f64> {
            Ok(self.eval(x)? + a.dot(x) + 0.5 * x.dot(&(h * x)))
        };
        let mut x = Vector::zeros(self.dim);
        for _ in 0..100 {
            let g = self.grad(&x)? + a + h * &x;
            if g.amax() <= 1e-13 {
                return Ok(x);
            }
            let hess = self.hessian(&x)? + h;
            let dir = solve_pd(hess, -&g)?;
            let f0 = objective(&x)?;
            let slope = g.dot(&dir);
            let full = &x + &dir;
            let full_g = self.grad(&full)? + a + h * &full;
            if full_g.norm() <= 0.5 * g.norm() {
                x = full;
                continue;
            }
            let mut t = 1.0;
            loop {
                let cand = &x + &dir * t;
                if objective(&cand)? <= f0 + 1e-4 * t * slope || t < 1e-12 {
                    x = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        Ok(x)
    }
}

fn solve_pd(m: Matrix, rhs: Vector) -> Result<Vector> {
    Cholesky::new(m)
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Capability("shifted problem is not strictly convex".into()))
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn max_piece(pieces: &[(f64, f64)], t: f64) -> f64 {
    pieces
        .iter()
        .map(|(s, b)| s * t + b)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn select_slope(pieces: &[(f64, f64)], t: f64, rule: SubgradientRule) -> f64 {
    let top = max_piece(pieces, t);
    let tol = 1e-12 * (1.0 + top.abs());
    let active = pieces.iter().filter(|(s, b)| top - (s * t + b) <= tol).map(|p| p.0);
    match rule {
        SubgradientRule::MaxSlope => active.fold(f64::NEG_INFINITY, f64::max),
        SubgradientRule::MinSlope => active.fold(f64::INFINITY, f64::min),
    }
}

/// Minimizes `½·curv·t² + lin·t + scale·max_j(s_j t + b_j)` over the reals.
///
/// The objective is convex and piecewise quadratic, so its minimizer is either
/// a stationary point inside one piece or a kink between two pieces.
fn argmin_piecewise_1d(curv: f64, lin: f64, scale: f64, pieces: &[(f64, f64)]) -> Option<f64> {
    let obj = |t: f64| 0.5 * curv * t * t + lin * t + scale * max_piece(pieces, t);
    let mut candidates = Vec::new();
    if curv > 0.0 {
        for &(slope, _) in pieces {
            candidates.push(-(lin + scale * slope) / curv);
        }
    } else {
        // Bounded only if the slopes of the max straddle -lin/scale.
        let smin = pieces.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let smax = pieces.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        if !(lin + scale * smin <= 0.0 && lin + scale * smax >= 0.0) {
            return None;
        }
    }
    for (i, &(s1, b1)) in pieces.iter().enumerate() {
        for &(s2, b2) in &pieces[i + 1..] {
            if s1 != s2 {
                candidates.push((b2 - b1) / (s1 - s2));
            }
        }
    }
    candidates
        .into_iter()
        .filter(|t| t.is_finite())
        .min_by(|a, b| obj(*a).total_cmp(&obj(*b)))
}

/// Central finite-difference gradient with step [`FD_STEP`].
pub fn finite_difference_grad(o: &FunctionOracle, x: &Vector) -> Result<Vector> {
    let mut g = Vector::zeros(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += FD_STEP;
        xm[k] -= FD_STEP;
        g[k] = (o.eval(&xp)? - o.eval(&xm)?) / (2.0 * FD_STEP);
    }
    Ok(g)
}

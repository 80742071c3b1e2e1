//! Centralized reference solutions used as independent oracles.
//!
//! Equality-constrained quadratics go through a dense KKT solve; other smooth
//! convex problems through a Nesterov gradient loop run to a gradient norm of
//! [`REFERENCE_TOL`]. Duals are always the minimum-norm solution.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::oracle::FunctionOracle;
use crate::saddle::{inner_minimize, InnerMethod, ProblemSpec};

pub const REFERENCE_TOL: f64 = 1e-10;
/// Hard iteration budget for the gradient-based reference.
pub const REFERENCE_BUDGET: usize = 2_000_000;

/// Singular values below this (relative to the largest) are treated as zero.
const PINV_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x: Vector,
    /// Minimum-norm multiplier.
    pub dual: Vector,
    pub objective: f64,
}

pub(crate) fn pinv_solve(m: &Matrix, b: &Vector) -> Result<Vector> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vector::zeros(m.ncols()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * PINV_RTOL).max(f64::MIN_POSITIVE);
    svd.solve(b, eps)
        .map_err(|e| Error::NotConverged(format!("pseudo-inverse solve failed: {e}")))
}

pub(crate) fn pinv(m: &Matrix) -> Result<Matrix> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Matrix::zeros(m.ncols(), m.nrows()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.pseudo_inverse((smax * PINV_RTOL).max(f64::MIN_POSITIVE))
        .map_err(|e| Error::NotConverged(format!("pseudo-inverse failed: {e}")))
}

/// Solves `minimize Σ f_i(x_i) subject to Ax = 0`.
pub fn solve_saddle(p: &ProblemSpec) -> Result<Reference> {
    let (n, m) = (p.n(), p.m());
    let quad: Option<Vec<_>> = p.blocks().iter().map(|b| b.oracle.quadratic_parts()).collect();
    if let Some(parts) = quad {
        let mut kkt = Matrix::zeros(n + m, n + m);
        let mut rhs = Vector::zeros(n + m);
        for (i, (q, qv)) in parts.iter().enumerate() {
            let r = p.block_range(i);
            kkt.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(q);
            rhs.rows_mut(r.start, r.len()).copy_from(&-qv);
        }
        kkt.view_mut((0, n), (n, m)).copy_from(&p.a().transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(p.a());
        let sol = pinv_solve(&kkt, &rhs)?;
        let x = sol.rows(0, n).into_owned();
        let dual = sol.rows(n, m).into_owned();
        let residual = p.kkt_residual(&x, &dual)?;
        if !(residual <= 1e-8 * (1.0 + rhs.norm())) {
            return Err(Error::NotConverged(format!(
                "KKT system has no solution (residual {residual:e}); objective unbounded"
            )));
        }
        let objective = p.objective(&x)?;
        return Ok(Reference { x, dual, objective });
    }
    if p.blocks().iter().any(|b| !b.oracle.is_smooth() || !b.oracle.is_convex()) {
        return Err(Error::Capability("reference solve needs smooth convex blocks".into()));
    }
    // Minimize f(Px) with P the projector onto null(A); iterates stay in range(P).
    let a_pinv = pinv(p.a())?;
    let proj = Matrix::identity(n, n) - &a_pinv * p.a();
    let (x, outcome) = inner_minimize(
        |z| Ok(&proj * p.grad_f(&(&proj * z))?),
        &Vector::zeros(n),
        p.ell_f().max(f64::MIN_POSITIVE),
        p.mu_f(),
        InnerMethod::Nesterov,
        REFERENCE_TOL,
        REFERENCE_BUDGET,
    )?;
    if !outcome.converged {
        return Err(Error::NotConverged("reference gradient loop hit its budget".into()));
    }
    let x = &proj * x;
    let dual = -a_pinv.transpose() * p.grad_f(&x)?;
    let objective = p.objective(&x)?;
    Ok(Reference { x, dual, objective })
}

/// Minimizer `z*` and value of `Σ_i f_i(z)` over a shared variable.
pub fn solve_sum(oracles: &[FunctionOracle]) -> Result<(Vector, f64)> {
    let Some(first) = oracles.first() else {
        return Err(Error::InvalidParameter("sum of zero functions".into()));
    };
    let d = first.dim();
    for o in oracles {
        crate::error::check_dim("summand dimension", d, o.dim())?;
    }
    let eval = |z: &Vector| -> Result<f64> { oracles.iter().map(|o| o.eval(z)).sum() };
    let quad: Option<Vec<_>> = oracles.iter().map(|o| o.quadratic_parts()).collect();
    if let Some(parts) = quad {
        let mut h = Matrix::zeros(d, d);
        let mut g = Vector::zeros(d);
        for (q, qv) in parts {
            h += q;
            g += qv;
        }
        let z = h
            .cholesky()
            .ok_or_else(|| Error::Capability("sum of quadratics is not strictly convex".into()))?
            .solve(&-g);
        let value = eval(&z)?;
        return Ok((z, value));
    }
    if oracles.iter().any(|o| !o.is_smooth() || !o.is_convex()) {
        return Err(Error::Capability("reference solve needs smooth convex summands".into()));
    }
    let ell: f64 = oracles.iter().map(|o| o.ell()).sum();
    let mu: f64 = oracles.iter().map(|o| o.mu()).sum();
    let grad = |z: &Vector| -> Result<Vector> {
        let mut g = Vector::zeros(d);
        for o in oracles {
            g += o.grad(z)?;
        }
        Ok(g)
    };
    let (z, outcome) = inner_minimize(
        grad,
        &Vector::zeros(d),
        ell.max(f64::MIN_POSITIVE),
        mu,
        InnerMethod::Nesterov,
        REFERENCE_TOL,
        REFERENCE_BUDGET,
    )?;
    if !outcome.converged {
        return Err(Error::NotConverged("reference gradient loop hit its budget".into()));
    }
    let value = eval(&z)?;
    Ok((z, value))
}

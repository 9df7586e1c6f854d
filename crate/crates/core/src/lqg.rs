//! Infinite-horizon LQR synthesis by Riccati value iteration, and the
//! state-feedback control law shared by the plant loop and both estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mathkit::{spectral_radius, sym_eigen, SymMatrix};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Quadratic cost weights; both must be positive definite.
#[derive(Debug, Clone)]
pub struct LqrWeights {
    pub q: SymMatrix,
    pub r: SymMatrix,
}

impl LqrWeights {
    pub fn new(q: SymMatrix, r: SymMatrix) -> Result<Self> {
        if !q.is_pd(1e-12) {
            return Err(Error::Numerical("Q must be positive definite".into()));
        }
        if !r.is_pd(1e-12) {
            return Err(Error::Numerical("R must be positive definite".into()));
        }
        Ok(LqrWeights { q, r })
    }
}

/// Converged Riccati fixed point and the associated gain.
#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub v: SymMatrix,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Value-iterate `V <- Q + A'VA - A'VB (R + B'VB)^{-1} B'VA` from `V_0 = I`
/// and return `K = -(R + B'VB)^{-1} B'VA`. The closed loop `A + BK` is
/// checked to be strictly stable.
pub fn solve_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    weights: &LqrWeights,
    tol: f64,
    max_iter: usize,
) -> Result<LqrSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || weights.q.dim() != n || weights.r.dim() != b.ncols() {
        return Err(Error::Dimension("lqr operand shapes disagree".into()));
    }
    if tol <= 0.0 {
        return Err(Error::Domain("lqr tolerance must be positive".into()));
    }
    let q = weights.q.as_matrix();
    let r = weights.r.as_matrix();
    let at = a.transpose();
    let bt = b.transpose();
    let mut v = DMatrix::identity(n, n);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=max_iter {
        let m = r + &bt * &v * b;
        let m_inv = m.clone().try_inverse().ok_or_else(|| {
            Error::Numerical("R + B'VB became singular during value iteration".into())
        })?;
        let avb = &at * &v * b;
        let next = q + &at * &v * a - &avb * &m_inv * avb.transpose();
        let next = (&next + next.transpose()) * 0.5;
        residual = (&next - &v).amax();
        v = next;
        iterations = it;
        if v.amax() > 1e12 {
            return Err(Error::NonConvergence(
                "value iteration is growing unboundedly; pair is likely not stabilizable".into(),
            ));
        }
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NonConvergence(format!(
            "lqr value iteration residual {residual:.3e} after {max_iter} iterations"
        )));
    }
    let m = r + &bt * &v * b;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::Numerical("R + B'VB singular at the fixed point".into()))?;
    let k = -(&m_inv * &bt * &v * a);
    let rho = spectral_radius(&(a + b * &k));
    if rho >= 1.0 {
        return Err(Error::Numerical(format!(
            "closed loop is not stable: spectral radius {rho:.6}"
        )));
    }
    let v = SymMatrix::new(v)?;
    if sym_eigen(&v).min() <= 0.0 {
        return Err(Error::Numerical("Riccati fixed point is not positive definite".into()));
    }
    Ok(LqrSolution {
        v,
        k,
        iterations,
        residual,
    })
}

/// `u = K x_est`. The controller consumes the accepted message, never the
/// true state.
pub fn control_law(k: &DMatrix<f64>, x_est: &DVector<f64>) -> DVector<f64> {
    k * x_est
}

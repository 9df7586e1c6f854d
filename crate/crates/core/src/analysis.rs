//! Post-run metrics: empirical quadratic costs, the closed-form loss bound
//! with its eigenvalue coefficients, and MSE summaries.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mathkit::{chi_square_cdf, sym_eigen, SymMatrix};
use crate::runner::RunRecord;

/// Empirical costs of a matched pair of runs.
#[derive(Debug, Clone, Copy)]
pub struct CostReport {
    pub j0: f64,
    pub j1: f64,
    pub delta_j: f64,
    pub steps: usize,
    pub burn_in: usize,
}

impl CostReport {
    pub fn new(j0: f64, j1: f64, steps: usize, burn_in: usize) -> Self {
        CostReport {
            j0,
            j1,
            delta_j: j1 - j0,
            steps,
            burn_in,
        }
    }
}

/// Per-step average quadratic cost `x'Qx + u'Ru` over the post-burn-in
/// window, with `u` the input the controller actually applied.
pub fn empirical_cost(
    records: &[RunRecord],
    q: &SymMatrix,
    r: &SymMatrix,
    burn_in: usize,
) -> Result<f64> {
    if records.len() <= burn_in {
        return Err(Error::Domain(format!(
            "cost window is empty: {} records, burn-in {burn_in}",
            records.len()
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for rec in &records[burn_in..] {
        let xq = (rec.x.transpose() * q.as_matrix() * &rec.x)[0];
        let ur = (rec.u.transpose() * r.as_matrix() * &rec.u)[0];
        acc += xq + ur;
        count += 1;
    }
    Ok(acc / count as f64)
}

/// The loss bound and its ingredients.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub alpha0: f64,
    pub alpha1: f64,
    pub bound: f64,
    pub r_k: SymMatrix,
    pub g: SymMatrix,
    pub lam_max_sigma_phi: f64,
    pub tr_p_hat: f64,
    pub tr_p_tilde: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub dof: u32,
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "loss bound report")?;
        writeln!(f, "  alpha0 = {:.9e}", self.alpha0)?;
        writeln!(f, "  alpha1 = {:.9e}", self.alpha1)?;
        writeln!(f, "  tr(P_hat*)  = {:.9e}", self.tr_p_hat)?;
        writeln!(f, "  tr(P_twin*) = {:.9e}", self.tr_p_tilde)?;
        writeln!(f, "  lambda_max(sigma_phi) = {:.9e}", self.lam_max_sigma_phi)?;
        writeln!(f, "  rho1 = {:.6}, rho2 = {:.6}, dof = {}", self.rho1, self.rho2, self.dof)?;
        writeln!(f, "  bound on delta J = {:.9e}", self.bound)
    }
}

/// Evaluate the printed loss bound:
/// `alpha1 tr(P_twin*) - alpha0 tr(P_hat*)
///  + alpha1 rho1 lambda_max(sigma_phi) F(rho1, n)
///  + alpha1 rho2 lambda_max(sigma_phi) (1 - F(rho1, n))`
/// with `R_K = K'RK`, `G = Q + R_K`,
/// `alpha0 = lmin(R_K)(lmin(G) - lmin(R_K)) / lmin(G)` and
/// `alpha1 = lmax(R_K)(lmax(R_K) + 2 lmax(G)) / lmax(G)`.
#[allow(clippy::too_many_arguments)]
pub fn theorem2_bound(
    p_hat_star: &SymMatrix,
    p_tilde_star: &SymMatrix,
    sigma_phi: &SymMatrix,
    q: &SymMatrix,
    r: &SymMatrix,
    k: &DMatrix<f64>,
    rho1: f64,
    rho2: f64,
    dof: u32,
) -> Result<BoundReport> {
    let r_k = SymMatrix::new(k.transpose() * r.as_matrix() * k)?;
    let g = SymMatrix::new(q.as_matrix() + r_k.as_matrix())?;
    let e_rk = sym_eigen(&r_k);
    let e_g = sym_eigen(&g);
    // clamp tiny negative roundoff on the PSD product K'RK
    let lmin_rk = e_rk.min().max(0.0);
    let lmax_rk = e_rk.max().max(0.0);
    let alpha0 = if e_g.min() > 0.0 {
        lmin_rk * (e_g.min() - lmin_rk) / e_g.min()
    } else {
        0.0
    };
    let alpha1 = if e_g.max() > 0.0 {
        lmax_rk * (lmax_rk + 2.0 * e_g.max()) / e_g.max()
    } else {
        0.0
    };
    let lam_max_sigma_phi = sym_eigen(sigma_phi).max();
    let f1 = chi_square_cdf(rho1, dof)?;
    let bound = alpha1 * p_tilde_star.trace() - alpha0 * p_hat_star.trace()
        + alpha1 * rho1 * lam_max_sigma_phi * f1
        + alpha1 * rho2 * lam_max_sigma_phi * (1.0 - f1);
    Ok(BoundReport {
        alpha0,
        alpha1,
        bound,
        r_k,
        g,
        lam_max_sigma_phi,
        tr_p_hat: p_hat_star.trace(),
        tr_p_tilde: p_tilde_star.trace(),
        rho1,
        rho2,
        dof,
    })
}

/// Per-step squared errors of the three state reconstructions against the
/// true state, plus windowed averages.
#[derive(Debug, Clone)]
pub struct MseSeries {
    /// `(k, ||x_hat - x||^2, ||x_twin - x||^2, ||m - x||^2)`
    pub per_step: Vec<(usize, f64, f64, f64)>,
    /// window-averaged triples `(window_end_k, hat, twin, msg)`
    pub windows: Vec<(usize, f64, f64, f64)>,
}

impl MseSeries {
    /// Post-burn-in means `(hat, twin, msg)`.
    pub fn means(&self, burn_in: usize) -> Result<(f64, f64, f64)> {
        if self.per_step.len() <= burn_in {
            return Err(Error::Domain("mse window is empty".into()));
        }
        let tail = &self.per_step[burn_in..];
        let n = tail.len() as f64;
        let mut h = 0.0;
        let mut t = 0.0;
        let mut m = 0.0;
        for &(_, a, b, c) in tail {
            h += a;
            t += b;
            m += c;
        }
        Ok((h / n, t / n, m / n))
    }
}

/// Compute the MSE series with the given averaging window length.
pub fn mse_series(records: &[RunRecord], window: usize) -> Result<MseSeries> {
    if records.is_empty() {
        return Err(Error::Domain("mse_series needs at least one record".into()));
    }
    let window = window.max(1);
    let per_step: Vec<(usize, f64, f64, f64)> = records
        .iter()
        .map(|r| {
            (
                r.k,
                (&r.x_hat - &r.x).norm_squared(),
                (&r.x_twin - &r.x).norm_squared(),
                (&r.m - &r.x).norm_squared(),
            )
        })
        .collect();
    let mut windows = Vec::new();
    for chunk in per_step.chunks(window) {
        let n = chunk.len() as f64;
        let end_k = chunk.last().unwrap().0;
        let (mut h, mut t, mut m) = (0.0, 0.0, 0.0);
        for &(_, a, b, c) in chunk {
            h += a;
            t += b;
            m += c;
        }
        windows.push((end_k, h / n, t / n, m / n));
    }
    Ok(MseSeries { per_step, windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Tier;
    use crate::sge::ReceiverAction;
    use nalgebra::DVector;

    fn record(k: usize, x: &[f64], u: &[f64]) -> RunRecord {
        RunRecord {
            k,
            x: DVector::from_row_slice(x),
            x_hat: DVector::zeros(x.len()),
            x_twin: DVector::zeros(x.len()),
            m: DVector::zeros(x.len()),
            u: DVector::from_row_slice(u),
            chi2: 0.0,
            q: Tier::Qualified,
            pi0: 0.8,
            action: ReceiverAction::Accept,
            u_sender: 0.0,
            u_receiver: 0.0,
        }
    }

    #[test]
    fn zero_trajectory_costs_nothing() {
        let recs: Vec<RunRecord> = (0..10).map(|k| record(k, &[0.0, 0.0], &[0.0])).collect();
        let c = empirical_cost(
            &recs,
            &SymMatrix::identity(2),
            &SymMatrix::identity(1),
            0,
        )
        .unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn single_step_unit_state() {
        let recs = vec![record(0, &[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0])];
        let c = empirical_cost(
            &recs,
            &SymMatrix::identity(4),
            &SymMatrix::identity(2),
            0,
        )
        .unwrap();
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_window_errors() {
        let recs = vec![record(0, &[1.0], &[0.0])];
        assert!(empirical_cost(&recs, &SymMatrix::identity(1), &SymMatrix::identity(1), 1).is_err());
    }

    #[test]
    fn cost_invariant_under_order_permutation() {
        let mut recs: Vec<RunRecord> = (0..20)
            .map(|k| record(k, &[k as f64 * 0.1, 1.0], &[0.5]))
            .collect();
        let q = SymMatrix::identity(2);
        let r = SymMatrix::identity(1);
        let before = empirical_cost(&recs, &q, &r, 5).unwrap();
        recs[5..].reverse();
        let after = empirical_cost(&recs, &q, &r, 5).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn zero_gain_collapses_bound() {
        let rep = theorem2_bound(
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(1),
            &DMatrix::zeros(1, 2),
            9.49,
            18.47,
            2,
        )
        .unwrap();
        assert_eq!(rep.alpha0, 0.0);
        assert_eq!(rep.alpha1, 0.0);
        assert_eq!(rep.bound, 0.0);
    }

    #[test]
    fn scalar_bound_matches_direct_arithmetic() {
        // scalar system: every eigenvalue is the entry itself
        let k = DMatrix::from_element(1, 1, -0.5);
        let q = SymMatrix::identity(1);
        let r = SymMatrix::identity(1);
        let p_hat = SymMatrix::new(DMatrix::from_element(1, 1, 0.2)).unwrap();
        let p_tilde = SymMatrix::new(DMatrix::from_element(1, 1, 0.4)).unwrap();
        let sigma = SymMatrix::new(DMatrix::from_element(1, 1, 0.3)).unwrap();
        let (rho1, rho2, dof) = (2.0, 5.0, 1);
        let rep = theorem2_bound(&p_hat, &p_tilde, &sigma, &q, &r, &k, rho1, rho2, dof).unwrap();
        let r_k = 0.25;
        let g = 1.25;
        let alpha0 = r_k * (g - r_k) / g;
        let alpha1 = r_k * (r_k + 2.0 * g) / g;
        let f1 = chi_square_cdf(rho1, dof).unwrap();
        let want = alpha1 * 0.4 - alpha0 * 0.2
            + alpha1 * rho1 * 0.3 * f1
            + alpha1 * rho2 * 0.3 * (1.0 - f1);
        assert!((rep.alpha0 - alpha0).abs() < 1e-12);
        assert!((rep.alpha1 - alpha1).abs() < 1e-12);
        assert!((rep.bound - want).abs() < 1e-12);
    }

    #[test]
    fn bound_coefficients_reproducible_from_stored_matrices() {
        let k = DMatrix::from_row_slice(1, 2, &[-0.4, 0.7]);
        let rep = theorem2_bound(
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(1),
            &k,
            2.0,
            6.0,
            2,
        )
        .unwrap();
        let e_rk = sym_eigen(&rep.r_k);
        let e_g = sym_eigen(&rep.g);
        let a0 = e_rk.min().max(0.0) * (e_g.min() - e_rk.min().max(0.0)) / e_g.min();
        let a1 = e_rk.max() * (e_rk.max() + 2.0 * e_g.max()) / e_g.max();
        assert!((a0 - rep.alpha0).abs() < 1e-12);
        assert!((a1 - rep.alpha1).abs() < 1e-12);
    }

    #[test]
    fn mse_zero_when_message_is_truth() {
        let mut recs: Vec<RunRecord> = (0..6).map(|k| record(k, &[1.0, 2.0], &[0.0])).collect();
        for r in &mut recs {
            r.m = r.x.clone();
        }
        let s = mse_series(&recs, 3).unwrap();
        for &(_, _, _, msg) in &s.per_step {
            assert_eq!(msg, 0.0);
        }
        assert_eq!(s.windows.len(), 2);
    }

    #[test]
    fn mse_empty_errors() {
        assert!(mse_series(&[], 10).is_err());
    }
}

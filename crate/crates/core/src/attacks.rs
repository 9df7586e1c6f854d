//! Message-producing senders: benign (forwards the Kalman estimate), naive
//! deviation (constant bias, ignores the detector), and the stealthy
//! attacker that maximizes displacement over a chi-square ellipsoid around
//! the twin estimate.

use nalgebra::DVector;

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::estimation::ResidualModel;
use crate::mathkit::{chi_square_cdf, RngStream};

/// Which boundary the stealthy sender plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StealthyMode {
    /// Always the inner `rho1` boundary; every message scores qualified.
    InnerRho1,
    /// The equilibrium mixture: the `rho1` boundary with probability
    /// `F(rho1, n)`, otherwise the outer boundary of the `(rho1, rho2]`
    /// band.
    BandedRho1Rho2,
}

/// Sender taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub enum SenderKind {
    Benign,
    Naive { bias: DVector<f64> },
    Stealthy { mode: StealthyMode },
}

impl SenderKind {
    pub fn is_malicious(&self) -> bool {
        !matches!(self, SenderKind::Benign)
    }
}

/// Constrained maximization instance: maximize `||m - objective_center||^2`
/// over the boundary `(m - center)' sigma_phi^{-1} (m - center) = radius2`.
pub struct EllipsoidProblem<'a> {
    pub center: DVector<f64>,
    pub residual: &'a ResidualModel,
    pub radius2: f64,
    pub objective_center: DVector<f64>,
}

const BOUNDARY_BACKOFF: f64 = 1e-9;
const SECULAR_TOL: f64 = 1e-10;
const SECULAR_MAX_BISECT: usize = 200;

/// Global maximizer of a convex quadratic over the ellipsoid boundary,
/// solved in whitened coordinates by a 1-D secular search over the Lagrange
/// multiplier. The returned point is backed off the boundary by a relative
/// `1e-9` in the chi-square metric so detector-side classification of the
/// constructed message is immune to roundoff.
pub fn solve_ellipsoid_argmax(p: &EllipsoidProblem<'_>) -> Result<DVector<f64>> {
    let n = p.residual.dim();
    if p.center.len() != n || p.objective_center.len() != n {
        return Err(Error::Dimension("ellipsoid operands disagree with residual dim".into()));
    }
    if p.radius2 <= 0.0 {
        return Err(Error::Domain(format!(
            "ellipsoid radius^2 must be positive, got {}",
            p.radius2
        )));
    }
    let eig = p.residual.eigen();
    let lam = &eig.eigenvalues; // descending
    let lam_max = lam[0];
    let g = &p.objective_center - &p.center;
    // b_i = sqrt(lam_i) * (E' g)_i
    let ghat = eig.eigenvectors.transpose() * &g;
    let b = DVector::from_fn(n, |i, _| lam[i].sqrt() * ghat[i]);
    let tot: f64 = b.iter().map(|x| x * x).sum();

    let y_hat: DVector<f64>;
    if tot <= 0.0 {
        // all boundary points tie; deterministic direction along the top
        // eigenvector with positive first nonzero component
        y_hat = top_direction(eig, n) * p.radius2.sqrt();
    } else {
        let s = |nu: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let d = lam[i] - nu;
                    b[i] * b[i] / (d * d)
                })
                .sum()
        };
        let scale = lam_max.abs().max(1.0);
        let lo0 = lam_max + 1e-13 * scale;
        if s(lo0) <= p.radius2 {
            // hard case: multiplier sits at lam_max; fill the remaining
            // radius along the top eigendirection
            let mut y = DVector::zeros(n);
            let mut used = 0.0;
            for i in 0..n {
                if lam_max - lam[i] > 1e-12 * scale {
                    y[i] = b[i] / (lam[i] - lam_max);
                    used += y[i] * y[i];
                }
            }
            let t = (p.radius2 - used).max(0.0).sqrt();
            y += top_direction(eig, n) * t;
            y_hat = y;
        } else {
            let mut lo = lo0;
            let mut hi = lam_max + (tot / p.radius2).sqrt() + 1e-13 * scale;
            let mut grow = 0;
            while s(hi) > p.radius2 {
                hi = lam_max + 2.0 * (hi - lam_max);
                grow += 1;
                if grow > 80 {
                    return Err(Error::NonConvergence("secular bracket failed to close".into()));
                }
            }
            let mut nu = 0.5 * (lo + hi);
            for _ in 0..SECULAR_MAX_BISECT {
                let val = s(nu);
                if (val - p.radius2).abs() <= SECULAR_TOL * p.radius2 {
                    break;
                }
                if val > p.radius2 {
                    lo = nu;
                } else {
                    hi = nu;
                }
                nu = 0.5 * (lo + hi);
            }
            y_hat = DVector::from_fn(n, |i, _| b[i] / (lam[i] - nu));
        }
    }
    // map back: m = center + Sigma^{1/2} E y_hat
    let y = &eig.eigenvectors * y_hat;
    let m = &p.center + p.residual.sqrt_factor() * y;
    // exact rescale in the detector's own metric, backed off the boundary
    let chi2 = p.residual.mahalanobis2(&m, &p.center);
    if chi2 <= 0.0 {
        return Err(Error::Numerical("ellipsoid solution collapsed onto the center".into()));
    }
    let target = p.radius2 * (1.0 - BOUNDARY_BACKOFF);
    let scaled = &p.center + (&m - &p.center) * (target / chi2).sqrt();
    Ok(scaled)
}

fn top_direction(eig: &crate::mathkit::EigenDecomp, n: usize) -> DVector<f64> {
    // whitened top eigendirection is e_0 in eigen coordinates; orient the
    // corresponding state-space eigenvector to have a positive first
    // nonzero component
    let v = eig.eigenvectors.column(0);
    let mut sign = 1.0;
    for i in 0..n {
        if v[i].abs() > 1e-12 {
            if v[i] < 0.0 {
                sign = -1.0;
            }
            break;
        }
    }
    let mut dir = DVector::zeros(n);
    dir[0] = sign;
    dir
}

/// Runtime assertion from the displacement lemma:
/// `rho * lambda_max(sigma_phi) >= ||x_twin - xi||^2` for every valid
/// boundary solution (small relative slack for roundoff).
pub fn lemma_bound_check(
    xi: &DVector<f64>,
    x_twin: &DVector<f64>,
    residual: &ResidualModel,
    rho: f64,
) -> bool {
    let lhs = rho * residual.lambda_max();
    let rhs = (x_twin - xi).norm_squared();
    rhs <= lhs * (1.0 + 1e-9) + 1e-300
}

/// Produce the message for step `k`. The stealthy variants require a
/// calibrated residual model and the detector thresholds.
pub fn produce_message(
    kind: &SenderKind,
    x_hat: &DVector<f64>,
    x_twin: &DVector<f64>,
    residual: Option<&ResidualModel>,
    cfg: Option<&DetectorConfig>,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    match kind {
        SenderKind::Benign => Ok(x_hat.clone()),
        SenderKind::Naive { bias } => {
            if bias.len() != x_hat.len() {
                return Err(Error::Dimension("naive bias length must match the state".into()));
            }
            Ok(x_hat + bias)
        }
        SenderKind::Stealthy { mode } => {
            let residual = residual.ok_or_else(|| {
                Error::Numerical("stealthy sender requires a calibrated residual model".into())
            })?;
            let cfg = cfg.ok_or_else(|| {
                Error::Numerical("stealthy sender requires detector thresholds".into())
            })?;
            let rho = match mode {
                StealthyMode::InnerRho1 => cfg.rho1,
                StealthyMode::BandedRho1Rho2 => {
                    let f1 = chi_square_cdf(cfg.rho1, cfg.dof)?;
                    if rng.uniform() < f1 {
                        cfg.rho1
                    } else {
                        cfg.rho2
                    }
                }
            };
            let problem = EllipsoidProblem {
                center: x_twin.clone(),
                residual,
                radius2: rho,
                objective_center: x_hat.clone(),
            };
            let xi = solve_ellipsoid_argmax(&problem)?;
            debug_assert!(lemma_bound_check(&xi, x_twin, residual, rho));
            Ok(xi)
        }
    }
}

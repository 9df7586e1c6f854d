//! Three-tier chi-square detector running in the digital twin: scores a
//! message against the twin estimate and maps the statistic to a verdict
//! tier `q` in `{0 qualified, 1 unqualified, 2 detrimental}`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimation::ResidualModel;
use crate::mathkit::chi_square_quantile;

/// Verdict tier. Boundary semantics are closed/half-open exactly as the
/// detection function is printed: `q=0` iff `chi2 <= rho1`, `q=1` iff
/// `chi2 in (rho1, rho2]`, `q=2` iff `chi2 > rho2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Qualified = 0,
    Unqualified = 1,
    Detrimental = 2,
}

impl Tier {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorVerdict {
    pub chi2: f64,
    pub q: Tier,
}

/// Thresholds, degrees of freedom, and the calibrated residual model.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub rho1: f64,
    pub rho2: f64,
    pub dof: u32,
    pub residual: ResidualModel,
}

impl DetectorConfig {
    pub fn new(rho1: f64, rho2: f64, dof: u32, residual: ResidualModel) -> Result<Self> {
        if !(rho2 > rho1 && rho1 > 0.0) {
            return Err(Error::Domain(format!(
                "thresholds must satisfy rho2 > rho1 > 0, got rho1={rho1}, rho2={rho2}"
            )));
        }
        if dof < 1 {
            return Err(Error::Domain("detector dof must be >= 1".into()));
        }
        Ok(DetectorConfig {
            rho1,
            rho2,
            dof,
            residual,
        })
    }
}

/// `(x_twin - m)' sigma_phi^{-1} (x_twin - m)`; zero iff the message equals
/// the twin estimate.
pub fn chi2_statistic(x_twin: &DVector<f64>, m: &DVector<f64>, residual: &ResidualModel) -> f64 {
    residual.mahalanobis2(x_twin, m)
}

/// Total classification of a statistic into a tier.
pub fn classify(chi2: f64, cfg: &DetectorConfig) -> DetectorVerdict {
    let q = if chi2 <= cfg.rho1 {
        Tier::Qualified
    } else if chi2 <= cfg.rho2 {
        Tier::Unqualified
    } else {
        Tier::Detrimental
    };
    DetectorVerdict { chi2, q }
}

/// Derive `(rho1, rho2)` from confidence levels via the chi-square quantile.
pub fn thresholds_from_confidence(p1: f64, p2: f64, dof: u32) -> Result<(f64, f64)> {
    if !(0.0 < p1 && p1 < p2 && p2 < 1.0) {
        return Err(Error::Domain(format!(
            "confidence levels must satisfy 0 < p1 < p2 < 1, got p1={p1}, p2={p2}"
        )));
    }
    Ok((
        chi_square_quantile(p1, dof)?,
        chi_square_quantile(p2, dof)?,
    ))
}

//! The two Kalman-style estimators (physical filter on `y`, digital-twin
//! filter on `z`), their steady-state covariances, and the residual model
//! `phi = x_twin - x_hat ~ N(0, sigma_phi)` consumed by the detector.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lqg::control_law;
use crate::mathkit::{
    solve_discrete_lyapunov, spectral_radius, sym_eigen, EigenDecomp, GaussianSampler, RngStream,
    SymMatrix,
};
use crate::plant::PlantModel;

/// One-step-delayed predictor filter in the exact form printed in the source
/// model: estimate update `x <- A_K x + L(obs - Obs x)` with
/// `L = A_K P Obs' (S_n + Obs P Obs')^{-1}` and covariance recursion
/// `P <- S_w + (A_K - L Obs) P A_K'`. The covariance is propagated in the
/// algebraically equal Joseph form to stay PSD under roundoff.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    pub a_k: DMatrix<f64>,
    pub obs: DMatrix<f64>,
    pub sigma_noise: SymMatrix,
    pub sigma_w: SymMatrix,
    pub gain: DMatrix<f64>,
    pub p: SymMatrix,
    pub x_est: DVector<f64>,
}

/// Converged covariance recursion artifacts.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub p: SymMatrix,
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl KalmanFilter {
    /// Initialize with `P_0 = sigma_x` and `x_0 = 0`.
    pub fn new(
        a_k: DMatrix<f64>,
        obs: DMatrix<f64>,
        sigma_noise: SymMatrix,
        sigma_w: SymMatrix,
        sigma_x: SymMatrix,
    ) -> Result<Self> {
        let n = a_k.nrows();
        if !a_k.is_square() || obs.ncols() != n || sigma_noise.dim() != obs.nrows()
            || sigma_w.dim() != n || sigma_x.dim() != n
        {
            return Err(Error::Dimension("kalman filter operand shapes disagree".into()));
        }
        Ok(KalmanFilter {
            gain: DMatrix::zeros(n, obs.nrows()),
            x_est: DVector::zeros(n),
            a_k,
            obs,
            sigma_noise,
            sigma_w,
            p: sigma_x,
        })
    }

    fn gain_for(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let s = self.sigma_noise.as_matrix() + &self.obs * p * self.obs.transpose();
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
        Ok(&self.a_k * p * self.obs.transpose() * s_inv)
    }

    fn covariance_update(&self, p: &DMatrix<f64>, gain: &DMatrix<f64>) -> DMatrix<f64> {
        // Joseph form: (A_K - L Obs) P (A_K - L Obs)' + L S_n L' + S_w,
        // equal to S_w + (A_K - L Obs) P A_K' at the computed gain.
        let closed = &self.a_k - gain * &self.obs;
        let p_next = &closed * p * closed.transpose()
            + gain * self.sigma_noise.as_matrix() * gain.transpose()
            + self.sigma_w.as_matrix();
        (&p_next + p_next.transpose()) * 0.5
    }

    /// Consume one observation: update the estimate with the gain computed
    /// from the current covariance, then advance the covariance.
    pub fn filter_step(&mut self, obs: &DVector<f64>) -> Result<()> {
        if obs.len() != self.obs.nrows() {
            return Err(Error::Dimension(format!(
                "observation has len {}, expected {}",
                obs.len(),
                self.obs.nrows()
            )));
        }
        let gain = self.gain_for(self.p.as_matrix())?;
        self.x_est = &self.a_k * &self.x_est + &gain * (obs - &self.obs * &self.x_est);
        let p_next = self.covariance_update(self.p.as_matrix(), &gain);
        self.p = SymMatrix::new(p_next)?;
        self.gain = gain;
        Ok(())
    }

    /// Pure prediction with a frozen gain (used by tests and the L = 0 case).
    pub fn predict_only(&mut self) {
        self.x_est = &self.a_k * &self.x_est;
    }

    /// Iterate the gain/covariance recursion to its fixed point.
    pub fn steady_state(&self, tol: f64, max_iter: usize) -> Result<SteadyState> {
        let mut p = self.p.as_matrix().clone();
        let mut gain = self.gain.clone();
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        for it in 1..=max_iter {
            gain = self.gain_for(&p)?;
            let next = self.covariance_update(&p, &gain);
            residual = (&next - &p).amax();
            p = next;
            iterations = it;
            if residual <= tol {
                break;
            }
        }
        if residual > tol {
            return Err(Error::NonConvergence(format!(
                "covariance recursion residual {residual:.3e} after {max_iter} iterations"
            )));
        }
        Ok(SteadyState {
            p: SymMatrix::new(p)?,
            gain,
            iterations,
            residual,
        })
    }

    /// Spec-facing wrapper returning only the converged covariance.
    pub fn steady_state_covariance(&self, tol: f64, max_iter: usize) -> Result<SymMatrix> {
        Ok(self.steady_state(tol, max_iter)?.p)
    }
}

/// Build the physical filter (observes `y` through `C`).
pub fn physical_filter(model: &PlantModel, k: &DMatrix<f64>) -> Result<KalmanFilter> {
    let a_k = &model.a + &model.b * k;
    KalmanFilter::new(
        a_k,
        model.c.clone(),
        model.sigma_v.clone(),
        model.sigma_w.clone(),
        model.sigma_x.clone(),
    )
}

/// Build the twin filter (observes `z` through `D`).
pub fn twin_filter(model: &PlantModel, k: &DMatrix<f64>) -> Result<KalmanFilter> {
    let a_k = &model.a + &model.b * k;
    KalmanFilter::new(
        a_k,
        model.d.clone(),
        model.sigma_d.clone(),
        model.sigma_w.clone(),
        model.sigma_x.clone(),
    )
}

/// How a residual covariance was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSource {
    Analytic,
    MonteCarlo,
}

impl ResidualSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidualSource::Analytic => "analytic",
            ResidualSource::MonteCarlo => "monte_carlo",
        }
    }
}

/// Calibrated residual covariance with its cached inverse and
/// eigendecomposition (used for whitening by the attack solver).
#[derive(Debug, Clone)]
pub struct ResidualModel {
    pub sigma_phi: SymMatrix,
    pub sigma_phi_inv: DMatrix<f64>,
    pub source: ResidualSource,
    eigen: EigenDecomp,
    sqrt_factor: DMatrix<f64>,
}

impl ResidualModel {
    pub fn from_covariance(sigma_phi: SymMatrix, source: ResidualSource) -> Result<Self> {
        let eigen = sym_eigen(&sigma_phi);
        if eigen.min() <= 1e-14 * eigen.max().abs().max(1.0) {
            return Err(Error::Numerical(format!(
                "residual covariance is degenerate (min eigenvalue {:.3e}); detector requires positive definiteness",
                eigen.min()
            )));
        }
        let inv_lam = DMatrix::from_diagonal(&eigen.eigenvalues.map(|l| 1.0 / l));
        let sigma_phi_inv = &eigen.eigenvectors * inv_lam * eigen.eigenvectors.transpose();
        let check = (&sigma_phi_inv * sigma_phi.as_matrix() - DMatrix::identity(sigma_phi.dim(), sigma_phi.dim())).amax();
        if check > 1e-8 {
            return Err(Error::Numerical(format!(
                "residual inverse check failed: ||S S^-1 - I|| = {check:.3e}"
            )));
        }
        let sqrt_lam = DMatrix::from_diagonal(&eigen.eigenvalues.map(|l| l.sqrt()));
        let sqrt_factor = &eigen.eigenvectors * sqrt_lam * eigen.eigenvectors.transpose();
        Ok(ResidualModel {
            sigma_phi,
            sigma_phi_inv,
            source,
            eigen,
            sqrt_factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_phi.dim()
    }

    pub fn eigen(&self) -> &EigenDecomp {
        &self.eigen
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigen.max()
    }

    /// Symmetric square root of `sigma_phi`.
    pub fn sqrt_factor(&self) -> &DMatrix<f64> {
        &self.sqrt_factor
    }

    /// Quadratic form `(a - b)' sigma_phi^{-1} (a - b)`.
    pub fn mahalanobis2(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let d = a - b;
        (d.transpose() * &self.sigma_phi_inv * &d)[0]
    }
}

/// Analytic residual covariance from the stacked benign error recursion
/// `[e_hat; e_twin]^+ = F [e_hat; e_twin] + G [w; v; d]` with
/// `F = [[A - L_hat C, 0], [-B K, A_K - L_twin D]]`, solving a discrete
/// Lyapunov equation for the joint covariance and projecting onto
/// `phi = e_twin - e_hat`.
pub fn residual_covariance_analytic(
    physical: &KalmanFilter,
    twin: &KalmanFilter,
    k: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<ResidualModel> {
    let n = physical.a_k.nrows();
    let phys = physical.steady_state(1e-12, 50_000)?;
    let tw = twin.steady_state(1e-12, 50_000)?;
    let a = &physical.a_k - b * k;
    let f_tl = &a - &phys.gain * &physical.obs;
    let f_br = &twin.a_k - &tw.gain * &twin.obs;
    let mut f = DMatrix::zeros(2 * n, 2 * n);
    f.view_mut((0, 0), (n, n)).copy_from(&f_tl);
    f.view_mut((n, 0), (n, n)).copy_from(&(-(b * k)));
    f.view_mut((n, n), (n, n)).copy_from(&f_br);
    let rho = spectral_radius(&f);
    if rho >= 1.0 {
        return Err(Error::Numerical(format!(
            "joint closed-loop error map is unstable (spectral radius {rho:.6})"
        )));
    }
    let sw = physical.sigma_w.as_matrix();
    let w_tl = sw + &phys.gain * physical.sigma_noise.as_matrix() * phys.gain.transpose();
    let w_br = sw + &tw.gain * twin.sigma_noise.as_matrix() * tw.gain.transpose();
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    w.view_mut((0, 0), (n, n)).copy_from(&w_tl);
    w.view_mut((0, n), (n, n)).copy_from(sw);
    w.view_mut((n, 0), (n, n)).copy_from(sw);
    w.view_mut((n, n), (n, n)).copy_from(&w_br);
    let j = solve_discrete_lyapunov(&f, &SymMatrix::new(w)?)?;
    let jm = j.as_matrix();
    let j11 = jm.view((0, 0), (n, n));
    let j12 = jm.view((0, n), (n, n));
    let j21 = jm.view((n, 0), (n, n));
    let j22 = jm.view((n, n), (n, n));
    // phi = [-I, I] [e_hat; e_twin]
    let sigma = j22 + j11 - j12 - j21;
    let sigma = SymMatrix::new((&sigma + sigma.transpose()) * 0.5)?;
    ResidualModel::from_covariance(sigma, ResidualSource::Analytic)
}

/// Empirical residual covariance from a benign closed-loop run with both
/// filters frozen at their steady gains (the regime the analytic stacked
/// model describes). Burn-in is excluded, the estimate is symmetrized and
/// regularized with `+1e-9 I`.
pub fn residual_covariance_monte_carlo(
    model: &PlantModel,
    k: &DMatrix<f64>,
    steps: usize,
    rng: &mut RngStream,
) -> Result<ResidualModel> {
    let n = model.n_x();
    let physical = physical_filter(model, k)?;
    let twin = twin_filter(model, k)?;
    let phys = physical.steady_state(1e-12, 50_000)?;
    let tw = twin.steady_state(1e-12, 50_000)?;
    let burn_in = (steps / 10).clamp(100, 2_000);

    let w = GaussianSampler::new(DVector::zeros(n), &model.sigma_w)?;
    let v = GaussianSampler::new(DVector::zeros(model.n_y()), &model.sigma_v)?;
    let d = GaussianSampler::new(DVector::zeros(model.n_z()), &model.sigma_d)?;

    let mut x = DVector::zeros(n);
    let mut x_hat: DVector<f64> = DVector::zeros(n);
    let mut x_twin: DVector<f64> = DVector::zeros(n);
    let a_k = &model.a + &model.b * k;
    let mut acc = DMatrix::zeros(n, n);
    let mut count = 0usize;
    for step in 0..(steps + burn_in) {
        if step >= burn_in {
            let phi = &x_twin - &x_hat;
            acc += &phi * phi.transpose();
            count += 1;
        }
        let u = control_law(k, &x_hat);
        let y = &model.c * &x + v.draw(rng);
        let z = &model.d * &x + d.draw(rng);
        x = &model.a * &x + &model.b * &u + w.draw(rng);
        if !x.norm().is_finite() || x.norm() >= crate::plant::DIVERGENCE_GUARD {
            return Err(Error::Divergence {
                step,
                norm: x.norm(),
            });
        }
        x_hat = &a_k * &x_hat + &phys.gain * (&y - &physical.obs * &x_hat);
        x_twin = &a_k * &x_twin + &tw.gain * (&z - &twin.obs * &x_twin);
    }
    acc /= count as f64;
    let sigma = (&acc + acc.transpose()) * 0.5 + DMatrix::identity(n, n) * 1e-9;
    ResidualModel::from_covariance(SymMatrix::new(sigma)?, ResidualSource::MonteCarlo)
}

/// Persist a calibrated residual covariance to a plain-text artifact whose
/// header names the scenario and seed, so detector thresholds reproduce
/// across invocations.
pub fn save_residual(
    path: &Path,
    scenario: &str,
    seed: u64,
    residual: &ResidualModel,
) -> Result<()> {
    let n = residual.dim();
    let mut out = String::new();
    let _ = writeln!(out, "# twin-sentinel sigma_phi v1");
    let _ = writeln!(out, "# scenario: {scenario}");
    let _ = writeln!(out, "# seed: {seed}");
    let _ = writeln!(out, "# source: {}", residual.source.as_str());
    let _ = writeln!(out, "dim {n}");
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| format!("{:.16e}", residual.sigma_phi[(i, j)]))
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a residual artifact produced by [`save_residual`].
pub fn load_residual(path: &Path) -> Result<ResidualModel> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut source = ResidualSource::Analytic;
    let mut dim = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(s) = rest.trim().strip_prefix("source:") {
                if s.trim() == "monte_carlo" {
                    source = ResidualSource::MonteCarlo;
                }
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("dim ") {
            dim = Some(rest.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("bad dim line in residual artifact {}", path.display()))
            })?);
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!("bad matrix row in residual artifact {}", path.display()))
            })?;
        rows.push(row);
    }
    let n = dim.ok_or_else(|| {
        Error::Config(format!("residual artifact {} missing dim header", path.display()))
    })?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!(
            "residual artifact {} has malformed matrix block",
            path.display()
        )));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    ResidualModel::from_covariance(SymMatrix::new(m)?, source)
}

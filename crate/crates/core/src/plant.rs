//! Ground-truth discrete-time LTI plant with two observation channels: the
//! general physical channel `y` and the integrity-protected twin channel `z`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mathkit::{
    is_detectable, is_stabilizable, GaussianSampler, RngStream, SymMatrix,
};

/// State-norm guard; runs abort instead of emitting NaNs once crossed.
pub const DIVERGENCE_GUARD: f64 = 1e9;

/// Immutable plant description. `dt` is provenance metadata for discretized
/// models and does not affect the discrete dynamics.
#[derive(Debug, Clone)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma_x: SymMatrix,
    pub sigma_w: SymMatrix,
    pub sigma_v: SymMatrix,
    pub sigma_d: SymMatrix,
    pub dt: f64,
}

impl PlantModel {
    /// Validate dimensions, covariance definiteness, stabilizability of
    /// `(A, B)` and detectability of `(A, C)`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        sigma_x: SymMatrix,
        sigma_w: SymMatrix,
        sigma_v: SymMatrix,
        sigma_d: SymMatrix,
        dt: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::Dimension("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::Dimension("B row count must match A".into()));
        }
        if c.ncols() != n || d.ncols() != n {
            return Err(Error::Dimension("C and D must have n_x columns".into()));
        }
        for (name, m, dim) in [
            ("sigma_x", &sigma_x, n),
            ("sigma_w", &sigma_w, n),
            ("sigma_v", &sigma_v, c.nrows()),
            ("sigma_d", &sigma_d, d.nrows()),
        ] {
            if m.dim() != dim {
                return Err(Error::Dimension(format!("{name} must be {dim}x{dim}")));
            }
            if !m.is_psd(1e-10) {
                return Err(Error::Numerical(format!("{name} must be positive semidefinite")));
            }
        }
        if !is_stabilizable(&a, &b) {
            return Err(Error::Numerical("(A, B) is not stabilizable".into()));
        }
        if !is_detectable(&a, &c) {
            return Err(Error::Numerical("(A, C) is not detectable".into()));
        }
        Ok(PlantModel {
            a,
            b,
            c,
            d,
            sigma_x,
            sigma_w,
            sigma_v,
            sigma_d,
            dt,
        })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.d.nrows()
    }

    /// Detectability of `(A_K, D)` can only be checked once the control gain
    /// exists; the runner calls this after LQR synthesis.
    pub fn validate_with_gain(&self, k: &DMatrix<f64>) -> Result<()> {
        let a_k = &self.a + &self.b * k;
        if !is_detectable(&a_k, &self.d) {
            return Err(Error::Numerical("(A_K, D) is not detectable".into()));
        }
        Ok(())
    }
}

/// Mutable per-run plant state.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub k: usize,
    pub x: DVector<f64>,
}

impl PlantState {
    pub fn new(x: DVector<f64>) -> Self {
        PlantState { k: 0, x }
    }

    /// Draw the initial state from `N(0, sigma_x)`.
    pub fn sample_initial(model: &PlantModel, rng: &mut RngStream) -> Result<Self> {
        let x0 = crate::mathkit::sample_gaussian(
            &DVector::zeros(model.n_x()),
            &model.sigma_x,
            rng,
        )?;
        Ok(PlantState::new(x0))
    }
}

/// Exact zero-order-hold discretization via the augmented matrix exponential:
/// `exp([[Ac, Bc], [0, 0]] dt) = [[A, B], [0, I]]`.
pub fn discretize_zoh(a_c: &DMatrix<f64>, b_c: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if dt <= 0.0 {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let n = a_c.nrows();
    let m = b_c.ncols();
    if !a_c.is_square() || b_c.nrows() != n {
        return Err(Error::Dimension("continuous A must be square and match B rows".into()));
    }
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b_c * dt));
    let e = aug.exp();
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, m)).into_owned();
    Ok((a, b))
}

/// Per-run simulator owning the noise samplers for one plant instance.
pub struct PlantSim {
    model: PlantModel,
    w: GaussianSampler,
    v: GaussianSampler,
    d: GaussianSampler,
}

/// Observations emitted from the pre-transition state at step `k`.
pub struct StepOutput {
    pub y: DVector<f64>,
    pub z: DVector<f64>,
}

impl PlantSim {
    pub fn new(model: PlantModel) -> Result<Self> {
        let w = GaussianSampler::new(DVector::zeros(model.n_x()), &model.sigma_w)?;
        let v = GaussianSampler::new(DVector::zeros(model.n_y()), &model.sigma_v)?;
        let d = GaussianSampler::new(DVector::zeros(model.n_z()), &model.sigma_d)?;
        Ok(PlantSim { model, w, v, d })
    }

    pub fn model(&self) -> &PlantModel {
        &self.model
    }

    /// Emit `y_k`, `z_k` from the current state (observations precede the
    /// transition, realizing the one-step-delayed filter form).
    pub fn observe(&self, state: &PlantState, rng: &mut RngStream) -> StepOutput {
        let y = &self.model.c * &state.x + self.v.draw(rng);
        let z = &self.model.d * &state.x + self.d.draw(rng);
        StepOutput { y, z }
    }

    /// Advance `x_{k+1} = A x_k + B u_k + w_k` under the divergence guard.
    pub fn transition(
        &self,
        state: &PlantState,
        u: &DVector<f64>,
        rng: &mut RngStream,
    ) -> Result<PlantState> {
        if u.len() != self.model.n_u() {
            return Err(Error::Dimension(format!(
                "input has len {}, expected {}",
                u.len(),
                self.model.n_u()
            )));
        }
        let x_next = &self.model.a * &state.x + &self.model.b * u + self.w.draw(rng);
        let norm = x_next.norm();
        if !norm.is_finite() || norm >= DIVERGENCE_GUARD {
            return Err(Error::Divergence {
                step: state.k,
                norm,
            });
        }
        Ok(PlantState {
            k: state.k + 1,
            x: x_next,
        })
    }
}

/// One observation-then-transition step, as a free function mirroring the
/// `PlantSim` pair for callers that do not hold a simulator.
pub fn step(
    model: &PlantModel,
    state: &PlantState,
    u: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<(PlantState, DVector<f64>, DVector<f64>)> {
    let sim = PlantSim::new(model.clone())?;
    let obs = sim.observe(state, rng);
    let next = sim.transition(state, u, rng)?;
    Ok((next, obs.y, obs.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn noise_free_scalar() -> PlantModel {
        PlantModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn zoh_integrator_identity() {
        let (a, b) = discretize_zoh(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 0.25).unwrap();
        assert_relative_eq!(a, DMatrix::identity(2, 2), max_relative = 1e-12);
        assert_relative_eq!(b, DMatrix::identity(2, 2) * 0.25, max_relative = 1e-12);
    }

    #[test]
    fn zoh_double_integrator_closed_form() {
        let a_c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b_c = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let h = 0.3;
        let (a, b) = discretize_zoh(&a_c, &b_c, h).unwrap();
        assert_relative_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]), max_relative = 1e-12);
        assert_relative_eq!(b, DMatrix::from_row_slice(2, 1, &[h * h / 2.0, h]), max_relative = 1e-12);
    }

    #[test]
    fn zoh_semigroup_property() {
        let mut rng = crate::mathkit::RngStream::new(2);
        let raw = DMatrix::from_fn(3, 3, |_, _| rng.standard_normal());
        let a_c = &raw - DMatrix::identity(3, 3) * 2.0;
        let b_c = DMatrix::identity(3, 3);
        let h = 0.2;
        let (a_full, _) = discretize_zoh(&a_c, &b_c, h).unwrap();
        let (a_half, _) = discretize_zoh(&a_c, &b_c, h / 2.0).unwrap();
        assert_relative_eq!(a_full, &a_half * &a_half, max_relative = 1e-9);
    }

    #[test]
    fn noise_free_step_is_pure_arithmetic() {
        let model = noise_free_scalar();
        let mut rng = crate::mathkit::RngStream::new(0);
        let state = PlantState::new(DVector::from_element(1, 2.0));
        let (next, y, z) = step(&model, &state, &DVector::from_element(1, -1.0), &mut rng).unwrap();
        assert_relative_eq!(next.x[0], 1.0);
        assert_relative_eq!(y[0], 2.0);
        assert_relative_eq!(z[0], 2.0);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn zero_everything_stays_zero() {
        let model = noise_free_scalar();
        let mut rng = crate::mathkit::RngStream::new(0);
        let state = PlantState::new(DVector::zeros(1));
        let (next, y, z) = step(&model, &state, &DVector::zeros(1), &mut rng).unwrap();
        assert_eq!(next.x[0], 0.0);
        assert_eq!(y[0], 0.0);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn pure_noise_sample_covariance() {
        // A = 0, u = 0, sigma_w = I: state is iid N(0, I)
        let model = PlantModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            SymMatrix::zeros(2),
            SymMatrix::identity(2),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
            1.0,
        )
        .unwrap();
        let sim = PlantSim::new(model).unwrap();
        let mut rng = crate::mathkit::RngStream::new(8);
        let mut state = PlantState::new(DVector::zeros(2));
        let mut acc = DMatrix::zeros(2, 2);
        let n = 100_000;
        for _ in 0..n {
            state = sim.transition(&state, &DVector::zeros(1), &mut rng).unwrap();
            acc += &state.x * state.x.transpose();
        }
        acc /= n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc[(i, j)] - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn observation_noises_uncorrelated() {
        let model = PlantModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            SymMatrix::identity(1),
            SymMatrix::identity(1),
            1.0,
        )
        .unwrap();
        let sim = PlantSim::new(model).unwrap();
        let mut rng = crate::mathkit::RngStream::new(3);
        let state = PlantState::new(DVector::zeros(1));
        let mut cross = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let o = sim.observe(&state, &mut rng);
            cross += o.y[0] * o.z[0];
        }
        assert!((cross / n as f64).abs() < 0.02);
    }

    #[test]
    fn divergence_guard_fires() {
        let model = PlantModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            SymMatrix::zeros(1),
            1.0,
        )
        .unwrap();
        let sim = PlantSim::new(model).unwrap();
        let mut rng = crate::mathkit::RngStream::new(0);
        let state = PlantState::new(DVector::from_element(1, 1.0));
        let err = sim
            .transition(&state, &DVector::from_element(1, 2e9), &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn rejects_non_stabilizable_pair() {
        let res = PlantModel::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
            SymMatrix::zeros(2),
            1.0,
        );
        assert!(res.is_err());
    }
}

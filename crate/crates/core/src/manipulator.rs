//! Two-link planar manipulator: Euler-Lagrange dynamics as printed in the
//! source model, feedback linearization to a double integrator in
//! end-effector coordinates, the half-circle reference, and assembly of the
//! tracking-error plant used by the case studies.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::mathkit::SymMatrix;
use crate::plant::{discretize_zoh, PlantModel};

/// Physical constants with the derived `a`, `b`, `delta` shorthands.
#[derive(Debug, Clone, Copy)]
pub struct RobotParams {
    pub l1: f64,
    pub l2: f64,
    pub r1: f64,
    pub r2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub i1: f64,
    pub i2: f64,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

impl RobotParams {
    pub fn new(
        l1: f64,
        l2: f64,
        r1: f64,
        r2: f64,
        eta1: f64,
        eta2: f64,
        i1: f64,
        i2: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("l1", l1),
            ("l2", l2),
            ("r1", r1),
            ("r2", r2),
            ("eta1", eta1),
            ("eta2", eta2),
            ("i1", i1),
            ("i2", i2),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Domain(format!("robot parameter {name} must be positive, got {v}")));
            }
        }
        Ok(RobotParams {
            l1,
            l2,
            r1,
            r2,
            eta1,
            eta2,
            i1,
            i2,
            a: i1 + i2 + eta1 * r1 * r1 + eta2 * (l1 * l1 + r2 * r2),
            b: eta2 * l1 * r2,
            delta: i2 + eta2 * r2 * r2,
        })
    }

    /// Table of shipped defaults.
    pub fn table_defaults() -> Self {
        RobotParams::new(0.6, 0.4, 0.3, 0.2, 6.0, 4.0, 1.0, 1.0).unwrap()
    }
}

/// Joint-space state: angular positions and velocities.
#[derive(Debug, Clone, Copy)]
pub struct ArmState {
    pub g: Vector2<f64>,
    pub g_dot: Vector2<f64>,
}

/// Inertia matrix, with the lower-left entry symmetrized to `delta + b cos g2`
/// (the printed form drops the `b` factor; inertia matrices are symmetric).
pub fn mass_matrix(g: &Vector2<f64>, params: &RobotParams) -> Matrix2<f64> {
    let c2 = g[1].cos();
    let off = params.delta + params.b * c2;
    Matrix2::new(params.a + params.b * c2, off, off, params.delta)
}

/// Velocity-coupling matrix exactly as printed.
pub fn coriolis_matrix(g: &Vector2<f64>, g_dot: &Vector2<f64>, params: &RobotParams) -> Matrix2<f64> {
    let s2 = g[1].sin();
    Matrix2::new(
        -params.b * s2 * g_dot[1],
        -params.b * s2 * (g_dot[0] + g_dot[1]),
        params.b * s2 * g_dot[0],
        0.0,
    )
}

/// End-effector position from joint angles.
pub fn forward_kinematics(g: &Vector2<f64>, params: &RobotParams) -> Vector2<f64> {
    Vector2::new(
        params.l1 * g[0].cos() + params.l2 * (g[0] + g[1]).cos(),
        params.l1 * g[0].sin() + params.l2 * (g[0] + g[1]).sin(),
    )
}

/// Planar two-link Jacobian `H(g) = d p / d g`.
pub fn jacobian(g: &Vector2<f64>, params: &RobotParams) -> Matrix2<f64> {
    let (s1, c1) = g[0].sin_cos();
    let (s12, c12) = (g[0] + g[1]).sin_cos();
    Matrix2::new(
        -params.l1 * s1 - params.l2 * s12,
        -params.l2 * s12,
        params.l1 * c1 + params.l2 * c12,
        params.l2 * c12,
    )
}

/// Time derivative of the Jacobian along `(g, g_dot)`.
pub fn jacobian_dot(g: &Vector2<f64>, g_dot: &Vector2<f64>, params: &RobotParams) -> Matrix2<f64> {
    let (s1, c1) = g[0].sin_cos();
    let (s12, c12) = (g[0] + g[1]).sin_cos();
    let d1 = g_dot[0];
    let d12 = g_dot[0] + g_dot[1];
    Matrix2::new(
        -params.l1 * c1 * d1 - params.l2 * c12 * d12,
        -params.l2 * c12 * d12,
        -params.l1 * s1 * d1 - params.l2 * s12 * d12,
        -params.l2 * s12 * d12,
    )
}

/// Elbow-up inverse kinematics for a reachable point.
pub fn inverse_kinematics(p: &Vector2<f64>, params: &RobotParams) -> Result<Vector2<f64>> {
    let (l1, l2) = (params.l1, params.l2);
    let r2 = p.norm_squared();
    let c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c2) {
        return Err(Error::Domain(format!(
            "end-effector target ({:.3}, {:.3}) is out of reach",
            p[0], p[1]
        )));
    }
    let g2 = c2.acos();
    let g1 = p[1].atan2(p[0]) - (l2 * g2.sin()).atan2(l1 + l2 * g2.cos());
    Ok(Vector2::new(g1, g2))
}

const SINGULARITY_TOL: f64 = 1e-6;

/// Feedback-linearizing torque: `tau = M(g) a_g + S(g, g_dot) g_dot` with
/// `a_g = H^{-1}(g) (u_task - Hdot(g) g_dot)`, so the instantaneous
/// end-effector acceleration equals `u_task` exactly.
pub fn feedback_linearize(
    state: &ArmState,
    u_task: &Vector2<f64>,
    params: &RobotParams,
) -> Result<Vector2<f64>> {
    let h = jacobian(&state.g, params);
    let det = h.determinant();
    if det.abs() <= SINGULARITY_TOL {
        return Err(Error::Numerical(format!(
            "Jacobian singular at g = ({:.4}, {:.4}): |det H| = {:.3e}",
            state.g[0],
            state.g[1],
            det.abs()
        )));
    }
    let h_inv = h.try_inverse().ok_or_else(|| Error::Numerical("Jacobian inversion failed".into()))?;
    let a_g = h_inv * (u_task - jacobian_dot(&state.g, &state.g_dot, params) * state.g_dot);
    Ok(mass_matrix(&state.g, params) * a_g + coriolis_matrix(&state.g, &state.g_dot, params) * state.g_dot)
}

/// Joint acceleration under a torque: `g_ddot = M^{-1} (tau - S g_dot)`.
pub fn joint_acceleration(state: &ArmState, tau: &Vector2<f64>, params: &RobotParams) -> Vector2<f64> {
    let m = mass_matrix(&state.g, params);
    let rhs = tau - coriolis_matrix(&state.g, &state.g_dot, params) * state.g_dot;
    m.try_inverse().expect("inertia matrix is positive definite") * rhs
}

fn rk4_step(state: &ArmState, tau: &Vector2<f64>, params: &RobotParams, dt: f64) -> ArmState {
    let f = |s: &ArmState| (s.g_dot, joint_acceleration(s, tau, params));
    let k1 = f(state);
    let s2 = ArmState {
        g: state.g + k1.0 * (dt / 2.0),
        g_dot: state.g_dot + k1.1 * (dt / 2.0),
    };
    let k2 = f(&s2);
    let s3 = ArmState {
        g: state.g + k2.0 * (dt / 2.0),
        g_dot: state.g_dot + k2.1 * (dt / 2.0),
    };
    let k3 = f(&s3);
    let s4 = ArmState {
        g: state.g + k3.0 * dt,
        g_dot: state.g_dot + k3.1 * dt,
    };
    let k4 = f(&s4);
    ArmState {
        g: state.g + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (dt / 6.0),
        g_dot: state.g_dot + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (dt / 6.0),
    }
}

/// Measure the realized end-effector acceleration under a frozen torque by a
/// central-difference probe of `p_dot = H g_dot` around the current state.
pub fn task_acceleration_probe(
    state: &ArmState,
    tau: &Vector2<f64>,
    params: &RobotParams,
    h: f64,
) -> Vector2<f64> {
    let fwd = rk4_step(state, tau, params, h);
    let bwd = rk4_step(state, tau, params, -h);
    let v_fwd = jacobian(&fwd.g, params) * fwd.g_dot;
    let v_bwd = jacobian(&bwd.g, params) * bwd.g_dot;
    (v_fwd - v_bwd) / (2.0 * h)
}

/// Half-circle reference in end-effector coordinates, continued around the
/// circle for runs longer than the traversal time.
#[derive(Debug, Clone, Copy)]
pub struct HalfCircle {
    pub center: Vector2<f64>,
    pub radius: f64,
    /// seconds to sweep the half circle
    pub duration: f64,
    pub start_angle: f64,
}

impl HalfCircle {
    pub fn omega(&self) -> f64 {
        std::f64::consts::PI / self.duration
    }

    /// Reference position, velocity, acceleration at time `t`.
    pub fn sample(&self, t: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let w = self.omega();
        let th = self.start_angle + w * t;
        let (s, c) = th.sin_cos();
        let p = self.center + self.radius * Vector2::new(c, s);
        let v = self.radius * w * Vector2::new(-s, c);
        let a = -self.radius * w * w * Vector2::new(c, s);
        (p, v, a)
    }
}

impl Default for HalfCircle {
    fn default() -> Self {
        HalfCircle {
            center: Vector2::new(0.55, 0.10),
            radius: 0.3,
            duration: 10.0,
            start_angle: -std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Noise covariances for the assembled error-state plant.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub sigma_x: SymMatrix,
    pub sigma_w: SymMatrix,
    pub sigma_v: SymMatrix,
    pub sigma_d: SymMatrix,
}

impl NoiseConfig {
    /// Shipped defaults. The process noise is velocity-weighted: it sets the
    /// twin observer's bandwidth above the controller's, which keeps the
    /// twin error map well damped under both rejection fallback and
    /// in-ellipsoid tampering.
    pub fn defaults() -> Self {
        NoiseConfig {
            sigma_x: SymMatrix::scaled_identity(4, 1e-3),
            sigma_w: SymMatrix::from_diagonal(&[1e-6, 1e-6, 1e-3, 1e-3]),
            sigma_v: SymMatrix::scaled_identity(4, 1e-4),
            sigma_d: SymMatrix::scaled_identity(2, 4e-4),
        }
    }
}

/// The assembled scenario: tracking-error plant plus the reference used to
/// map error coordinates back to the workspace.
#[derive(Debug, Clone)]
pub struct ManipulatorScenario {
    pub plant: PlantModel,
    pub reference: HalfCircle,
    pub params: RobotParams,
}

/// Build the 4-state double-integrator error plant in end-effector
/// coordinates: `x = [p - p_ref; p_dot - p_dot_ref]`, ZOH-discretized;
/// `y = x + v` (C = I4), `z = D x + d` with `D = [I2 0]` (position-only
/// secure channel). Tracking is realized by regulating this error state
/// with feedforward of the reference acceleration.
pub fn build_scenario(
    params: RobotParams,
    dt: f64,
    reference: HalfCircle,
    noise: NoiseConfig,
) -> Result<ManipulatorScenario> {
    let mut a_c = DMatrix::zeros(4, 4);
    a_c[(0, 2)] = 1.0;
    a_c[(1, 3)] = 1.0;
    let mut b_c = DMatrix::zeros(4, 2);
    b_c[(2, 0)] = 1.0;
    b_c[(3, 1)] = 1.0;
    let (a, b) = discretize_zoh(&a_c, &b_c, dt)?;
    let c = DMatrix::identity(4, 4);
    let mut d = DMatrix::zeros(2, 4);
    d[(0, 0)] = 1.0;
    d[(1, 1)] = 1.0;
    let plant = PlantModel::new(
        a,
        b,
        c,
        d,
        noise.sigma_x,
        noise.sigma_w,
        noise.sigma_v,
        noise.sigma_d,
        dt,
    )?;
    Ok(ManipulatorScenario {
        plant,
        reference,
        params,
    })
}

/// Deterministic nonlinear tracking rollout: the arm starts on the reference
/// with matched velocity, the outer LQR runs in error coordinates at `dt`
/// with reference-acceleration feedforward, and the feedback-linearizing
/// torque is recomputed continuously inside each hold interval. Returns the
/// per-sample end-effector deviation from the reference.
pub fn simulate_arm_tracking(
    scenario: &ManipulatorScenario,
    gain: &DMatrix<f64>,
    steps: usize,
    substeps: usize,
) -> Result<Vec<f64>> {
    let params = &scenario.params;
    let dt = scenario.plant.dt;
    let (p0, v0, _) = scenario.reference.sample(0.0);
    let g0 = inverse_kinematics(&p0, params)?;
    let h0 = jacobian(&g0, params);
    let g_dot0 = h0
        .try_inverse()
        .ok_or_else(|| Error::Numerical("reference start is singular".into()))?
        * v0;
    let mut state = ArmState { g: g0, g_dot: g_dot0 };
    let mut deviations = Vec::with_capacity(steps);
    let sub_dt = dt / substeps as f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let (p_ref, v_ref, a_ref) = scenario.reference.sample(t);
        let p = forward_kinematics(&state.g, params);
        let v = jacobian(&state.g, params) * state.g_dot;
        let err = DVector::from_row_slice(&[
            p[0] - p_ref[0],
            p[1] - p_ref[1],
            v[0] - v_ref[0],
            v[1] - v_ref[1],
        ]);
        let u_fb = gain * err;
        let u_task = Vector2::new(a_ref[0] + u_fb[0], a_ref[1] + u_fb[1]);
        for _ in 0..substeps {
            let tau = feedback_linearize(&state, &u_task, params)?;
            state = rk4_step(&state, &tau, params, sub_dt);
        }
        let (p_next, _, _) = scenario.reference.sample(t + dt);
        deviations.push((forward_kinematics(&state.g, params) - p_next).norm());
    }
    Ok(deviations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqg::{solve_lqr, LqrWeights};
    use crate::mathkit::RngStream;
    use approx::assert_relative_eq;

    #[test]
    fn derived_constants_from_table() {
        let p = RobotParams::table_defaults();
        assert_relative_eq!(p.a, 4.14, epsilon = 1e-12);
        assert_relative_eq!(p.b, 0.48, epsilon = 1e-12);
        assert_relative_eq!(p.delta, 1.16, epsilon = 1e-12);
    }

    #[test]
    fn mass_matrix_symmetric_and_off_diagonal_at_right_angle() {
        let p = RobotParams::table_defaults();
        let m = mass_matrix(&Vector2::new(0.3, std::f64::consts::FRAC_PI_2), &p);
        assert_relative_eq!(m[(0, 1)], p.delta, epsilon = 1e-12);
        assert_relative_eq!(m[(0, 1)], m[(1, 0)], epsilon = 1e-15);
    }

    #[test]
    fn mass_matrix_pd_over_sweep() {
        let p = RobotParams::table_defaults();
        for i in 0..=720 {
            let g2 = -std::f64::consts::PI + i as f64 * std::f64::consts::PI / 360.0;
            let m = mass_matrix(&Vector2::new(0.0, g2), &p);
            assert!(m.determinant() > 0.0, "det at g2={g2}");
            assert!(m[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn coriolis_zero_cases_and_substitution() {
        let p = RobotParams::table_defaults();
        let zero = coriolis_matrix(&Vector2::new(0.4, 0.7), &Vector2::zeros(), &p);
        assert_eq!(zero, Matrix2::zeros());
        let zero2 = coriolis_matrix(&Vector2::new(0.4, 0.0), &Vector2::new(1.0, 2.0), &p);
        assert_eq!(zero2, Matrix2::zeros());
        let s = coriolis_matrix(
            &Vector2::new(0.0, std::f64::consts::FRAC_PI_2),
            &Vector2::new(1.0, 1.0),
            &p,
        );
        assert_relative_eq!(s[(0, 0)], -0.48, epsilon = 1e-12);
        assert_relative_eq!(s[(0, 1)], -0.96, epsilon = 1e-12);
        assert_relative_eq!(s[(1, 0)], 0.48, epsilon = 1e-12);
        assert_relative_eq!(s[(1, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_hold_needs_no_torque() {
        let p = RobotParams::table_defaults();
        let state = ArmState {
            g: Vector2::new(0.5, 1.0),
            g_dot: Vector2::zeros(),
        };
        let tau = feedback_linearize(&state, &Vector2::zeros(), &p).unwrap();
        assert!(tau.norm() < 1e-12);
    }

    #[test]
    fn straight_arm_is_singular() {
        let p = RobotParams::table_defaults();
        let state = ArmState {
            g: Vector2::zeros(),
            g_dot: Vector2::zeros(),
        };
        assert!(feedback_linearize(&state, &Vector2::new(1.0, 0.0), &p).is_err());
        // |det H| = l1 l2 |sin g2|
        let g = Vector2::new(0.3, 0.8);
        let det = jacobian(&g, &p).determinant();
        assert_relative_eq!(det.abs(), p.l1 * p.l2 * g[1].sin().abs(), epsilon = 1e-12);
    }

    #[test]
    fn linearization_reproduces_task_acceleration() {
        let p = RobotParams::table_defaults();
        let mut rng = RngStream::new(31);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let g = Vector2::new(
                rng.gen_range_f64(-std::f64::consts::PI, std::f64::consts::PI),
                rng.gen_range_f64(0.3, std::f64::consts::PI - 0.3),
            );
            let g_dot = Vector2::new(rng.gen_range_f64(-1.0, 1.0), rng.gen_range_f64(-1.0, 1.0));
            let u_task = Vector2::new(rng.gen_range_f64(-2.0, 2.0), rng.gen_range_f64(-2.0, 2.0));
            let state = ArmState { g, g_dot };
            let tau = feedback_linearize(&state, &u_task, &p).unwrap();
            let probe = task_acceleration_probe(&state, &tau, &p, 1e-6);
            worst = worst.max((probe - u_task).norm());
        }
        assert!(worst < 1e-6, "worst probe error {worst}");
    }

    #[test]
    fn energy_probe_stays_bounded_under_zero_torque() {
        // The printed velocity-coupling matrix injects first-order power
        // (1/2) b sin(g2) g1dot^2 g2dot, so exact conservation is not
        // expected; the probe checks the drift stays small and first-order.
        let p = RobotParams::table_defaults();
        let mut state = ArmState {
            g: Vector2::new(0.4, 1.2),
            g_dot: Vector2::new(0.5, -0.3),
        };
        let energy = |s: &ArmState| 0.5 * (s.g_dot.transpose() * mass_matrix(&s.g, &p) * s.g_dot)[0];
        let e0 = energy(&state);
        let dt = 1e-4;
        for _ in 0..100 {
            state = rk4_step(&state, &Vector2::zeros(), &p, dt);
        }
        let drift = (energy(&state) - e0).abs();
        assert!(drift < 1e-2 * e0.max(1.0), "energy drift {drift}");
    }

    #[test]
    fn scenario_dimensions_and_selector() {
        let s = build_scenario(
            RobotParams::table_defaults(),
            0.01,
            HalfCircle::default(),
            NoiseConfig::defaults(),
        )
        .unwrap();
        assert_eq!(s.plant.n_x(), 4);
        assert_eq!(s.plant.n_y(), 4);
        assert_eq!(s.plant.n_z(), 2);
        // D recovers positions from the stacked state
        let x = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let z = &s.plant.d * &x;
        assert_eq!(z, DVector::from_row_slice(&[1.0, 2.0]));
        // ZOH closed forms
        assert_relative_eq!(s.plant.a[(0, 2)], 0.01, epsilon = 1e-12);
        assert_relative_eq!(s.plant.b[(0, 0)], 0.5 * 0.01 * 0.01, epsilon = 1e-12);
    }

    #[test]
    fn ik_fk_roundtrip_and_reference_reachability() {
        let p = RobotParams::table_defaults();
        let circle = HalfCircle::default();
        for i in 0..=100 {
            let t = i as f64 * circle.duration / 100.0;
            let (target, _, _) = circle.sample(t);
            let g = inverse_kinematics(&target, &p).unwrap();
            let back = forward_kinematics(&g, &p);
            assert!((back - target).norm() < 1e-10);
            assert!(jacobian(&g, &p).determinant().abs() > 0.05);
        }
    }

    #[test]
    fn tracks_half_circle_with_zero_noise() {
        let scenario = build_scenario(
            RobotParams::table_defaults(),
            0.01,
            HalfCircle::default(),
            NoiseConfig::defaults(),
        )
        .unwrap();
        let weights = LqrWeights::new(SymMatrix::identity(4), SymMatrix::identity(2)).unwrap();
        let sol = solve_lqr(&scenario.plant.a, &scenario.plant.b, &weights, 1e-10, 10_000).unwrap();
        let deviations = simulate_arm_tracking(&scenario, &sol.k, 1_000, 10).unwrap();
        let max_dev = deviations.iter().cloned().fold(0.0f64, f64::max);
        assert!(max_dev < 1e-3, "max deviation {max_dev}");
    }
}

//! Hip-link flexibility: spring-damper deflections, their estimation from
//! commanded torques, and condensation of the flexible hip chain into an
//! equivalent rigid hip.
//!
//! Deflections are roll and pitch only, stored as `(theta_x, theta_y)`.
//! Hip joint angles are stored in factorization order `(q_z, q_x, q_y)`, so
//! that `R(q) = R_z(q_z) R_x(q_x) R_y(q_y)`. The deflection rotation is
//! `R(theta) = R_y(theta_y) R_x(theta_x)`, applied on the left of the joints.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

const GIMBAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexParams {
    /// Stiffness about x and y (N*m/rad).
    pub k: Vector2<f64>,
    /// Damping about x and y (N*m*s/rad).
    pub d: Vector2<f64>,
    /// Hip joint to deflection lever arm (m).
    pub l: Vector3<f64>,
}

impl FlexParams {
    pub fn new(k: Vector2<f64>, d: Vector2<f64>, l: Vector3<f64>) -> Result<Self> {
        if !(k.x > 0.0 && k.y > 0.0) || !(d.x >= 0.0 && d.y >= 0.0) {
            return Err(Error::Domain(format!("need k > 0 and d >= 0, got k={k:?}, d={d:?}")));
        }
        Ok(Self { k, d, l })
    }

    /// Same stiffness on both axes, damping `2 sqrt(k)`.
    pub fn isotropic(k: f64, l: Vector3<f64>) -> Result<Self> {
        let d = 2.0 * k.max(0.0).sqrt();
        Self::new(Vector2::repeat(k), Vector2::repeat(d), l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlexState {
    pub theta: Vector2<f64>,
    /// Low-pass filtered deflection rate; also the filter memory.
    pub theta_dot: Vector2<f64>,
    /// Estimate before the latest update.
    pub theta_prev: Vector2<f64>,
}

impl FlexState {
    pub fn at(theta: Vector2<f64>) -> Self {
        Self { theta, theta_dot: Vector2::zeros(), theta_prev: theta }
    }

    pub fn check(&self) -> Result<()> {
        for &t in self.theta.iter() {
            if !t.is_finite() || t.abs() >= FRAC_PI_2 {
                return Err(Error::DeflectionOutOfRange { theta: t });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HipConfiguration {
    /// Joint angles `(q_z, q_x, q_y)`.
    pub q: Vector3<f64>,
    /// Angular velocity of `R(q)` in the pelvis frame.
    pub omega: Vector3<f64>,
    /// Commanded hip torque.
    pub tau: Vector3<f64>,
    /// Expected force transmitted through the hip.
    pub f: Vector3<f64>,
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R_z(q_z) R_x(q_x) R_y(q_y)` for `q = (q_z, q_x, q_y)`.
pub fn hip_rotation(q: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(q[0]) * rot_x(q[1]) * rot_y(q[2])
}

/// `R_y(theta_y) R_x(theta_x)`.
pub fn deflection_rotation(theta: &Vector2<f64>) -> Matrix3<f64> {
    rot_y(theta.y) * rot_x(theta.x)
}

/// Inverse of [`hip_rotation`] with the middle angle in `(-pi/2, pi/2)`.
pub fn zxy_angles(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let beta = r[(2, 1)].clamp(-1.0, 1.0).asin();
    if FRAC_PI_2 - beta.abs() < GIMBAL_TOL {
        return Err(Error::GimbalSingularity { angle: beta });
    }
    let gamma = (-r[(2, 0)]).atan2(r[(2, 2)]);
    let alpha = (-r[(0, 1)]).atan2(r[(1, 1)]);
    Ok(Vector3::new(alpha, beta, gamma))
}

/// Maps `(q_z, q_x, q_y)` rates to the angular velocity of `R(q)`.
pub fn rate_matrix(q: &Vector3<f64>) -> Matrix3<f64> {
    let rz = rot_z(q[0]);
    let rzx = rz * rot_x(q[1]);
    Matrix3::from_columns(&[Vector3::z(), rz * Vector3::x(), rzx * Vector3::y()])
}

/// Spring-damper torque `-k theta - d theta_dot`.
pub fn flex_torque(theta: &Vector2<f64>, theta_dot: &Vector2<f64>, p: &FlexParams) -> Vector2<f64> {
    -p.k.component_mul(theta) - p.d.component_mul(theta_dot)
}

/// Implicit deflection update from the flexing torque, followed by a
/// first-order low-pass of the finite-difference rate.
pub fn estimate_deflection(
    tau_f: &Vector2<f64>,
    state: &FlexState,
    p: &FlexParams,
    dt: f64,
    lpf_cutoff: f64,
) -> Result<FlexState> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let theta0 = state.theta;
    let mut theta = Vector2::zeros();
    for i in 0..2 {
        let denom = p.k[i] * dt + p.d[i];
        if !(denom > 0.0) {
            return Err(Error::Domain(format!("k*dt + d must be positive, got {denom}")));
        }
        theta[i] = (p.d[i] * theta0[i] - tau_f[i] * dt) / denom;
    }
    let raw_rate = (theta - theta0) / dt;
    let alpha = lpf_gain(lpf_cutoff, dt);
    let next = FlexState {
        theta,
        theta_dot: state.theta_dot + (raw_rate - state.theta_dot) * alpha,
        theta_prev: theta0,
    };
    next.check()?;
    Ok(next)
}

/// Smoothing factor of a discretized first-order low-pass. A non-positive
/// cutoff disables filtering.
pub fn lpf_gain(cutoff_hz: f64, dt: f64) -> f64 {
    if cutoff_hz <= 0.0 {
        return 1.0;
    }
    let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff_hz);
    dt / (dt + tau)
}

/// Flexing torque predicted from the commanded hip torque and hip force.
pub fn approx_flex_torque(hip: &HipConfiguration, theta: &Vector2<f64>, p: &FlexParams) -> Vector2<f64> {
    let rz = rot_z(hip.q[0]);
    let rzx = rz * rot_x(hip.q[1]);
    let tx = Vector3::new(hip.tau.x, 0.0, 0.0);
    let ty = Vector3::new(0.0, hip.tau.y, 0.0);
    let total = rz * tx + rzx * ty + (deflection_rotation(theta) * p.l).cross(&hip.f);
    total.xy()
}

/// Fixed point of `theta = -tau_f(theta) / k`, for static loads whose
/// torque depends on the deflection through the lever arm.
pub fn steady_deflection(hip: &HipConfiguration, p: &FlexParams) -> Result<Vector2<f64>> {
    let mut theta = Vector2::zeros();
    for _ in 0..100 {
        let next = -approx_flex_torque(hip, &theta, p).component_div(&p.k);
        let done = (next - theta).amax() < 1e-15;
        theta = next;
        if done {
            break;
        }
    }
    FlexState::at(theta).check()?;
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalentHip {
    pub q: Vector3<f64>,
    pub q_dot: Vector3<f64>,
}

/// Rigid three-joint hip producing the same rotation and angular velocity
/// as the flexible five-rotation chain.
pub fn equivalent_hip(hip: &HipConfiguration, flex: &FlexState) -> Result<EquivalentHip> {
    let r_theta = deflection_rotation(&flex.theta);
    let q = zxy_angles(&(r_theta * hip_rotation(&hip.q)))?;
    let ry = rot_y(flex.theta.y);
    let omega = Vector3::y() * flex.theta_dot.y + ry * Vector3::x() * flex.theta_dot.x + r_theta * hip.omega;
    let q_dot = rate_matrix(&q)
        .lu()
        .solve(&omega)
        .ok_or(Error::GimbalSingularity { angle: q[1] })?;
    Ok(EquivalentHip { q, q_dot })
}

/// Rigid-model error of the foot produced by the lever arm.
pub fn lever_offset(theta: &Vector2<f64>, l: &Vector3<f64>) -> Vector3<f64> {
    deflection_rotation(theta) * l - l
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedKinematics {
    pub feet: [Vector3<f64>; 2],
    pub com: Vector3<f64>,
}

/// Shift forward-kinematics feet and CoM by the lever-arm errors.
pub fn lever_arm_correction(
    theta: [Vector2<f64>; 2],
    params: [&FlexParams; 2],
    feet_fk: [Vector3<f64>; 2],
    com_fk: Vector3<f64>,
    leg_masses: [f64; 2],
    total_mass: f64,
) -> Result<CorrectedKinematics> {
    if !(total_mass > 0.0) {
        return Err(Error::Domain(format!("total mass must be positive, got {total_mass}")));
    }
    let delta = [lever_offset(&theta[0], &params[0].l), lever_offset(&theta[1], &params[1].l)];
    Ok(CorrectedKinematics {
        feet: [feet_fk[0] + delta[0], feet_fk[1] + delta[1]],
        com: com_fk + (delta[0] * leg_masses[0] + delta[1] * leg_masses[1]) / total_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn robot_hip(k: f64) -> FlexParams {
        FlexParams::isotropic(k, Vector3::new(0.0, 0.0, 0.09)).unwrap()
    }

    #[test]
    fn spring_damper_examples() {
        let p = robot_hip(4900.0);
        assert_eq!(p.d, Vector2::repeat(140.0));
        assert_eq!(flex_torque(&Vector2::zeros(), &Vector2::zeros(), &p), Vector2::zeros());
        let t = flex_torque(&Vector2::new(0.01, 0.0), &Vector2::zeros(), &p);
        assert_relative_eq!(t.x, -49.0, epsilon = 1e-12);
        let t = flex_torque(&Vector2::zeros(), &Vector2::new(1.0, 0.0), &p);
        assert_eq!(t.x, -140.0);
        assert!(FlexParams::new(Vector2::new(0.0, 1.0), Vector2::zeros(), Vector3::zeros()).is_err());
    }

    #[test]
    fn estimator_examples() {
        let p = robot_hip(4900.0);
        let s = estimate_deflection(&Vector2::new(49.0, 0.0), &FlexState::default(), &p, 0.002, 20.0).unwrap();
        assert_relative_eq!(s.theta.x, -0.098 / 149.8, epsilon = 1e-15);
        assert_relative_eq!(s.theta.x, -6.5421e-4, epsilon = 1e-8);
        assert_eq!(s.theta_prev, Vector2::zeros());

        let tau = Vector2::new(30.0, -12.0);
        let steady = FlexState::at(-tau.component_div(&p.k));
        let s = estimate_deflection(&tau, &steady, &p, 0.002, 20.0).unwrap();
        assert_relative_eq!(s.theta, steady.theta, epsilon = 1e-16);

        let undamped = FlexParams::new(Vector2::repeat(100.0), Vector2::zeros(), Vector3::zeros()).unwrap();
        let s = estimate_deflection(&tau, &FlexState::at(Vector2::new(0.3, 0.3)), &undamped, 0.01, 0.0).unwrap();
        assert_relative_eq!(s.theta, -tau / 100.0, epsilon = 1e-15);
    }

    #[test]
    fn estimator_rejects_huge_deflection() {
        let soft = robot_hip(1.0);
        let res = estimate_deflection(&Vector2::new(10.0, 0.0), &FlexState::default(), &soft, 1.0, 0.0);
        assert!(matches!(res, Err(Error::DeflectionOutOfRange { .. })));
    }

    #[test]
    fn flex_torque_approximation_examples() {
        let p = robot_hip(4900.0);
        let zero = HipConfiguration::default();
        assert_eq!(approx_flex_torque(&zero, &Vector2::zeros(), &p), Vector2::zeros());
        let hip = HipConfiguration { tau: Vector3::new(1.0, 2.0, 7.0), ..zero };
        assert_eq!(approx_flex_torque(&hip, &Vector2::zeros(), &p), Vector2::new(1.0, 2.0));
        let hip = HipConfiguration { f: Vector3::new(0.0, 0.0, 500.0), ..zero };
        assert_eq!(approx_flex_torque(&hip, &Vector2::zeros(), &p), Vector2::zeros());
    }

    /// Independent evaluation with explicit trigonometric matrices.
    fn flex_torque_oracle(q: [f64; 3], theta: [f64; 2], tau: [f64; 3], f: [f64; 3], l: [f64; 3]) -> [f64; 2] {
        let (a, b) = (q[0], q[1]);
        // R_z(a) e_x tau_x
        let t1 = [a.cos() * tau[0], a.sin() * tau[0], 0.0];
        // R_z(a) R_x(b) e_y tau_y = R_z(a) (0, cos b, sin b) tau_y
        let t2 = [-a.sin() * b.cos() * tau[1], a.cos() * b.cos() * tau[1], b.sin() * tau[1]];
        // R_y(ty) R_x(tx) l
        let (tx, ty) = (theta[0], theta[1]);
        let rl1 = [l[0], tx.cos() * l[1] - tx.sin() * l[2], tx.sin() * l[1] + tx.cos() * l[2]];
        let rl = [ty.cos() * rl1[0] + ty.sin() * rl1[2], rl1[1], -ty.sin() * rl1[0] + ty.cos() * rl1[2]];
        let cross = [rl[1] * f[2] - rl[2] * f[1], rl[2] * f[0] - rl[0] * f[2]];
        [t1[0] + t2[0] + cross[0], t1[1] + t2[1] + cross[1]]
    }

    #[test]
    fn equivalent_hip_identity_deflection() {
        let hip = HipConfiguration {
            q: Vector3::new(0.2, -0.1, 0.4),
            omega: Vector3::new(0.3, -0.5, 1.0),
            ..Default::default()
        };
        let eq = equivalent_hip(&hip, &FlexState::default()).unwrap();
        assert_relative_eq!(eq.q, hip.q, epsilon = 1e-14);
        let expected = rate_matrix(&hip.q).try_inverse().unwrap() * hip.omega;
        assert_relative_eq!(eq.q_dot, expected, epsilon = 1e-12);
    }

    #[test]
    fn equivalent_hip_pure_pitch() {
        let flex = FlexState::at(Vector2::new(0.0, 0.05));
        let eq = equivalent_hip(&HipConfiguration::default(), &flex).unwrap();
        assert_relative_eq!(eq.q, Vector3::new(0.0, 0.0, 0.05), epsilon = 1e-15);
    }

    #[test]
    fn gimbal_lock_is_reported() {
        let hip = HipConfiguration { q: Vector3::new(0.0, FRAC_PI_2, 0.0), ..Default::default() };
        assert!(matches!(equivalent_hip(&hip, &FlexState::default()), Err(Error::GimbalSingularity { .. })));
    }

    #[test]
    fn lever_arm_examples() {
        let p = robot_hip(2180.0);
        let feet = [Vector3::new(0.0, 0.1, 0.0), Vector3::new(0.0, -0.1, 0.0)];
        let com = Vector3::new(0.01, 0.0, 0.87);
        let out = lever_arm_correction([Vector2::zeros(); 2], [&p, &p], feet, com, [10.0, 10.0], 90.0).unwrap();
        assert_eq!(out.feet, feet);
        assert_eq!(out.com, com);

        let theta = Vector2::new(1e-4, 0.0);
        let delta = lever_offset(&theta, &p.l);
        assert_relative_eq!(delta.y, -0.09 * 1e-4, max_relative = 1e-7);

        let out = lever_arm_correction([theta; 2], [&p, &p], feet, com, [10.0, 10.0], 90.0).unwrap();
        assert_relative_eq!(out.com - com, delta * (20.0 / 90.0), epsilon = 1e-15);
        assert!(lever_arm_correction([theta; 2], [&p, &p], feet, com, [10.0; 2], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn flex_torque_matches_oracle(
            q in proptest::array::uniform3(-1.0..1.0f64),
            theta in proptest::array::uniform2(-0.1..0.1f64),
            tau in proptest::array::uniform3(-100.0..100.0f64),
            f in proptest::array::uniform3(-900.0..900.0f64),
            l in proptest::array::uniform3(-0.1..0.1f64),
        ) {
            let p = FlexParams::new(Vector2::repeat(1000.0), Vector2::zeros(), Vector3::from(l)).unwrap();
            let hip = HipConfiguration { q: Vector3::from(q), tau: Vector3::from(tau), f: Vector3::from(f), ..Default::default() };
            let got = approx_flex_torque(&hip, &Vector2::from(theta), &p);
            let want = flex_torque_oracle(q, theta, tau, f, l);
            prop_assert!((got.x - want[0]).abs() < 1e-10 && (got.y - want[1]).abs() < 1e-10);
        }

        #[test]
        fn rotation_identity(
            q in proptest::array::uniform3(-3.0..3.0f64),
            theta in proptest::array::uniform2(-0.3..0.3f64),
        ) {
            prop_assume!(q[1].abs() < 1.2);
            let hip = HipConfiguration { q: Vector3::from(q), ..Default::default() };
            let flex = FlexState::at(Vector2::from(theta));
            let eq = equivalent_hip(&hip, &flex).unwrap();
            let residual = hip_rotation(&eq.q) - deflection_rotation(&flex.theta) * hip_rotation(&hip.q);
            prop_assert!(residual.amax() <= 1e-12);
        }

        #[test]
        fn estimator_contracts(
            tau in proptest::array::uniform2(-200.0..200.0f64),
            theta0 in proptest::array::uniform2(-0.1..0.1f64),
            k in 500.0..8000.0f64, dt in 1e-4..0.01f64,
        ) {
            let p = robot_hip(k);
            let tau = Vector2::from(tau);
            let target = -tau / k;
            let start = FlexState::at(Vector2::from(theta0));
            let next = estimate_deflection(&tau, &start, &p, dt, 20.0).unwrap();
            let rho = p.d.x / (k * dt + p.d.x);
            for i in 0..2 {
                prop_assert!((next.theta[i] - target[i]).abs() <= rho * (start.theta[i] - target[i]).abs() + 1e-15);
            }
        }

        #[test]
        fn zxy_round_trip(a in -3.1..3.1f64, b in -1.5..1.5f64, g in -3.1..3.1f64) {
            let q = Vector3::new(a, b, g);
            let back = zxy_angles(&hip_rotation(&q)).unwrap();
            prop_assert!((back - q).amax() < 1e-9);
        }
    }
}

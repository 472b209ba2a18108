//! Linearized centroidal dynamics.
//!
//! Each horizontal axis is an independent jerk-controlled triple integrator
//! `x+ = A x + B u` with state `(c, c_dot, c_ddot)`. The virtual repellent
//! point (VRP) `v = c - c_ddot / omega^2` is the system output, and the bias
//! `n = p - v` collects what the linear model leaves out (vertical motion,
//! angular momentum, contact height).

use nalgebra::{Matrix3, RowVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CoM position, velocity and acceleration along one horizontal axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CentroidalState {
    pub c: f64,
    pub c_dot: f64,
    pub c_ddot: f64,
}

impl CentroidalState {
    pub const fn new(c: f64, c_dot: f64, c_ddot: f64) -> Self {
        Self { c, c_dot, c_ddot }
    }

    pub fn at_rest(c: f64) -> Self {
        Self::new(c, 0.0, 0.0)
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.c, self.c_dot, self.c_ddot)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.c.is_finite() && self.c_dot.is_finite() && self.c_ddot.is_finite()
    }
}

/// Sampled system `x+ = A x + B u`, output row `V`, for a fixed period.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub v: RowVector3<f64>,
    pub period: f64,
    pub omega_sq: f64,
}

impl SystemMatrices {
    pub fn new(period: f64, omega_sq: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Domain(format!("sampling period must be positive, got {period}")));
        }
        if !(omega_sq > 0.0 && omega_sq.is_finite()) {
            return Err(Error::Domain(format!("omega^2 must be positive, got {omega_sq}")));
        }
        Ok(Self {
            a: transition(period),
            b: input(period),
            v: RowVector3::new(1.0, 0.0, -1.0 / omega_sq),
            period,
            omega_sq,
        })
    }

    pub fn omega(&self) -> f64 {
        self.omega_sq.sqrt()
    }

    /// Same dynamics resampled at another period.
    pub fn with_period(&self, period: f64) -> Result<Self> {
        Self::new(period, self.omega_sq)
    }

    pub fn step(&self, x: &CentroidalState, jerk: f64) -> CentroidalState {
        step_dynamics(x, jerk, self)
    }

    pub fn vrp(&self, x: &CentroidalState) -> f64 {
        vrp(x, self)
    }

    /// Scalar `V B`; the VRP response to one period of unit jerk.
    pub fn vb(&self) -> f64 {
        (self.v * self.b)[0]
    }
}

/// `A(t)` of the constant-jerk triple integrator.
pub fn transition(t: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, t, 0.5 * t * t, 0.0, 1.0, t, 0.0, 0.0, 1.0)
}

/// `B(t)` of the constant-jerk triple integrator.
pub fn input(t: f64) -> Vector3<f64> {
    Vector3::new(t * t * t / 6.0, 0.5 * t * t, t)
}

/// Linear-pendulum constant `omega^2 = g / c_z`.
pub fn omega_from_height(com_height: f64, gravity: f64) -> Result<f64> {
    if !(com_height > 0.0) || !(gravity > 0.0) {
        return Err(Error::Domain(format!(
            "CoM height and gravity must be positive (c_z={com_height}, g={gravity})"
        )));
    }
    Ok(gravity / com_height)
}

pub fn step_dynamics(x: &CentroidalState, jerk: f64, sys: &SystemMatrices) -> CentroidalState {
    CentroidalState::from_vector(&(sys.a * x.to_vector() + sys.b * jerk))
}

pub fn vrp(x: &CentroidalState, sys: &SystemMatrices) -> f64 {
    (sys.v * x.to_vector())[0]
}

/// Divergent component of motion `c + c_dot / omega`.
pub fn dcm(x: &CentroidalState, omega: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::Domain(format!("omega must be positive, got {omega}")));
    }
    Ok(x.c + x.c_dot / omega)
}

/// Vertical CoM height and acceleration; they only enter through the bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalState {
    pub c_z: f64,
    pub c_ddot_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub point: Vector3<f64>,
    pub force: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidalInputs {
    pub mass: f64,
    pub gravity: f64,
    /// Lateral components of the angular-momentum rate.
    pub l_dot: Vector2<f64>,
    pub contacts: Vec<Contact>,
}

/// `S`, the planar rotation by +pi/2.
pub fn rotate_quarter(v: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v[1], v[0])
}

/// Bias `n = p - v` for both horizontal axes.
pub fn bias_term(
    axes: &[CentroidalState; 2],
    vertical: VerticalState,
    inputs: &CentroidalInputs,
    sys: &SystemMatrices,
) -> Result<Vector2<f64>> {
    if !(inputs.mass > 0.0) {
        return Err(Error::Domain(format!("mass must be positive, got {}", inputs.mass)));
    }
    let total_normal: f64 = inputs.contacts.iter().map(|k| k.force.z).sum();
    if !(total_normal > 0.0) {
        return Err(Error::DegenerateContact { total_normal });
    }
    let vertical_load = inputs.mass * (vertical.c_ddot_z + inputs.gravity);
    if vertical_load == 0.0 {
        return Err(Error::DegenerateContact { total_normal: vertical_load });
    }
    let c_ddot = Vector2::new(axes[0].c_ddot, axes[1].c_ddot);
    let momentum = (c_ddot * (inputs.mass * vertical.c_z) - rotate_quarter(&inputs.l_dot)) / vertical_load;
    let height_moment = inputs
        .contacts
        .iter()
        .fold(Vector2::zeros(), |acc, k| acc + k.force.xy() * k.point.z);
    Ok(c_ddot / sys.omega_sq - momentum + height_moment / total_normal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Constant-jerk motion integrated symbolically over `[0, t]`.
    fn constant_jerk(x: &CentroidalState, jerk: f64, t: f64) -> CentroidalState {
        CentroidalState::new(
            x.c + x.c_dot * t + x.c_ddot * t * t / 2.0 + jerk * t.powi(3) / 6.0,
            x.c_dot + x.c_ddot * t + jerk * t * t / 2.0,
            x.c_ddot + jerk * t,
        )
    }

    #[test]
    fn omega_examples() {
        assert_eq!(omega_from_height(1.0, 9.81).unwrap(), 9.81);
        assert_relative_eq!(omega_from_height(0.87, 9.81).unwrap(), 11.275862, epsilon = 1e-5);
        assert!(omega_from_height(0.0, 9.81).is_err());
        assert!(omega_from_height(1.0, -1.0).is_err());
    }

    #[test]
    fn step_from_rest() {
        let sys = SystemMatrices::new(0.1, 9.81).unwrap();
        let x = sys.step(&CentroidalState::default(), 1.0);
        assert_relative_eq!(x.c, 1.0e-3 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(x.c_dot, 5e-3, epsilon = 1e-15);
        assert_relative_eq!(x.c_ddot, 0.1, epsilon = 1e-15);

        let sys = SystemMatrices::new(0.5, 9.81).unwrap();
        let x = sys.step(&CentroidalState::new(1.0, 2.0, 0.0), 0.0);
        assert_eq!(x, CentroidalState::new(2.0, 2.0, 0.0));
    }

    #[test]
    fn vrp_and_dcm_examples() {
        let sys = SystemMatrices::new(0.1, 10.0).unwrap();
        assert_eq!(vrp(&CentroidalState::new(1.0, 0.0, 0.0), &sys), 1.0);
        assert_relative_eq!(vrp(&CentroidalState::new(1.0, 0.0, 5.0), &sys), 0.5);
        let sys4 = SystemMatrices::new(0.1, 4.0).unwrap();
        assert_eq!(vrp(&CentroidalState::new(0.0, 3.0, 0.0), &sys4), 0.0);

        assert_eq!(dcm(&CentroidalState::new(1.0, 0.0, 0.0), 2.0).unwrap(), 1.0);
        assert_eq!(dcm(&CentroidalState::new(1.0, 2.0, 0.0), 2.0).unwrap(), 2.0);
        let omega = 3.3;
        let c = 0.3;
        assert_relative_eq!(dcm(&CentroidalState::new(c, -omega * c, 0.0), omega).unwrap(), 0.0);
        assert!(dcm(&CentroidalState::default(), 0.0).is_err());
    }

    fn contact(z: f64, f: Vector3<f64>) -> Contact {
        Contact { point: Vector3::new(0.0, 0.0, z), force: f }
    }

    #[test]
    fn bias_examples() {
        let sys = SystemMatrices::new(0.002, 9.81 / 0.87).unwrap();
        let rest = [CentroidalState::at_rest(0.0); 2];
        let inputs = CentroidalInputs {
            mass: 90.0,
            gravity: 9.81,
            l_dot: Vector2::zeros(),
            contacts: vec![contact(0.0, Vector3::new(0.0, 0.0, 900.0))],
        };
        let vertical = VerticalState { c_z: 0.87, c_ddot_z: 0.0 };
        assert_eq!(bias_term(&rest, vertical, &inputs, &sys).unwrap(), Vector2::zeros());

        // omega^2 = g / c_z makes the acceleration terms cancel.
        let moving = [CentroidalState::new(0.1, 0.3, 1.7), CentroidalState::new(0.0, -0.2, -0.6)];
        let n = bias_term(&moving, vertical, &inputs, &sys).unwrap();
        assert!(n.norm() < 1e-14, "{n}");

        let single = CentroidalInputs {
            contacts: vec![contact(0.02, Vector3::new(10.0, 0.0, 100.0))],
            ..inputs.clone()
        };
        let n = bias_term(&rest, vertical, &single, &sys).unwrap();
        assert_relative_eq!(n[0], 2e-3, epsilon = 1e-15);
        assert_eq!(n[1], 0.0);

        let airborne = CentroidalInputs { contacts: vec![], ..inputs };
        assert!(matches!(
            bias_term(&rest, vertical, &airborne, &sys),
            Err(Error::DegenerateContact { .. })
        ));
    }

    #[test]
    fn angular_momentum_rotates_into_bias() {
        let sys = SystemMatrices::new(0.002, 9.81 / 0.87).unwrap();
        let rest = [CentroidalState::at_rest(0.0); 2];
        let inputs = CentroidalInputs {
            mass: 90.0,
            gravity: 9.81,
            l_dot: Vector2::new(0.0, 9.0),
            contacts: vec![contact(0.0, Vector3::new(0.0, 0.0, 882.9))],
        };
        let n = bias_term(&rest, VerticalState { c_z: 0.87, c_ddot_z: 0.0 }, &inputs, &sys).unwrap();
        // S L_dot = (-9, 0); n = + S L_dot / (m g)
        assert_relative_eq!(n[0], -9.0 / 882.9, epsilon = 1e-15);
        assert_eq!(n[1], 0.0);
    }

    proptest! {
        #[test]
        fn step_matches_closed_form(
            c in -2.0..2.0f64, cd in -2.0..2.0f64, cdd in -5.0..5.0f64,
            jerk in -100.0..100.0f64, t in 1e-4..0.5f64,
        ) {
            let sys = SystemMatrices::new(t, 11.0).unwrap();
            let x = CentroidalState::new(c, cd, cdd);
            let got = sys.step(&x, jerk);
            let want = constant_jerk(&x, jerk, t);
            prop_assert!((got.c - want.c).abs() <= 1e-12 * (1.0 + want.c.abs()));
            prop_assert!((got.c_dot - want.c_dot).abs() <= 1e-12 * (1.0 + want.c_dot.abs()));
            prop_assert!((got.c_ddot - want.c_ddot).abs() <= 1e-12 * (1.0 + want.c_ddot.abs()));
        }

        #[test]
        fn repeated_steps_match_single_closed_form(
            c in -1.0..1.0f64, cd in -1.0..1.0f64, cdd in -2.0..2.0f64,
            jerk in -20.0..20.0f64, k in 1usize..60,
        ) {
            let t = 0.01;
            let sys = SystemMatrices::new(t, 11.0).unwrap();
            let x0 = CentroidalState::new(c, cd, cdd);
            let mut x = x0;
            for _ in 0..k {
                x = sys.step(&x, jerk);
            }
            let want = constant_jerk(&x0, jerk, t * k as f64);
            let scale = 1.0 + want.c.abs() + want.c_dot.abs() + want.c_ddot.abs();
            prop_assert!((x.c - want.c).abs() <= 1e-12 * scale);
            prop_assert!((x.c_dot - want.c_dot).abs() <= 1e-12 * scale);
            prop_assert!((x.c_ddot - want.c_ddot).abs() <= 1e-12 * scale);
        }

        #[test]
        fn velocity_conserved_without_jerk(c in -1.0..1.0f64, cd in -1.0..1.0f64, k in 1usize..500) {
            let sys = SystemMatrices::new(0.002, 11.0).unwrap();
            let mut x = CentroidalState::new(c, cd, 0.0);
            for _ in 0..k {
                x = sys.step(&x, 0.0);
            }
            prop_assert_eq!(x.c_dot, cd);
            prop_assert_eq!(x.c_ddot, 0.0);
        }

        #[test]
        fn vrp_increment_superposes(
            a in proptest::array::uniform3(-1.0..1.0f64), ua in -50.0..50.0f64,
            b in proptest::array::uniform3(-1.0..1.0f64), ub in -50.0..50.0f64,
        ) {
            let sys = SystemMatrices::new(0.05, 11.0).unwrap();
            let incr = |x: CentroidalState, u: f64| sys.vrp(&sys.step(&x, u)) - sys.vrp(&x);
            let xa = CentroidalState::new(a[0], a[1], a[2]);
            let xb = CentroidalState::new(b[0], b[1], b[2]);
            let sum = CentroidalState::from_vector(&(xa.to_vector() + xb.to_vector()));
            let lhs = incr(sum, ua + ub);
            let rhs = incr(xa, ua) + incr(xb, ub);
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn bias_invariant_to_force_scaling(
            fx in -50.0..50.0f64, fy in -50.0..50.0f64, fz in 10.0..900.0f64,
            z in 0.0..0.05f64, scale in 0.01..100.0f64, cdd in -2.0..2.0f64,
        ) {
            let sys = SystemMatrices::new(0.002, 11.0).unwrap();
            let axes = [CentroidalState::new(0.0, 0.0, cdd), CentroidalState::new(0.0, 0.0, -cdd)];
            let vertical = VerticalState { c_z: 0.9, c_ddot_z: 0.3 };
            let make = |s: f64| CentroidalInputs {
                mass: 90.0,
                gravity: 9.81,
                l_dot: Vector2::new(1.0, -2.0),
                contacts: vec![
                    contact(z, Vector3::new(fx, fy, fz) * s),
                    contact(0.0, Vector3::new(-fy, fx, 0.5 * fz) * s),
                ],
            };
            let n1 = bias_term(&axes, vertical, &make(1.0), &sys).unwrap();
            let n2 = bias_term(&axes, vertical, &make(scale), &sys).unwrap();
            prop_assert!((n1 - n2).norm() <= 1e-12);
        }
    }
}

//! Reduced biped: a pelvis carrying the upper-body mass and two legs hung
//! from flexible hips. Each leg is a straight telescopic segment (the knee
//! sets its length) from the hip joint to the foot, its mass at the midpoint.
//!
//! Chain per leg, from the pelvis: deflection point `D`, deflection rotation
//! `R(theta)`, lever `l` to the hip joint `H`, hip rotation `R(q)`, leg.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flex::{deflection_rotation, hip_rotation, rot_x, rot_z, HipConfiguration};
use crate::gait::Side;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyModel {
    pub total_mass: f64,
    pub leg_mass: f64,
    pub hip_half_width: f64,
    pub pelvis_height: f64,
    /// Upper-body CoM relative to the pelvis point.
    pub torso_offset: [f64; 3],
    pub gravity: f64,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self {
            total_mass: 90.0,
            leg_mass: 10.0,
            hip_half_width: 0.1,
            pelvis_height: 0.95,
            torso_offset: [0.0, 0.0, 0.02],
            gravity: 9.81,
        }
    }
}

/// Load carried by one hip, held by the hip joint: moment about the hip
/// joint and force, both acting on the pelvis side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HipLoad {
    pub moment: Vector3<f64>,
    pub force: Vector3<f64>,
}

impl HipLoad {
    /// Moment about the deflection point, whose xy part bends the hip.
    pub fn flexing_torque(&self, theta: &Vector2<f64>, lever: &Vector3<f64>) -> Vector2<f64> {
        (self.moment + (deflection_rotation(theta) * lever).cross(&self.force)).xy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub pelvis: Vector3<f64>,
    pub deflection_points: [Vector3<f64>; 2],
    pub hips: [Vector3<f64>; 2],
    pub feet: [Vector3<f64>; 2],
    /// Hip joint angles `(q_z, q_x, q_y)`.
    pub q: [Vector3<f64>; 2],
    pub leg_length: [f64; 2],
    pub leg_com: [Vector3<f64>; 2],
    pub upper_com: Vector3<f64>,
    pub com: Vector3<f64>,
}

impl BodyModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.total_mass > 2.0 * self.leg_mass
            && self.leg_mass >= 0.0
            && self.hip_half_width > 0.0
            && self.pelvis_height > 0.0
            && self.gravity > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("plant.body: need total_mass > 2 leg_mass >= 0 and positive dimensions".into()))
        }
    }

    pub fn upper_mass(&self) -> f64 {
        self.total_mass - 2.0 * self.leg_mass
    }

    pub fn hip_offset(&self, side: Side) -> Vector3<f64> {
        Vector3::new(0.0, side.lateral_sign() * self.hip_half_width, 0.0)
    }

    fn torso(&self) -> Vector3<f64> {
        Vector3::from(self.torso_offset)
    }

    /// Posture realizing the horizontal CoM `com_xy` with the feet and
    /// deflections given. The pelvis height is fixed and the pelvis follows
    /// from the CoM, which is linear in it.
    pub fn solve(
        &self,
        com_xy: [f64; 2],
        feet: [Vector3<f64>; 2],
        theta: [Vector2<f64>; 2],
        lever: [Vector3<f64>; 2],
    ) -> Result<Geometry> {
        let m = self.total_mass;
        let ml = self.leg_mass;
        let sides = [Side::Left, Side::Right];
        let rl: [Vector3<f64>; 2] = [deflection_rotation(&theta[0]) * lever[0], deflection_rotation(&theta[1]) * lever[1]];
        let mut rest = self.upper_mass() * self.torso();
        for i in 0..2 {
            rest += 0.5 * ml * (self.hip_offset(sides[i]) + rl[i] + feet[i]);
        }
        let denom = self.upper_mass() + ml;
        let pelvis = Vector3::new(
            (m * com_xy[0] - rest.x) / denom,
            (m * com_xy[1] - rest.y) / denom,
            self.pelvis_height,
        );
        let mut g = Geometry {
            pelvis,
            deflection_points: [Vector3::zeros(); 2],
            hips: [Vector3::zeros(); 2],
            feet,
            q: [Vector3::zeros(); 2],
            leg_length: [0.0; 2],
            leg_com: [Vector3::zeros(); 2],
            upper_com: pelvis + self.torso(),
            com: Vector3::zeros(),
        };
        for i in 0..2 {
            let d = pelvis + self.hip_offset(sides[i]);
            let h = d + rl[i];
            let leg = feet[i] - h;
            let len = leg.norm();
            if !(len > 1e-3) || !len.is_finite() {
                return Err(Error::Domain(format!("degenerate leg length {len} m")));
            }
            // R(q) (0, 0, -1) = (-sin b, sin a cos b, -cos a cos b) with q_z = 0.
            let u = deflection_rotation(&theta[i]).transpose() * leg / len;
            let b = (-u.x).clamp(-1.0, 1.0).asin();
            let a = u.y.atan2(-u.z);
            g.deflection_points[i] = d;
            g.hips[i] = h;
            g.q[i] = Vector3::new(0.0, a, b);
            g.leg_length[i] = len;
            g.leg_com[i] = 0.5 * (h + feet[i]);
        }
        g.com = (self.upper_mass() * g.upper_com + ml * (g.leg_com[0] + g.leg_com[1])) / m;
        Ok(g)
    }

    /// Rigid-model forward kinematics relative to the pelvis point, with the
    /// hip rotation given directly (for instance an equivalent rigid hip).
    pub fn rigid_fk(
        &self,
        q: [Vector3<f64>; 2],
        leg_length: [f64; 2],
        lever: [Vector3<f64>; 2],
    ) -> ([Vector3<f64>; 2], Vector3<f64>) {
        let sides = [Side::Left, Side::Right];
        let mut feet = [Vector3::zeros(); 2];
        let mut com = self.upper_mass() * self.torso();
        for i in 0..2 {
            let h = self.hip_offset(sides[i]) + lever[i];
            feet[i] = h + hip_rotation(&q[i]) * Vector3::new(0.0, 0.0, -leg_length[i]);
            com += self.leg_mass * 0.5 * (h + feet[i]);
        }
        (feet, com / self.total_mass)
    }

    /// Static and inertial loads on both hips. `weights[i]` is the share of
    /// the body carried by foot `i` (zero for a swinging foot); `accel` is
    /// the CoM acceleration. A lightly loaded foot does not yet carry its own
    /// leg: the rest of the leg still hangs from its hip, so the loads vary
    /// continuously through touchdown and lift-off.
    pub fn hip_loads(&self, g: &Geometry, weights: [f64; 2], accel: &Vector3<f64>) -> [HipLoad; 2] {
        // Gravity plus d'Alembert force per unit mass.
        let field = Vector3::new(-accel.x, -accel.y, -self.gravity - accel.z);
        let hanging = weights.map(|w| {
            if self.leg_mass > 0.0 {
                (1.0 - w * self.total_mass / self.leg_mass).clamp(0.0, 1.0)
            } else if w > 0.0 {
                0.0
            } else {
                1.0
            }
        });
        let mut loads = [HipLoad::default(); 2];
        for i in 0..2 {
            let h = g.hips[i];
            let mut load = HipLoad::default();
            let mut add = |r: Vector3<f64>, f: Vector3<f64>| {
                load.moment += (r - h).cross(&f);
                load.force += f;
            };
            if weights[i] > 0.0 {
                add(g.upper_com, field * (self.upper_mass() * weights[i]));
                for j in 0..2 {
                    add(g.leg_com[j], field * (self.leg_mass * hanging[j] * weights[i]));
                }
            }
            if hanging[i] > 0.0 {
                // The hanging part of the leg pulls on the pelvis.
                add(g.leg_com[i], -field * (self.leg_mass * hanging[i]));
            }
            loads[i] = load;
        }
        loads
    }

    /// Joint-space view of a hip load as the hip sensors and the controller
    /// see it: torques about the x, y and z joint axes, in that order.
    pub fn hip_configuration(
        &self,
        q: &Vector3<f64>,
        q_rate: &Vector3<f64>,
        theta: &Vector2<f64>,
        load: &HipLoad,
    ) -> HipConfiguration {
        let r_theta = deflection_rotation(theta);
        let rz = rot_z(q[0]);
        let axes = [r_theta * rz * Vector3::x(), r_theta * rz * rot_x(q[1]) * Vector3::y(), r_theta * Vector3::z()];
        let tau = Vector3::new(axes[0].dot(&load.moment), axes[1].dot(&load.moment), axes[2].dot(&load.moment));
        HipConfiguration { q: *q, omega: *q_rate, tau, f: load.force }
    }
}

//! Translation of the stabilized centroidal command into whole-body task
//! references: CoM task, feet trajectories, waist yaw and contact wrenches.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::centroidal::CentroidalState;
use crate::error::{Error, Result};
use crate::qp::{Qp, QpOutcome};

/// Desired value, rate and acceleration of a 3D task with PD gains.
///
/// Gains follow the feedback law literally, `pi = Kp (g - g_des) + ...`, so
/// stabilizing gains are negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskReference {
    pub value: Vector3<f64>,
    pub rate: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub kp: f64,
    pub kd: f64,
}

pub fn task_feedback(gamma: &Vector3<f64>, gamma_dot: &Vector3<f64>, r: &TaskReference) -> Vector3<f64> {
    (gamma - r.value) * r.kp + (gamma_dot - r.rate) * r.kd + r.accel
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    pub force: Vector3<f64>,
    /// Torque about the foot center.
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn within_cone(&self, mu: f64) -> bool {
        self.force.z >= 0.0 && self.force.xy().norm() <= mu * self.force.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FootSample {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl FootSample {
    pub fn at_rest(pos: Vector3<f64>) -> Self {
        Self { pos, ..Default::default() }
    }
}

/// Minimum-jerk-like quintic `10 s^3 - 15 s^4 + 6 s^5` and its derivatives.
fn quintic(s: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - 2.0 * s + s2),
        60.0 * s * (1.0 - 3.0 * s + 2.0 * s2),
    )
}

/// Peak speed of the quintic over a distance `d` covered in time `t`.
pub fn quintic_peak_speed(d: f64, t: f64) -> f64 {
    15.0 / 8.0 * d.abs() / t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingSpline {
    pub from: Vector3<f64>,
    pub to: Vector3<f64>,
    pub start: f64,
    pub duration: f64,
    pub apex: f64,
}

/// Foot trajectory between two placements: a quintic horizontally, and two
/// quintics joined at the apex vertically. C2 with zero boundary velocity
/// and acceleration.
pub fn swing_spline(
    from: Vector3<f64>,
    to: Vector3<f64>,
    start: f64,
    duration: f64,
    apex: f64,
    max_speed: f64,
) -> Result<SwingSpline> {
    if !(duration > 0.0) || !(apex > 0.0) {
        return Err(Error::Domain(format!("swing needs positive duration and apex (got {duration}, {apex})")));
    }
    let required = quintic_peak_speed((to - from).xy().norm(), duration);
    if required > max_speed {
        return Err(Error::InfeasibleSwing { required, limit: max_speed });
    }
    Ok(SwingSpline { from, to, start, duration, apex })
}

impl SwingSpline {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn sample(&self, t: f64) -> FootSample {
        let s = ((t - self.start) / self.duration).clamp(0.0, 1.0);
        if s <= 0.0 {
            return FootSample::at_rest(self.from);
        }
        if s >= 1.0 {
            return FootSample::at_rest(self.to);
        }
        let t_sw = self.duration;
        let (p, v, a) = quintic(s);
        let delta = self.to - self.from;
        let mut out = FootSample {
            pos: self.from + delta * p,
            vel: delta * (v / t_sw),
            acc: delta * (a / (t_sw * t_sw)),
        };
        // Vertical: up during the first half, down during the second.
        let half = 0.5 * t_sw;
        let (sv, sign, base) = if s < 0.5 { (2.0 * s, 1.0, 0.0) } else { (2.0 * s - 1.0, -1.0, self.apex) };
        let (zp, zv, za) = quintic(sv);
        let ground = self.from.z + (self.to.z - self.from.z) * p;
        out.pos.z = ground + base + sign * self.apex * zp;
        out.vel.z += sign * self.apex * zv / half;
        out.acc.z += sign * self.apex * za / (half * half);
        out
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // Roundoff can leave the -pi branch cut a few ulps above -pi.
    if w <= -PI + 4.0 * f64::EPSILON { PI } else { w }
}

/// Bisector of the two foot yaws on the unit circle, in `(-pi, pi]`.
/// Opposite yaws resolve to the left foot plus a quarter turn.
pub fn waist_yaw_reference(left: f64, right: f64) -> f64 {
    let mut diff = wrap_angle(right - left);
    if diff <= -PI + 1e-15 {
        diff = PI;
    }
    wrap_angle(left + 0.5 * diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionParams {
    pub mass: f64,
    pub gravity: f64,
    pub mu: f64,
    pub force_weight: f64,
    pub torque_weight: f64,
}

impl Default for DistributionParams {
    fn default() -> Self {
        Self { mass: 90.0, gravity: 9.81, mu: 0.7, force_weight: 1.0, torque_weight: 1.0 }
    }
}

/// Contact wrenches realizing the desired CoM acceleration and momentum rate.
///
/// `contacts[i]` is the center of foot `i` (0 left, 1 right) when in contact.
/// With one contact the Newton-Euler equations fix the wrench. With two,
/// the weighted wrench norms are minimized under a pyramid inscribed in the
/// friction cone.
pub fn distribute_wrench(
    com: &Vector3<f64>,
    com_acc: &Vector3<f64>,
    l_dot: &Vector3<f64>,
    contacts: [Option<Vector3<f64>>; 2],
    p: &DistributionParams,
) -> Result<[Wrench; 2]> {
    let total_force = (com_acc + Vector3::new(0.0, 0.0, p.gravity)) * p.mass;
    if !(total_force.z > 0.0) {
        return Err(Error::DistributionInfeasible(format!(
            "required normal force {:.3} N is not positive",
            total_force.z
        )));
    }
    match contacts {
        [None, None] => Err(Error::DistributionInfeasible("no foot in contact".into())),
        [Some(r), None] | [None, Some(r)] => {
            let w = Wrench { force: total_force, torque: l_dot - (r - com).cross(&total_force) };
            if !w.within_cone(p.mu) {
                return Err(Error::DistributionInfeasible(format!(
                    "tangential force {:.3} N exceeds the friction cone",
                    total_force.xy().norm()
                )));
            }
            let mut out = [Wrench::default(); 2];
            out[if contacts[0].is_some() { 0 } else { 1 }] = w;
            Ok(out)
        }
        [Some(rl), Some(rr)] => distribute_double(com, &total_force, l_dot, [rl, rr], p),
    }
}

/// Rows of the Newton-Euler equalities over `(f_L, tau_L, f_R, tau_R)`.
pub fn newton_euler_matrix(com: &Vector3<f64>, feet: [Vector3<f64>; 2]) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(6, 12);
    for (i, r) in feet.iter().enumerate() {
        let off = 6 * i;
        let d = r - com;
        for k in 0..3 {
            e[(k, off + k)] = 1.0;
            e[(3 + k, off + 3 + k)] = 1.0;
        }
        // (r - c) x f as a matrix acting on f.
        let skew = d.cross_matrix();
        e.view_mut((3, off), (3, 3)).copy_from(&skew);
    }
    e
}

fn distribute_double(
    com: &Vector3<f64>,
    total_force: &Vector3<f64>,
    l_dot: &Vector3<f64>,
    feet: [Vector3<f64>; 2],
    p: &DistributionParams,
) -> Result<[Wrench; 2]> {
    let mut diag = DVector::zeros(12);
    for i in 0..2 {
        for k in 0..3 {
            diag[6 * i + k] = p.force_weight;
            diag[6 * i + 3 + k] = p.torque_weight;
        }
    }
    let mut qp = Qp::new(DMatrix::from_diagonal(&(diag * 2.0)), DVector::zeros(12));
    let e = newton_euler_matrix(com, feet);
    let rhs = [total_force.x, total_force.y, total_force.z, l_dot.x, l_dot.y, l_dot.z];
    for (k, b) in rhs.iter().enumerate() {
        qp.add_eq(e.row(k).transpose(), *b, "newton-euler");
    }
    let facet = p.mu / std::f64::consts::SQRT_2;
    for i in 0..2 {
        let off = 6 * i;
        let mut row = DVector::zeros(12);
        row[off + 2] = -1.0;
        qp.add_le(row, 0.0, "unilateral");
        for (axis, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
            let mut row = DVector::zeros(12);
            row[off + axis] = sign;
            row[off + 2] = -facet;
            qp.add_le(row, 0.0, "friction");
        }
    }
    let sol = match qp.solve()? {
        QpOutcome::Solved(s) => s,
        QpOutcome::Infeasible => {
            return Err(Error::DistributionInfeasible(format!(
                "conflicting constraints: {:?}",
                qp.explain_infeasibility()?
            )))
        }
    };
    let mut out = [Wrench::default(); 2];
    for (i, w) in out.iter_mut().enumerate() {
        let x = &sol.x;
        let off = 6 * i;
        w.force = Vector3::new(x[off], x[off + 1], x[off + 2].max(0.0));
        w.torque = Vector3::new(x[off + 3], x[off + 4], x[off + 5]);
        // Pull roundoff-level cone violations back onto the cone.
        let tangential = w.force.xy().norm();
        let limit = p.mu * w.force.z;
        if tangential > limit {
            let scale = if tangential > 0.0 { limit / tangential } else { 0.0 };
            w.force.x *= scale;
            w.force.y *= scale;
        }
    }
    Ok(out)
}

/// Desired state of one foot: planted, or following a swing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FootTrack {
    Stance(Vector3<f64>),
    Swing(SwingSpline),
}

impl FootTrack {
    pub fn sample(&self, t: f64) -> FootSample {
        match self {
            FootTrack::Stance(p) => FootSample::at_rest(*p),
            FootTrack::Swing(s) => s.sample(t),
        }
    }

    pub fn contact(&self) -> Option<Vector3<f64>> {
        match self {
            FootTrack::Stance(p) => Some(*p),
            FootTrack::Swing(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterfaceParams {
    pub com_height: f64,
    pub com_kp: f64,
    pub com_kd: f64,
    pub distribution: DistributionParams,
}

impl Default for InterfaceParams {
    fn default() -> Self {
        Self { com_height: 0.87, com_kp: -100.0, com_kd: -20.0, distribution: DistributionParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfaceReferences {
    pub com: TaskReference,
    pub feet: [FootSample; 2],
    pub waist_yaw: f64,
    pub wrenches: [Wrench; 2],
}

/// Bundle the task references for one control tick. The wrench targets are
/// computed from the same CoM acceleration the CoM task requests, so the two
/// never disagree.
pub fn interface_references(
    com_next: &[CentroidalState; 2],
    feet: &[FootTrack; 2],
    foot_yaw: [f64; 2],
    t: f64,
    p: &InterfaceParams,
) -> Result<InterfaceReferences> {
    let com = TaskReference {
        value: Vector3::new(com_next[0].c, com_next[1].c, p.com_height),
        rate: Vector3::new(com_next[0].c_dot, com_next[1].c_dot, 0.0),
        accel: Vector3::new(com_next[0].c_ddot, com_next[1].c_ddot, 0.0),
        kp: p.com_kp,
        kd: p.com_kd,
    };
    let wrenches = distribute_wrench(
        &com.value,
        &com.accel,
        &Vector3::zeros(),
        [feet[0].contact(), feet[1].contact()],
        &p.distribution,
    )?;
    Ok(InterfaceReferences {
        com,
        feet: [feet[0].sample(t), feet[1].sample(t)],
        waist_yaw: waist_yaw_reference(foot_yaw[0], foot_yaw[1]),
        wrenches,
    })
}

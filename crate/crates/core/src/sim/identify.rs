//! Hip stiffness identification from static single-support stances.
//!
//! Standing still, the CoP equals the CoM ground projection. For a guessed
//! pair of stiffnesses the deflection-corrected kinematics predict the CoM
//! relative to the stance foot, the sole sensor measures the CoP relative
//! to it, and the lateral mismatch vanishes only at the true stiffness of
//! the stance hip. Two stances (one per foot) pin down both hips.

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::centroidal::rotate_quarter;
use crate::error::{Error, Result};
use crate::flex::{equivalent_hip, lever_arm_correction, steady_deflection, FlexParams, FlexState, HipConfiguration};
use crate::gait::Side;
use crate::sim::body::BodyModel;
use crate::sim::plant::PlantParams;

/// CoP from the sole wrench: `p = s + S tau / f_z`.
pub fn measure_cop(sole_torque: &Vector2<f64>, normal_force: f64, foot: &Vector2<f64>) -> Result<Vector2<f64>> {
    if !(normal_force > 0.0) {
        return Err(Error::NoContact { normal: normal_force });
    }
    Ok(foot + rotate_quarter(sole_torque) / normal_force)
}

/// Standard normal sample by the Box-Muller transform.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sensor record of a static single-support stance.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticTrace {
    pub stance: Side,
    pub q: [Vector3<f64>; 2],
    pub leg_length: [f64; 2],
    pub hips: [HipConfiguration; 2],
    pub sole_torque: Vec<Vector2<f64>>,
    pub normal_force: f64,
    /// Largest CoM speed over the record.
    pub com_speed: f64,
    /// Sole torque noise level used to build the record.
    pub noise_sigma: f64,
}

impl StaticTrace {
    pub fn mean_sole_torque(&self) -> Vector2<f64> {
        self.sole_torque.iter().sum::<Vector2<f64>>() / self.sole_torque.len() as f64
    }
}

/// Simulate a static stance on one foot: settle the true deflections under
/// the static loads and record joint data and noisy sole torques.
pub fn static_stance_trace(
    plant: &PlantParams,
    stance: Side,
    samples: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<StaticTrace> {
    plant.validate()?;
    if samples == 0 {
        return Err(Error::Domain("a static trace needs at least one sample".into()));
    }
    let body = &plant.body;
    let lever = plant.lever();
    let flex = plant.flex_params()?;
    let mut feet = [Vector3::zeros(); 2];
    feet[stance.index()] = body.hip_offset(stance);
    feet[stance.other().index()] = body.hip_offset(stance.other()) + Vector3::new(0.0, 0.0, 0.05);
    let com = feet[stance.index()].xy();
    let mut weights = [0.0; 2];
    weights[stance.index()] = 1.0;

    let mut theta = [Vector2::zeros(); 2];
    let mut geom = body.solve([com.x, com.y], feet, theta, [lever; 2])?;
    if !plant.rigid {
        for _ in 0..200 {
            let loads = body.hip_loads(&geom, weights, &Vector3::zeros());
            let next = [
                -loads[0].flexing_torque(&theta[0], &lever).component_div(&flex[0].k),
                -loads[1].flexing_torque(&theta[1], &lever).component_div(&flex[1].k),
            ];
            let done = (next[0] - theta[0]).amax().max((next[1] - theta[1]).amax()) < 1e-15;
            theta = next;
            geom = body.solve([com.x, com.y], feet, theta, [lever; 2])?;
            if done {
                break;
            }
        }
    }
    let loads = body.hip_loads(&geom, weights, &Vector3::zeros());
    let hips = [
        body.hip_configuration(&geom.q[0], &Vector3::zeros(), &theta[0], &loads[0]),
        body.hip_configuration(&geom.q[1], &Vector3::zeros(), &theta[1], &loads[1]),
    ];
    let normal_force = body.total_mass * body.gravity;
    // Invert p = s + S tau / f_z; S^-1 = -S.
    let offset = geom.com.xy() - feet[stance.index()].xy();
    let exact = -rotate_quarter(&(offset * normal_force));
    let sole_torque = (0..samples)
        .map(|_| exact + Vector2::new(gaussian(rng), gaussian(rng)) * noise_sigma)
        .collect();
    Ok(StaticTrace {
        stance,
        q: geom.q,
        leg_length: geom.leg_length,
        hips,
        sole_torque,
        normal_force,
        com_speed: 0.0,
        noise_sigma,
    })
}

/// Lateral CoM-minus-CoP mismatch of one stance under guessed stiffnesses.
pub fn stance_error(trace: &StaticTrace, k: [f64; 2], plant: &PlantParams) -> Result<f64> {
    let lever = plant.lever();
    let body: &BodyModel = &plant.body;
    let params = [
        FlexParams::new(Vector2::repeat(k[0]), Vector2::zeros(), lever)?,
        FlexParams::new(Vector2::repeat(k[1]), Vector2::zeros(), lever)?,
    ];
    let mut theta = [Vector2::zeros(); 2];
    let mut q = [Vector3::zeros(); 2];
    for i in 0..2 {
        theta[i] = steady_deflection(&trace.hips[i], &params[i])?;
        q[i] = equivalent_hip(&trace.hips[i], &FlexState::at(theta[i]))?.q;
    }
    let (feet, com) = body.rigid_fk(q, trace.leg_length, [lever; 2]);
    let corrected = lever_arm_correction(theta, [&params[0], &params[1]], feet, com, [body.leg_mass; 2], body.total_mass)?;
    let foot = corrected.feet[trace.stance.index()].xy();
    let cop = measure_cop(&trace.mean_sole_torque(), trace.normal_force, &foot)?;
    Ok(corrected.com.y - cop.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessGrid {
    pub left: [f64; 2],
    pub right: [f64; 2],
    pub points: [usize; 2],
}

impl StiffnessGrid {
    /// Grid spanning `fraction` either side of a nominal pair.
    pub fn around(nominal: [f64; 2], fraction: f64, points: usize) -> Self {
        Self {
            left: [nominal[0] * (1.0 - fraction), nominal[0] * (1.0 + fraction)],
            right: [nominal[1] * (1.0 - fraction), nominal[1] * (1.0 + fraction)],
            points: [points, points],
        }
    }

    pub fn axis(&self, i: usize) -> Vec<f64> {
        let (r, n) = (if i == 0 { self.left } else { self.right }, self.points[i]);
        (0..n).map(|j| r[0] + (r[1] - r[0]) * j as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Identification {
    pub k_left: f64,
    pub k_right: f64,
    /// Two standard deviations from the sole sensor noise.
    pub uncertainty: [f64; 2],
    pub intersections: Vec<[f64; 2]>,
    #[serde(skip)]
    pub grid: [Vec<f64>; 2],
    /// Error surfaces `[experiment][i_left][i_right]`, experiments ordered
    /// left stance then right stance.
    #[serde(skip)]
    pub errors: [Vec<Vec<f64>>; 2],
}

fn bilinear(f: [f64; 4]) -> [f64; 4] {
    // f = [f00, f10, f01, f11] -> a0 + a1 u + a2 v + a3 u v
    [f[0], f[1] - f[0], f[2] - f[0], f[3] - f[1] - f[2] + f[0]]
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if a.abs() <= 1e-12 * scale {
        return if b != 0.0 { vec![-c / b] } else { Vec::new() };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = vec![q / a];
    if q != 0.0 {
        roots.push(c / q);
    }
    roots
}

/// Common zeros of two bilinear patches on the unit square, as `(u, v)`.
pub fn cell_intersections(first: [f64; 4], second: [f64; 4]) -> Vec<[f64; 2]> {
    const TOL: f64 = 1e-9;
    let a = bilinear(first);
    let b = bilinear(second);
    // From a0 + a1 u + a2 v + a3 u v = 0: u = -(a0 + a2 v) / (a1 + a3 v).
    let roots = quadratic_roots(
        b[2] * a[3] - b[3] * a[2],
        b[0] * a[3] - b[1] * a[2] + b[2] * a[1] - b[3] * a[0],
        b[0] * a[1] - b[1] * a[0],
    );
    let mut out = Vec::new();
    for v in roots {
        if !(-TOL..=1.0 + TOL).contains(&v) {
            continue;
        }
        let den = a[1] + a[3] * v;
        if den.abs() < 1e-300 {
            continue;
        }
        let u = -(a[0] + a[2] * v) / den;
        if (-TOL..=1.0 + TOL).contains(&u) {
            out.push([u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]);
        }
    }
    out
}

/// Grid search for the stiffness pair zeroing both stance errors.
pub fn identify_stiffness(
    experiments: [&StaticTrace; 2],
    grid: &StiffnessGrid,
    plant: &PlantParams,
) -> Result<Identification> {
    if grid.points.iter().any(|&n| n < 2) {
        return Err(Error::Domain("the stiffness grid needs at least 2 points per axis".into()));
    }
    for e in &experiments {
        if !(e.com_speed < 1e-3) {
            return Err(Error::Domain(format!("stance trace is not static (CoM speed {} m/s)", e.com_speed)));
        }
        if e.sole_torque.is_empty() {
            return Err(Error::Domain("stance trace has no samples".into()));
        }
    }
    let axes = [grid.axis(0), grid.axis(1)];
    let mut errors = [Vec::new(), Vec::new()];
    for (e, trace) in experiments.iter().enumerate() {
        for &kl in &axes[0] {
            let row = axes[1].iter().map(|&kr| stance_error(trace, [kl, kr], plant)).collect::<Result<Vec<_>>>()?;
            errors[e].push(row);
        }
    }

    let mut found: Vec<([f64; 2], Matrix2<f64>)> = Vec::new();
    for i in 0..axes[0].len() - 1 {
        for j in 0..axes[1].len() - 1 {
            let corners = |s: &Vec<Vec<f64>>| [s[i][j], s[i + 1][j], s[i][j + 1], s[i + 1][j + 1]];
            let (c0, c1) = (corners(&errors[0]), corners(&errors[1]));
            let (hl, hr) = (axes[0][i + 1] - axes[0][i], axes[1][j + 1] - axes[1][j]);
            for [u, v] in cell_intersections(c0, c1) {
                let k = [axes[0][i] + u * hl, axes[1][j] + v * hr];
                if found.iter().any(|(p, _)| (p[0] - k[0]).abs() < 1e-6 && (p[1] - k[1]).abs() < 1e-6) {
                    continue;
                }
                let (a, b) = (bilinear(c0), bilinear(c1));
                let jac = Matrix2::new(
                    (a[1] + a[3] * v) / hl,
                    (a[2] + a[3] * u) / hr,
                    (b[1] + b[3] * v) / hl,
                    (b[2] + b[3] * u) / hr,
                );
                found.push((k, jac));
            }
        }
    }

    if found.is_empty() {
        let mut best = (f64::INFINITY, [0.0; 2]);
        for (i, &kl) in axes[0].iter().enumerate() {
            for (j, &kr) in axes[1].iter().enumerate() {
                let r = errors[0][i][j].abs().max(errors[1][i][j].abs());
                if r < best.0 {
                    best = (r, [kl, kr]);
                }
            }
        }
        return Err(Error::IdentificationFailed { k_left: best.1[0], k_right: best.1[1], residual: best.0 });
    }

    let center = [0.5 * (grid.left[0] + grid.left[1]), 0.5 * (grid.right[0] + grid.right[1])];
    let (k, jac) = *found
        .iter()
        .min_by(|a, b| {
            let d = |p: &[f64; 2]| ((p[0] - center[0]) / center[0]).powi(2) + ((p[1] - center[1]) / center[1]).powi(2);
            d(&a.0).total_cmp(&d(&b.0))
        })
        .unwrap();
    let sigma = Vector2::new(
        experiments[0].noise_sigma / experiments[0].normal_force / (experiments[0].sole_torque.len() as f64).sqrt(),
        experiments[1].noise_sigma / experiments[1].normal_force / (experiments[1].sole_torque.len() as f64).sqrt(),
    );
    let uncertainty = match jac.try_inverse() {
        Some(inv) => {
            let cov = inv * Matrix2::from_diagonal(&sigma.component_mul(&sigma)) * inv.transpose();
            [2.0 * cov[(0, 0)].sqrt(), 2.0 * cov[(1, 1)].sqrt()]
        }
        None => [f64::INFINITY; 2],
    };
    Ok(Identification {
        k_left: k[0],
        k_right: k[1],
        uncertainty,
        intersections: found.iter().map(|(p, _)| *p).collect(),
        grid: axes,
        errors,
    })
}

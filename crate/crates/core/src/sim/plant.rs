use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::centroidal::{input, transition, CentroidalState};
use crate::error::{Error, Result};
use crate::flex::{FlexParams, FlexState};
use crate::gait::{PhaseKind, SupportPhase};
use crate::sim::body::{BodyModel, HipLoad};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub sim_dt: f64,
    /// Effective inertia seen by each deflection (kg*m^2).
    pub inertia: f64,
    /// Hip stiffness (left, right) in N*m/rad, same about both axes.
    pub stiffness: [f64; 2],
    /// Hip damping (left, right); defaults to `2 sqrt(k)`.
    #[serde(default)]
    pub damping: Option<[f64; 2]>,
    pub lever: [f64; 3],
    pub foot_half_length: f64,
    pub foot_half_width: f64,
    /// Longest reach of a loaded leg; beyond it the robot is falling.
    pub max_leg_length: f64,
    /// Infinitely stiff hips.
    #[serde(default)]
    pub rigid: bool,
    pub body: BodyModel,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            sim_dt: 2.5e-4,
            inertia: 1.0,
            stiffness: [2180.0, 4900.0],
            damping: None,
            lever: [0.0, 0.0, 0.09],
            foot_half_length: 0.11,
            foot_half_width: 0.07,
            max_leg_length: 1.1,
            rigid: false,
            body: BodyModel::default(),
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_dt > 0.0 && self.sim_dt <= 1e-3) {
            return Err(Error::Config(format!("plant.sim_dt: must lie in (0, 1e-3], got {}", self.sim_dt)));
        }
        if !(self.inertia > 0.0) {
            return Err(Error::Config("plant.inertia: must be positive".into()));
        }
        if !(self.foot_half_length > 0.0 && self.foot_half_width > 0.0) {
            return Err(Error::Config("plant.foot_half_length: foot dimensions must be positive".into()));
        }
        if !(self.max_leg_length > 0.0) {
            return Err(Error::Config("plant.max_leg_length: must be positive".into()));
        }
        self.body.validate()?;
        self.flex_params().map_err(|e| Error::Config(format!("plant.stiffness: {e}")))?;
        Ok(())
    }

    pub fn lever(&self) -> Vector3<f64> {
        Vector3::from(self.lever)
    }

    /// Spring-damper parameters of the (left, right) hips.
    pub fn flex_params(&self) -> Result<[FlexParams; 2]> {
        let d = self.damping.unwrap_or([2.0 * self.stiffness[0].max(0.0).sqrt(), 2.0 * self.stiffness[1].max(0.0).sqrt()]);
        Ok([
            FlexParams::new(Vector2::repeat(self.stiffness[0]), Vector2::repeat(d[0]), self.lever())?,
            FlexParams::new(Vector2::repeat(self.stiffness[1]), Vector2::repeat(d[1]), self.lever())?,
        ])
    }

    /// Time constant `d / k` of the slower hip.
    pub fn time_constant(&self) -> Result<f64> {
        let p = self.flex_params()?;
        Ok(p.iter().map(|f| f.d.x / f.k.x).fold(0.0, f64::max))
    }

    pub fn half_dim(&self, axis: usize) -> f64 {
        if axis == 0 { self.foot_half_length } else { self.foot_half_width }
    }
}

/// Flexible linear inverted pendulum: exact centroidal triple integrator
/// driven by the commanded jerk plus disturbance, and spring-damper hip
/// deflections driven by the hip loads.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexibleLipPlant {
    pub params: PlantParams,
    flex: [FlexParams; 2],
    pub time: f64,
    pub com: [CentroidalState; 2],
    /// True deflection and its rate.
    pub deflection: [FlexState; 2],
    pub support: SupportPhase,
    pub bias: [f64; 2],
    pub omega_sq: f64,
    pub cop: [f64; 2],
    pub fell: bool,
}

impl FlexibleLipPlant {
    pub fn new(params: PlantParams, com: [CentroidalState; 2], support: SupportPhase, omega_sq: f64) -> Result<Self> {
        params.validate()?;
        let flex = params.flex_params()?;
        let mut plant = Self {
            params,
            flex,
            time: 0.0,
            com,
            deflection: [FlexState::default(); 2],
            support,
            bias: [0.0; 2],
            omega_sq,
            cop: [0.0; 2],
            fell: false,
        };
        plant.update_cop();
        Ok(plant)
    }

    pub fn flex(&self) -> &[FlexParams; 2] {
        &self.flex
    }

    pub fn theta(&self) -> [Vector2<f64>; 2] {
        [self.deflection[0].theta, self.deflection[1].theta]
    }

    /// Elastic plus kinetic energy of the deflection of hip `i`.
    pub fn deflection_energy(&self, i: usize) -> f64 {
        let s = &self.deflection[i];
        let k = self.flex[i].k;
        0.5 * (k.x * s.theta.x * s.theta.x + k.y * s.theta.y * s.theta.y) + 0.5 * self.params.inertia * s.theta_dot.norm_squared()
    }

    /// Advance one controller period.
    pub fn step(&mut self, jerk: [f64; 2], loads: &[HipLoad; 2], disturbance: [f64; 2], period: f64) -> Result<()> {
        if !disturbance.iter().chain(jerk.iter()).all(|v| v.is_finite()) {
            return Err(Error::BlowUp { time: self.time });
        }
        let subs = (period / self.params.sim_dt).ceil().max(1.0) as usize;
        let dt = period / subs as f64;
        let (a, b) = (transition(dt), input(dt));
        let lever = self.params.lever();
        let j_eff = self.params.inertia;
        for _ in 0..subs {
            if !self.params.rigid {
                for (i, load) in loads.iter().enumerate() {
                    let p = &self.flex[i];
                    let s = &mut self.deflection[i];
                    let tau = load.flexing_torque(&s.theta, &lever);
                    // Implicit in the spring and damper, explicit in the load.
                    for ax in 0..2 {
                        let (k, d) = (p.k[ax], p.d[ax]);
                        let v = (s.theta_dot[ax] + dt * (-tau[ax] - k * s.theta[ax]) / j_eff)
                            / (1.0 + dt * d / j_eff + dt * dt * k / j_eff);
                        s.theta_prev[ax] = s.theta[ax];
                        s.theta_dot[ax] = v;
                        s.theta[ax] += dt * v;
                    }
                }
            }
            for axis in 0..2 {
                let u = jerk[axis] + disturbance[axis];
                self.com[axis] = CentroidalState::from_vector(&(a * self.com[axis].to_vector() + b * u));
            }
        }
        self.time += period;
        let finite = self.com.iter().all(CentroidalState::is_finite)
            && self.deflection.iter().all(|s| s.theta.iter().chain(s.theta_dot.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::BlowUp { time: self.time });
        }
        for s in &self.deflection {
            s.check().map_err(|e| e.at(self.time, "plant deflection"))?;
        }
        self.update_cop();
        Ok(())
    }

    fn update_cop(&mut self) {
        for axis in 0..2 {
            let x = &self.com[axis];
            self.cop[axis] = x.c - x.c_ddot / self.omega_sq + self.bias[axis];
        }
        if !self.cop_inside(&self.support) {
            self.fell = true;
        }
    }

    pub fn cop_inside(&self, phase: &SupportPhase) -> bool {
        (0..2).all(|axis| {
            let h = self.params.half_dim(axis);
            let (lo, hi) = phase.feet.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                (lo.min(f.position[axis] - h), hi.max(f.position[axis] + h))
            });
            self.cop[axis] >= lo - 1e-9 && self.cop[axis] <= hi + 1e-9
        })
    }

    /// Set the contact state for the next period and check the CoP against it.
    pub fn set_support(&mut self, phase: SupportPhase) {
        debug_assert!(phase.kind != PhaseKind::Single || phase.feet.len() == 1);
        self.support = phase;
        if !self.cop_inside(&self.support) {
            self.fell = true;
        }
    }

    /// Deflection equilibrium under constant loads, `theta = -tau(theta) / k`.
    pub fn static_deflection(&self, loads: &[HipLoad; 2]) -> [Vector2<f64>; 2] {
        if self.params.rigid {
            return [Vector2::zeros(); 2];
        }
        let lever = self.params.lever();
        let mut out = [Vector2::zeros(); 2];
        for i in 0..2 {
            let mut theta = Vector2::zeros();
            for _ in 0..100 {
                let next = -loads[i].flexing_torque(&theta, &lever).component_div(&self.flex[i].k);
                let done = (next - theta).amax() < 1e-15;
                theta = next;
                if done {
                    break;
                }
            }
            out[i] = theta;
        }
        out
    }
}

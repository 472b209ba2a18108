//! Scenario configuration, read from TOML. Every section is optional and
//! falls back to the defaults below; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::{GaitConfig, Side};
use crate::sim::plant::PlantParams;
use crate::wholebody::InterfaceParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    WalkInPlace,
    QuasiStatic,
    DynamicWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceModel {
    None,
    Uniform,
    BangBang,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub estimator: bool,
    /// Replan online; otherwise play back a precomputed reference.
    pub mpc: bool,
    /// Simulated time after the last step (s).
    pub settle_time: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { kind: ScenarioKind::DynamicWalk, seed: 0, estimator: true, mpc: true, settle_time: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSection {
    /// Aimed forward speed of the steady segment (m/s).
    pub speed: f64,
    /// Steps over which the aimed speed grows linearly to `speed`.
    pub ramp_steps: usize,
    pub steady_steps: usize,
    /// Steps taken after the aimed speed drops to zero.
    pub stop_steps: usize,
    /// Number of steps of the walk-in-place scenario.
    pub in_place_steps: usize,
    pub first_swing: Side,
    /// Double support before the first lift-off (s); rounded up to a
    /// multiple of the replanning period.
    pub initial_double_support: f64,
    /// Replanning period (s).
    pub replan_period: f64,
}

impl Default for WalkSection {
    fn default() -> Self {
        Self {
            speed: 0.25,
            ramp_steps: 8,
            steady_steps: 4,
            stop_steps: 2,
            in_place_steps: 6,
            first_swing: Side::Right,
            initial_double_support: 0.6,
            replan_period: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuasiStaticSection {
    pub step_length: f64,
    pub steps: usize,
    /// Double-support CoM transfer time (s).
    pub transfer: f64,
    /// Single-support hold time (s).
    pub hold: f64,
    /// Lateral CoM offset toward the inner foot edge, applied only when the
    /// deflection estimator is off (m).
    pub inward_offset: f64,
}

impl Default for QuasiStaticSection {
    fn default() -> Self {
        Self { step_length: 0.1, steps: 4, transfer: 2.0, hold: 1.2, inward_offset: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizerSection {
    pub period: f64,
    /// VRP safety margins (x, y) in m; each fixes the disturbance the tube
    /// absorbs on that axis.
    pub margin: [f64; 2],
    /// Disturbance level for gain tuning and reported bounds (m/s^3).
    pub d_max: f64,
    /// Feedback row. The default is a moderate gain: one fast real pole and
    /// a slow, lightly damped pair. The VRP-optimal gain is two orders of
    /// magnitude larger and amplifies estimation noise accordingly.
    pub gain: [f64; 3],
    /// Use the gain minimizing the VRP bound at `d_max` instead of `gain`.
    pub search_gain: bool,
}

impl Default for StabilizerSection {
    fn default() -> Self {
        Self {
            period: 0.002,
            margin: [0.025, 0.015],
            d_max: 1000.0,
            gain: [-9894.0, -4189.0, -496.0],
            search_gain: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    /// Deflection-rate low-pass cutoff (Hz).
    pub lpf_cutoff: f64,
    /// Hip stiffness assumed by the controller (left, right); the plant's
    /// when absent.
    pub stiffness: Option<[f64; 2]>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self { lpf_cutoff: 20.0, stiffness: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSection {
    pub model: DisturbanceModel,
    /// Per-axis jerk disturbance amplitude (m/s^3); the level each margin
    /// absorbs when absent.
    pub magnitude: Option<[f64; 2]>,
    /// Bang-bang sign holding time (s).
    pub switch_period: f64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self { model: DisturbanceModel::None, magnitude: None, switch_period: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationSection {
    pub samples: usize,
    /// Sole torque noise standard deviation (N*m).
    pub noise_sigma: f64,
    pub grid_points: usize,
    /// Grid half-span relative to the center.
    pub span: f64,
    /// Grid center (left, right); the plant stiffness when absent.
    pub center: Option<[f64; 2]>,
}

impl Default for IdentificationSection {
    fn default() -> Self {
        Self { samples: 1000, noise_sigma: 0.5, grid_points: 30, span: 0.5, center: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub walk: WalkSection,
    pub quasi_static: QuasiStaticSection,
    pub gait: GaitConfig,
    pub stabilizer: StabilizerSection,
    pub estimator: EstimatorSection,
    pub disturbance: DisturbanceSection,
    pub plant: PlantParams,
    pub interface: InterfaceParams,
    pub identification: IdentificationSection,
}

fn check(ok: bool, key: &str, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {what}")))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        check(s.settle_time >= 0.0 && s.settle_time.is_finite(), "scenario.settle_time", "must be >= 0")?;

        let w = &self.walk;
        check(w.speed.is_finite() && w.speed >= 0.0, "walk.speed", "must be >= 0")?;
        check(w.ramp_steps >= 1, "walk.ramp_steps", "must be >= 1")?;
        check(positive(w.replan_period), "walk.replan_period", "must be positive")?;
        check(w.initial_double_support >= 0.0, "walk.initial_double_support", "must be >= 0")?;

        let q = &self.quasi_static;
        check(q.step_length.is_finite(), "quasi_static.step_length", "must be finite")?;
        check(positive(q.transfer), "quasi_static.transfer", "must be positive")?;
        check(positive(q.hold), "quasi_static.hold", "must be positive")?;
        check(
            q.inward_offset >= 0.0 && q.inward_offset < self.gait.foot_half_width,
            "quasi_static.inward_offset",
            "must lie in [0, foot_half_width)",
        )?;

        self.gait.validate()?;

        let st = &self.stabilizer;
        check(positive(st.period), "stabilizer.period", "must be positive")?;
        let ratio = self.gait.mpc_period / st.period;
        check(
            (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0,
            "stabilizer.period",
            "must divide gait.mpc_period",
        )?;
        let replan = w.replan_period / self.gait.mpc_period;
        check(
            (replan - replan.round()).abs() < 1e-9 && replan.round() >= 1.0,
            "walk.replan_period",
            "must be a multiple of gait.mpc_period",
        )?;
        check(
            w.replan_period < self.gait.horizon as f64 * self.gait.mpc_period,
            "walk.replan_period",
            "must be shorter than the planning horizon",
        )?;
        for axis in 0..2 {
            check(
                st.margin[axis] > 0.0 && st.margin[axis] < self.gait.half_dim(axis),
                "stabilizer.margin",
                "each margin must lie in (0, foot half dimension)",
            )?;
        }
        check(positive(st.d_max), "stabilizer.d_max", "must be positive")?;
        check(st.gain.iter().all(|v| v.is_finite()), "stabilizer.gain", "must be finite")?;

        check(self.estimator.lpf_cutoff >= 0.0, "estimator.lpf_cutoff", "must be >= 0 (0 disables filtering)")?;
        if let Some(k) = self.estimator.stiffness {
            check(k.iter().all(|v| positive(*v)), "estimator.stiffness", "must be positive")?;
        }

        let d = &self.disturbance;
        if let Some(m) = d.magnitude {
            check(m.iter().all(|v| *v >= 0.0 && v.is_finite()), "disturbance.magnitude", "must be >= 0")?;
        }
        check(positive(d.switch_period), "disturbance.switch_period", "must be positive")?;

        self.plant.validate()?;

        let i = &self.interface;
        check(positive(i.com_height), "interface.com_height", "must be positive")?;
        check(positive(i.distribution.mass), "interface.distribution.mass", "must be positive")?;
        check(i.distribution.mu > 0.0, "interface.distribution.mu", "must be positive")?;

        let id = &self.identification;
        check(id.samples >= 1, "identification.samples", "must be >= 1")?;
        check(id.noise_sigma >= 0.0, "identification.noise_sigma", "must be >= 0")?;
        check(id.grid_points >= 2, "identification.grid_points", "must be >= 2")?;
        check(id.span > 0.0 && id.span < 1.0, "identification.span", "must lie in (0, 1)")?;
        if let Some(c) = id.center {
            check(c.iter().all(|v| positive(*v)), "identification.center", "must be positive")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ScenarioConfig::from_toml("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.stabilizer.margin, [0.025, 0.015]);
        assert_eq!(cfg.walk.replan_period, 0.2);
        assert_eq!(cfg.stabilizer.period, 0.002);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ScenarioConfig::default();
        cfg.stabilizer.gain = [-1.0, -2.0, -3.0];
        cfg.scenario.kind = ScenarioKind::QuasiStatic;
        cfg.disturbance.model = DisturbanceModel::BangBang;
        cfg.plant.rigid = true;
        let back = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ScenarioConfig::from_toml("[plant]\nstifness = [1.0, 2.0]\n").unwrap_err();
        assert!(err.to_string().contains("stifness"), "{err}");
        let err = ScenarioConfig::from_toml("[bogus]\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_value_is_named() {
        let err = ScenarioConfig::from_toml("[stabilizer]\nmargin = [0.2, 0.015]\n").unwrap_err();
        assert!(err.to_string().contains("stabilizer.margin"), "{err}");
        let err = ScenarioConfig::from_toml("[plant]\nsim_dt = 0.01\n").unwrap_err();
        assert!(err.to_string().contains("plant.sim_dt"), "{err}");
        let err = ScenarioConfig::from_toml("[gait]\nhorizon = 0\n").unwrap_err();
        assert!(err.to_string().contains("gait.horizon"), "{err}");
        let err = ScenarioConfig::from_toml("[scenario]\nkind = \"moonwalk\"\n").unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");
    }
}

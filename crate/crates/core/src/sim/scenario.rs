//! Closed-loop walking scenarios: planner, stabilizer, deflection estimator
//! and interface driving the flexible plant.

use nalgebra::{Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::centroidal::{input, transition, CentroidalState, SystemMatrices};
use crate::config::{DisturbanceModel, ScenarioConfig, ScenarioKind};
use crate::error::{Error, Result};
use crate::flex::{
    approx_flex_torque, equivalent_hip, estimate_deflection, lever_arm_correction, lpf_gain, steady_deflection, FlexParams,
    FlexState, HipConfiguration,
};
use crate::gait::{
    plan, replan_shift, support_interval, Foothold, GaitConfig, GaitSchedule, PhaseKind, PlanContext,
    ReferencePlan, ReferenceSample, Side, Slot, SupportPhase,
};
use crate::sim::body::{BodyModel, Geometry};
use crate::sim::identify::{identify_stiffness, static_stance_trace, Identification, StiffnessGrid};
use crate::sim::plant::FlexibleLipPlant;
use crate::sim::profile::{bound_at, error_duration_profile, fraction_below};
use crate::sim::trace::{Contact, SimTrace, TraceRow};
use crate::tube::{
    nelder_mead, optimize_gain, saturation_limits, stabilize_step, DisturbanceBound, GainSearch, SaturationLimits,
    TubeGain, DEFAULT_TAIL_TOL,
};
use crate::wholebody::{interface_references, swing_spline, FootTrack, SwingSpline};

const EPS: f64 = 1e-9;

/// `omega^2 = g / z_c` of the configured robot.
pub fn omega_sq(cfg: &ScenarioConfig) -> f64 {
    cfg.plant.body.gravity / cfg.interface.com_height
}

pub fn stabilizer_system(cfg: &ScenarioConfig) -> Result<SystemMatrices> {
    SystemMatrices::new(cfg.stabilizer.period, omega_sq(cfg))
}

/// Feedback gain search at the configured disturbance level.
pub fn tune_gain(cfg: &ScenarioConfig) -> Result<GainSearch> {
    let sys = stabilizer_system(cfg)?;
    optimize_gain(&sys, DisturbanceBound::new(cfg.stabilizer.d_max)?, None, nelder_mead::Options::default())
}

/// The configured gain certified at `d_max`, or the searched one.
pub fn controller_gain(cfg: &ScenarioConfig) -> Result<TubeGain> {
    let sys = stabilizer_system(cfg)?;
    if cfg.stabilizer.search_gain {
        Ok(tune_gain(cfg)?.gain)
    } else {
        TubeGain::certify(cfg.stabilizer.gain, &sys, DisturbanceBound::new(cfg.stabilizer.d_max)?, DEFAULT_TAIL_TOL)
    }
}

/// Static stances on each foot followed by the grid identification.
pub fn run_identification(cfg: &ScenarioConfig) -> Result<Identification> {
    cfg.validate()?;
    let id = &cfg.identification;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scenario.seed);
    let left = static_stance_trace(&cfg.plant, Side::Left, id.samples, id.noise_sigma, &mut rng)?;
    let right = static_stance_trace(&cfg.plant, Side::Right, id.samples, id.noise_sigma, &mut rng)?;
    let center = id.center.unwrap_or(cfg.plant.stiffness);
    let grid = StiffnessGrid {
        left: [center[0] * (1.0 - id.span), center[0] * (1.0 + id.span)],
        right: [center[1] * (1.0 - id.span), center[1] * (1.0 + id.span)],
        points: [id.grid_points; 2],
    };
    identify_stiffness([&left, &right], &grid, &cfg.plant)
}

/// Foot trajectories: initial placements plus the swings decided so far.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FootPlan {
    pub initial: [Vector3<f64>; 2],
    pub swings: Vec<(Side, SwingSpline)>,
}

impl FootPlan {
    pub fn tracks(&self, t: f64) -> [FootTrack; 2] {
        let mut out = [FootTrack::Stance(self.initial[0]), FootTrack::Stance(self.initial[1])];
        for (side, s) in &self.swings {
            if t >= s.end() - EPS {
                out[side.index()] = FootTrack::Stance(s.to);
            } else if t >= s.start - EPS {
                out[side.index()] = FootTrack::Swing(*s);
            }
        }
        out
    }
}

/// Aimed velocity over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AimProfile {
    Constant([f64; 2]),
    /// Linear growth over `ramp` steps, `steady` steps at `speed`, then zero.
    Ramp { speed: f64, ramp: usize, steady: usize },
}

impl AimProfile {
    fn at(&self, t: f64, schedule: &GaitSchedule, cfg: &GaitConfig) -> [f64; 2] {
        match *self {
            AimProfile::Constant(v) => v,
            AimProfile::Ramp { speed, ramp, steady } => {
                let j = ((t - schedule.origin) / cfg.step_duration + EPS).floor().max(0.0) as usize;
                let v = if j < ramp {
                    speed * (j + 1) as f64 / ramp as f64
                } else if j < ramp + steady {
                    speed
                } else {
                    0.0
                };
                [v, 0.0]
            }
        }
    }
}

/// Online reference: replans periodically from the current reference state.
/// A landing is frozen by the last plan made before its lift-off.
pub struct Walker {
    cfg: GaitConfig,
    schedule: GaitSchedule,
    sys: SystemMatrices,
    margin: [f64; 2],
    aim: AimProfile,
    replan_period: f64,
    initial: [CentroidalState; 2],
    plan: Option<ReferencePlan>,
    next_replan: f64,
    feet: [[f64; 2]; 2],
    /// Frozen landings not yet lifted off, and pinned ones from the start.
    pinned: Vec<(usize, [f64; 2])>,
    prescribed: bool,
    swing: Option<(usize, [f64; 2])>,
    pub foot_plan: FootPlan,
    pub replans: usize,
    pub max_kkt_residual: f64,
}

impl Walker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: GaitConfig,
        schedule: GaitSchedule,
        sys: SystemMatrices,
        margin: [f64; 2],
        aim: AimProfile,
        replan_period: f64,
        initial: [CentroidalState; 2],
        feet: [[f64; 2]; 2],
        prescribed: Vec<(usize, [f64; 2])>,
    ) -> Self {
        let prescribed_any = !prescribed.is_empty();
        Self {
            cfg,
            schedule,
            sys,
            margin,
            aim,
            replan_period,
            initial,
            plan: None,
            next_replan: 0.0,
            feet,
            pinned: prescribed,
            prescribed: prescribed_any,
            swing: None,
            foot_plan: FootPlan {
                initial: [Vector3::new(feet[0][0], feet[0][1], 0.0), Vector3::new(feet[1][0], feet[1][1], 0.0)],
                swings: Vec::new(),
            },
            replans: 0,
            max_kkt_residual: 0.0,
        }
    }

    fn replan(&mut self, t: f64) -> Result<()> {
        let x0 = match &self.plan {
            Some(p) => replan_shift(p, t - p.start)?.state,
            None => self.initial,
        };
        let ctx = PlanContext {
            time: t,
            schedule: self.schedule,
            feet: self.feet,
            swing_landing: self.swing.map(|s| s.1),
            pinned: self.pinned.clone(),
        };
        let aim = self.aim.at(t, &self.schedule, &self.cfg);
        let p = plan(&x0, aim, &ctx, &self.cfg, self.margin, [0.0; 2], &self.sys)?;
        self.replans += 1;
        self.max_kkt_residual = self.max_kkt_residual.max(p.kkt_residual);
        // Freeze every landing lifting off before the next replan.
        for step in &p.footsteps {
            let frozen = self.pinned.iter().any(|(j, _)| *j == step.step) || self.swing.is_some_and(|s| s.0 == step.step);
            if !frozen && step.lift_off < t + self.replan_period - EPS {
                self.pinned.push((step.step, step.position));
            }
        }
        self.plan = Some(p);
        self.next_replan = t + self.replan_period;
        Ok(())
    }

    /// Reference at `t`; calls must come in non-decreasing time order.
    pub fn sample(&mut self, t: f64) -> Result<ReferenceSample> {
        if let Some((j, landing)) = self.swing {
            if t >= self.schedule.touchdown(j, &self.cfg) - EPS {
                self.feet[self.schedule.swing_side(j).index()] = landing;
                self.swing = None;
            }
        }
        if self.plan.is_none() || t >= self.next_replan - EPS {
            self.replan(t).map_err(|e| e.at(t, "replanning"))?;
        }
        if self.swing.is_none() {
            if let Slot::Single { step } = self.schedule.slot_at(t, &self.cfg) {
                let pos = self.pinned.iter().position(|(j, _)| *j == step).ok_or_else(|| {
                    Error::Domain(format!("step {step} lifted off without a frozen landing")).at(t, "walking")
                })?;
                let (_, landing) = self.pinned[pos];
                if !self.prescribed {
                    self.pinned.remove(pos);
                }
                let side = self.schedule.swing_side(step);
                let from = self.feet[side.index()];
                let spline = swing_spline(
                    Vector3::new(from[0], from[1], 0.0),
                    Vector3::new(landing[0], landing[1], 0.0),
                    self.schedule.step_start(step, &self.cfg),
                    self.cfg.single_support(),
                    self.cfg.swing_apex,
                    self.cfg.max_swing_speed,
                )
                .map_err(|e| e.at(t, "swing"))?;
                self.foot_plan.swings.push((side, spline));
                self.swing = Some((step, landing));
            }
        }
        let p = self.plan.as_ref().expect("plan exists after replanning");
        replan_shift(p, t - p.start).map_err(|e| e.at(t, "reference"))
    }

    pub fn phase_at(&self, t: f64) -> Result<SupportPhase> {
        self.plan
            .as_ref()
            .and_then(|p| p.phase_at(t))
            .cloned()
            .ok_or_else(|| Error::Domain(format!("no support phase at t={t}")))
    }
}

/// Precomputed reference, one sample per stabilizer tick.
pub struct Playback {
    pub samples: Vec<ReferenceSample>,
    pub foot_plan: FootPlan,
}

pub enum ReferenceSource {
    Online(Box<Walker>),
    Playback(Playback),
}

impl ReferenceSource {
    fn sample(&mut self, k: usize, t: f64) -> Result<ReferenceSample> {
        match self {
            ReferenceSource::Online(w) => w.sample(t),
            ReferenceSource::Playback(p) => p
                .samples
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Domain(format!("reference ends before t={t}"))),
        }
    }

    fn phase_at(&self, k: usize, t: f64) -> Result<SupportPhase> {
        match self {
            ReferenceSource::Online(w) => w.phase_at(t),
            ReferenceSource::Playback(p) => p
                .samples
                .get(k)
                .map(|s| s.phase.clone())
                .ok_or_else(|| Error::Domain(format!("reference ends before t={t}"))),
        }
    }

    fn foot_plan(&self) -> &FootPlan {
        match self {
            ReferenceSource::Online(w) => &w.foot_plan,
            ReferenceSource::Playback(p) => &p.foot_plan,
        }
    }
}

fn playback_from_walker(mut walker: Walker, ticks: usize, period: f64) -> Result<Playback> {
    let samples = (0..=ticks).map(|k| walker.sample(k as f64 * period)).collect::<Result<Vec<_>>>()?;
    Ok(Playback { samples, foot_plan: walker.foot_plan })
}

/// Everything the scenario kinds share once the reference is laid out.
struct Layout {
    gait: GaitConfig,
    schedule: GaitSchedule,
    feet: [[f64; 2]; 2],
    /// Time at which the last step is complete.
    walk_end: f64,
}

fn initial_feet(cfg: &ScenarioConfig) -> [[f64; 2]; 2] {
    let w = cfg.plant.body.hip_half_width;
    [[0.0, w], [0.0, -w]]
}

fn walking_layout(cfg: &ScenarioConfig, steps: usize) -> Layout {
    let r = cfg.walk.replan_period;
    let origin = (cfg.walk.initial_double_support / r - EPS).ceil().max(0.0) * r;
    let schedule = GaitSchedule { origin, first_swing: cfg.walk.first_swing, steps: Some(steps) };
    let walk_end = schedule.step_start(steps, &cfg.gait);
    Layout { gait: cfg.gait, schedule, feet: initial_feet(cfg), walk_end }
}

fn quasi_static_layout(cfg: &ScenarioConfig) -> Layout {
    let q = &cfg.quasi_static;
    let gait = GaitConfig { step_duration: q.hold + q.transfer, ss_fraction: q.hold / (q.hold + q.transfer), ..cfg.gait };
    let schedule = GaitSchedule { origin: q.transfer, first_swing: cfg.walk.first_swing, steps: Some(q.steps) };
    let walk_end = schedule.step_start(q.steps, &gait) + q.transfer;
    Layout { gait, schedule, feet: initial_feet(cfg), walk_end }
}

/// Landings of the quasi-static walk: each one `step_length` ahead of the
/// stance foot.
fn quasi_static_landings(cfg: &ScenarioConfig, layout: &Layout) -> Vec<(usize, [f64; 2])> {
    let mut feet = layout.feet;
    (0..cfg.quasi_static.steps)
        .map(|j| {
            let side = layout.schedule.swing_side(j);
            let stance = feet[side.other().index()];
            feet[side.index()] = [stance[0] + cfg.quasi_static.step_length, feet[side.index()][1]];
            (j, feet[side.index()])
        })
        .collect()
}

/// Support phase of a fixed schedule with known landings.
fn schedule_phase(layout: &Layout, landings: &[(usize, [f64; 2])], t: f64, end: f64) -> SupportPhase {
    let cfg = &layout.gait;
    let sched = &layout.schedule;
    let slot = sched.slot_at(t, cfg);
    let mut feet = layout.feet;
    for (j, p) in landings {
        if sched.touchdown(*j, cfg) <= t + EPS {
            feet[sched.swing_side(*j).index()] = *p;
        }
    }
    let (start, stop) = sched.slot_span(slot, cfg);
    let start = if start.is_finite() { start } else { 0.0 };
    let stop = if stop.is_finite() { stop } else { end.max(start + cfg.step_duration) };
    let hold = |side: Side| Foothold { side, position: feet[side.index()] };
    match slot {
        Slot::Single { step } => SupportPhase::single(hold(sched.swing_side(step).other()), start, stop - start),
        Slot::Double { .. } => SupportPhase::double(hold(Side::Left), hold(Side::Right), start, stop - start),
    }
}

/// Rest-to-rest S-curve: jerk `+J, -J, -J, +J` over four equal quarters with
/// `J = 32 D / tau^3`.
fn s_curve_jerk(t: f64, t0: f64, tau: f64, distance: f64) -> f64 {
    let s = t - t0;
    if s < 0.0 || s >= tau {
        return 0.0;
    }
    let j = 32.0 * distance / tau.powi(3);
    match (4.0 * s / tau).floor() as usize {
        0 | 3 => j,
        _ => -j,
    }
}

fn quasi_static_playback(cfg: &ScenarioConfig, layout: &Layout, ticks: usize, period: f64) -> Result<Playback> {
    let q = &cfg.quasi_static;
    let landings = quasi_static_landings(cfg, layout);
    let sched = &layout.schedule;
    let offset = if cfg.scenario.estimator { 0.0 } else { q.inward_offset };

    // CoM targets: over each stance foot, then between the final feet.
    let mut targets = Vec::new();
    let mut feet = layout.feet;
    for (j, landing) in &landings {
        let side = sched.swing_side(*j);
        let stance = side.other();
        let s = feet[stance.index()];
        targets.push([s[0], s[1] - stance.lateral_sign() * offset]);
        feet[side.index()] = *landing;
    }
    targets.push([0.5 * (feet[0][0] + feet[1][0]), 0.5 * (feet[0][1] + feet[1][1])]);
    let dur = layout.gait.step_duration;
    let segments: Vec<(f64, [f64; 2])> = targets
        .iter()
        .enumerate()
        .map(|(m, target)| {
            let prev = if m == 0 { [0.0, 0.0] } else { targets[m - 1] };
            (m as f64 * dur, [target[0] - prev[0], target[1] - prev[1]])
        })
        .collect();

    let (a, b) = (transition(period), input(period));
    let mut state = [CentroidalState::default(); 2];
    let end = (ticks + 1) as f64 * period;
    let mut samples = Vec::with_capacity(ticks + 1);
    for k in 0..=ticks {
        let t = k as f64 * period;
        let mid = t + 0.5 * period;
        let mut jerk = [0.0; 2];
        for (t0, d) in &segments {
            for axis in 0..2 {
                jerk[axis] += s_curve_jerk(mid, *t0, q.transfer, d[axis]);
            }
        }
        samples.push(ReferenceSample { time: t, state, jerk, phase: schedule_phase(layout, &landings, t, end) });
        for axis in 0..2 {
            state[axis] = CentroidalState::from_vector(&(a * state[axis].to_vector() + b * jerk[axis]));
        }
    }

    let mut foot_plan = FootPlan {
        initial: layout.feet.map(|f| Vector3::new(f[0], f[1], 0.0)),
        swings: Vec::new(),
    };
    let mut feet = layout.feet;
    for (j, landing) in &landings {
        let side = sched.swing_side(*j);
        let from = feet[side.index()];
        let spline = swing_spline(
            Vector3::new(from[0], from[1], 0.0),
            Vector3::new(landing[0], landing[1], 0.0),
            sched.step_start(*j, &layout.gait),
            layout.gait.single_support(),
            layout.gait.swing_apex,
            layout.gait.max_swing_speed,
        )?;
        foot_plan.swings.push((side, spline));
        feet[side.index()] = *landing;
    }
    Ok(Playback { samples, foot_plan })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub median: f64,
    pub p90: f64,
    pub max: f64,
    /// Fraction of the time with error at most 1 cm.
    pub below_1cm: f64,
}

impl ErrorStats {
    fn of(errors: &[f64]) -> Option<Self> {
        let p = error_duration_profile(errors);
        Some(Self {
            median: bound_at(&p, 0.5)?,
            p90: bound_at(&p, 0.9)?,
            max: p.last()?.bound,
            below_1cm: fraction_below(errors, 0.01),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WalkMetrics {
    /// Average forward CoM speed over the steady steps (m/s).
    pub steady_speed: Option<f64>,
    /// Time at which the aimed velocity drops to zero.
    pub stop_command: f64,
    /// Time at which the stopping steps are complete.
    pub stop_deadline: f64,
    /// From this time on the DCM stays inside the final support shrunk by
    /// the margins.
    pub dcm_captured_at: Option<f64>,
    /// From this time on the CoM speed stays below 1 mm/s.
    pub settled_at: Option<f64>,
    pub final_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub version: String,
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub estimator: bool,
    pub mpc: bool,
    pub rigid_plant: bool,
    pub duration: f64,
    pub ticks: usize,
    pub fell: bool,
    pub fall_time: Option<f64>,
    pub gain: [f64; 3],
    pub spectral_radius: f64,
    /// Per-axis disturbance each margin absorbs (m/s^3).
    pub disturbance_bound: [f64; 2],
    pub margin: [f64; 2],
    pub cop_error: Option<ErrorStats>,
    pub single_support_cop_error: Option<ErrorStats>,
    pub max_vrp_error: [f64; 2],
    pub saturation_fallbacks: usize,
    pub replans: usize,
    pub max_kkt_residual: f64,
    pub walk: Option<WalkMetrics>,
}

pub struct RunOutput {
    pub trace: SimTrace,
    pub summary: RunSummary,
}

fn contact_of(phase: &SupportPhase) -> Contact {
    match phase.kind {
        PhaseKind::Double => Contact::Double,
        PhaseKind::Single => match phase.feet[0].side {
            Side::Left => Contact::Left,
            Side::Right => Contact::Right,
        },
    }
}

/// CoM as the controller sees it: rigid kinematics through the equivalent
/// hips, corrected for the lever arm, anchored on the loaded feet.
#[allow(clippy::too_many_arguments)]
fn estimated_com(
    body: &BodyModel,
    geom: &Geometry,
    hips: &[HipConfiguration; 2],
    theta_hat: [Vector2<f64>; 2],
    params: &[FlexParams; 2],
    lever: Vector3<f64>,
    weights: [f64; 2],
) -> Result<Vector3<f64>> {
    let mut q = [Vector3::zeros(); 2];
    for i in 0..2 {
        q[i] = equivalent_hip(&hips[i], &FlexState::at(theta_hat[i]))?.q;
    }
    let (feet, com) = body.rigid_fk(q, geom.leg_length, [lever; 2]);
    let corrected = lever_arm_correction(theta_hat, [&params[0], &params[1]], feet, com, [body.leg_mass; 2], body.total_mass)?;
    let total: f64 = weights.iter().sum();
    let mut out = Vector3::zeros();
    for i in 0..2 {
        out += (corrected.com - corrected.feet[i] + geom.feet[i]) * (weights[i] / total);
    }
    Ok(out)
}


/// Share of the weight on each foot. Double support moves it from the last
/// stance foot to the coming one over the transfer; the opening transfer
/// starts from an even split and the closing one ends there. The hip loads
/// and the kinematic anchor of the CoM estimate both use it, so neither
/// jumps when a foot touches down or lifts off.
fn support_share(layout: &Layout, t: f64) -> [f64; 2] {
    let (gait, sched) = (&layout.gait, &layout.schedule);
    let single = |side: Side| {
        let mut w = [0.0; 2];
        w[side.index()] = 1.0;
        w
    };
    let slot = sched.slot_at(t, gait);
    let (start, end) = sched.slot_span(slot, gait);
    let (from, to, start, span) = match slot {
        Slot::Single { step } => return single(sched.swing_side(step).other()),
        Slot::Double { last: None } => ([0.5; 2], single(sched.swing_side(0).other()), 0.0, end),
        Slot::Double { last: Some(j) } if end.is_finite() => {
            let stance = sched.swing_side(j);
            (single(stance.other()), single(stance), start, end - start)
        }
        Slot::Double { last: Some(j) } => (single(sched.swing_side(j).other()), [0.5; 2], start, gait.double_support()),
    };
    let s = if span > 0.0 { ((t - start) / span).clamp(0.0, 1.0) } else { 1.0 };
    [0, 1].map(|i| from[i] * (1.0 - s) + to[i] * s)
}

/// Simulate one walking scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let period = cfg.stabilizer.period;
    let sys = stabilizer_system(cfg)?;
    let gain = controller_gain(cfg)?;
    let bound = [gain.disturbance_for_margin(cfg.stabilizer.margin[0]), gain.disturbance_for_margin(cfg.stabilizer.margin[1])];
    let w2 = sys.omega_sq;

    let layout = match cfg.scenario.kind {
        ScenarioKind::WalkInPlace => walking_layout(cfg, cfg.walk.in_place_steps),
        ScenarioKind::DynamicWalk => {
            walking_layout(cfg, cfg.walk.ramp_steps + cfg.walk.steady_steps + cfg.walk.stop_steps)
        }
        ScenarioKind::QuasiStatic => quasi_static_layout(cfg),
    };
    let duration = layout.walk_end + cfg.scenario.settle_time;
    let ticks = (duration / period).round() as usize;
    let initial = [CentroidalState::at_rest(0.0); 2];

    let make_walker = |aim: AimProfile, prescribed: Vec<(usize, [f64; 2])>| {
        Walker::new(
            layout.gait,
            layout.schedule,
            sys.clone(),
            cfg.stabilizer.margin,
            aim,
            cfg.walk.replan_period,
            initial,
            layout.feet,
            prescribed,
        )
    };
    let walker = match cfg.scenario.kind {
        ScenarioKind::WalkInPlace => Some(make_walker(AimProfile::Constant([0.0; 2]), Vec::new())),
        ScenarioKind::DynamicWalk => Some(make_walker(
            AimProfile::Ramp { speed: cfg.walk.speed, ramp: cfg.walk.ramp_steps, steady: cfg.walk.steady_steps },
            Vec::new(),
        )),
        ScenarioKind::QuasiStatic if cfg.scenario.mpc => {
            let speed = cfg.quasi_static.step_length / layout.gait.step_duration;
            Some(make_walker(AimProfile::Constant([speed, 0.0]), quasi_static_landings(cfg, &layout)))
        }
        ScenarioKind::QuasiStatic => None,
    };
    let mut reference = match walker {
        Some(w) if cfg.scenario.mpc => ReferenceSource::Online(Box::new(w)),
        Some(w) => ReferenceSource::Playback(playback_from_walker(w, ticks, period)?),
        None => ReferenceSource::Playback(quasi_static_playback(cfg, &layout, ticks, period)?),
    };

    let body = cfg.plant.body;
    let lever = cfg.plant.lever();
    let rigid = cfg.plant.rigid;
    let use_estimator = cfg.scenario.estimator && !rigid;
    let k_hat = cfg.estimator.stiffness.unwrap_or(cfg.plant.stiffness);
    let params_hat = [FlexParams::isotropic(k_hat[0], lever)?, FlexParams::isotropic(k_hat[1], lever)?];

    let first = reference.sample(0, 0.0)?;
    let mut plant = FlexibleLipPlant::new(cfg.plant, initial, first.phase.clone(), w2)?;
    let weights = support_share(&layout, 0.0);

    // Let the hips settle under the initial stance before the clock starts.
    let feet0 = reference.foot_plan().tracks(0.0).map(|f| f.sample(0.0).pos);
    let com0 = [initial[0].c, initial[1].c];
    if !rigid {
        for _ in 0..100 {
            let geom = body.solve(com0, feet0, plant.theta(), [lever; 2])?;
            let theta = plant.static_deflection(&body.hip_loads(&geom, weights, &Vector3::zeros()));
            for (s, th) in plant.deflection.iter_mut().zip(theta) {
                *s = FlexState::at(th);
            }
        }
    }
    let mut theta_hat = [FlexState::default(); 2];
    if use_estimator {
        let geom = body.solve(com0, feet0, plant.theta(), [lever; 2])?;
        let loads = body.hip_loads(&geom, weights, &Vector3::zeros());
        for i in 0..2 {
            let hip = body.hip_configuration(&geom.q[i], &Vector3::zeros(), &plant.theta()[i], &loads[i]);
            theta_hat[i] = FlexState::at(steady_deflection(&hip, &params_hat[i])?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scenario.seed);
    let magnitude = cfg.disturbance.magnitude.unwrap_or(bound);
    let switch_ticks = ((cfg.disturbance.switch_period / period).round() as usize).max(1);
    let mut bang = [1.0; 2];

    let mut trace = SimTrace { rows: Vec::with_capacity(ticks) };
    let mut delta_prev: Option<Vector2<f64>> = None;
    let mut delta_dot = Vector2::zeros();
    let alpha = lpf_gain(cfg.estimator.lpf_cutoff, period);
    let mut fallbacks = 0;
    let mut fall_time = None;

    for k in 0..ticks {
        let t = k as f64 * period;
        let r = if k == 0 { first.clone() } else { reference.sample(k, t)? };
        let next_phase = reference.phase_at(k + 1, t + period).map_err(|e| e.at(t, "support phase"))?;
        let tracks = reference.foot_plan().tracks(t);
        let tracks_next = reference.foot_plan().tracks(t + period);

        // True posture and hip loads.
        let weights = support_share(&layout, t);
        let x = plant.com;
        let feet = tracks.map(|f| f.sample(t).pos);
        let theta = plant.theta();
        let geom = body.solve([x[0].c, x[1].c], feet, theta, [lever; 2]).map_err(|e| e.at(t, "posture"))?;
        let accel = Vector3::new(x[0].c_ddot, x[1].c_ddot, 0.0);
        if geom.leg_length.iter().zip(weights).any(|(l, w)| w > 0.0 && *l > cfg.plant.max_leg_length) {
            plant.fell = true;
        }
        let loads = body.hip_loads(&geom, weights, &accel);
        let hips = [
            body.hip_configuration(&geom.q[0], &Vector3::zeros(), &theta[0], &loads[0]),
            body.hip_configuration(&geom.q[1], &Vector3::zeros(), &theta[1], &loads[1]),
        ];

        // Deflection estimate and the CoM the controller believes in.
        if use_estimator {
            for i in 0..2 {
                let tau = approx_flex_torque(&hips[i], &theta_hat[i].theta, &params_hat[i]);
                theta_hat[i] = estimate_deflection(&tau, &theta_hat[i], &params_hat[i], period, cfg.estimator.lpf_cutoff)
                    .map_err(|e| e.at(t, "deflection estimate"))?;
            }
        }
        let th = [theta_hat[0].theta, theta_hat[1].theta];
        let com_hat = estimated_com(&body, &geom, &hips, th, &params_hat, lever, weights).map_err(|e| e.at(t, "kinematics"))?;
        let delta = com_hat.xy() - geom.com.xy();
        // Kinematic velocities are low-pass filtered like the deflection rates.
        if let Some(p) = delta_prev {
            delta_dot += ((delta - p) / period - delta_dot) * alpha;
        }
        delta_prev = Some(delta);
        let x_hat = [0, 1].map(|a| CentroidalState { c: x[a].c + delta[a], c_dot: x[a].c_dot + delta_dot[a], c_ddot: x[a].c_ddot });

        // Saturated tube feedback.
        let mut x_hat_next = [CentroidalState::default(); 2];
        let mut jerk = [0.0; 2];
        let mut fallback = false;
        for a in 0..2 {
            let x_ref = r.state[a];
            let x_ref_next = sys.step(&x_ref, r.jerk[a]);
            let x_tilde = CentroidalState::from_vector(&(x_hat[a].to_vector() - x_ref.to_vector()));
            let support = support_interval(&next_phase, &cfg.gait, a);
            let limits = match saturation_limits(&x_tilde, &x_ref_next, 0.0, support, [-bound[a], bound[a]], &sys) {
                Ok(l) => l,
                Err(Error::InfeasibleSaturation { .. }) => {
                    fallback = true;
                    saturation_limits(&x_tilde, &x_ref_next, 0.0, support, [0.0, 0.0], &sys)
                        .unwrap_or(SaturationLimits { min: f64::NEG_INFINITY, max: f64::INFINITY })
                }
                Err(e) => return Err(e.at(t, "saturation")),
            };
            let (xn, u) = stabilize_step(&x_hat[a], &x_ref, r.jerk[a], &gain, limits, &sys);
            x_hat_next[a] = xn;
            jerk[a] = u;
        }
        fallbacks += usize::from(fallback);

        // The whole-body references must exist for the commanded motion.
        interface_references(&x_hat_next, &tracks_next, [0.0; 2], t + period, &cfg.interface)
            .map_err(|e| e.at(t, "interface"))?;

        let mut e = [0.0; 2];
        match cfg.disturbance.model {
            DisturbanceModel::None => {}
            DisturbanceModel::Uniform => {
                for a in 0..2 {
                    e[a] = if magnitude[a] > 0.0 { rng.random_range(-magnitude[a]..=magnitude[a]) } else { 0.0 };
                }
            }
            DisturbanceModel::BangBang => {
                if k % switch_ticks == 0 {
                    for b in bang.iter_mut() {
                        *b = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    }
                }
                e = [bang[0] * magnitude[0], bang[1] * magnitude[1]];
            }
        }

        let vrp = [0, 1].map(|a| x[a].c - x[a].c_ddot / w2);
        let cop_ref = [0, 1].map(|a| r.state[a].c - r.state[a].c_ddot / w2);
        trace.rows.push(TraceRow {
            time: t,
            contact: contact_of(&r.phase),
            reference: r.state,
            actual: x,
            estimate: x_hat,
            cop_ref,
            cop: plant.cop,
            vrp,
            bias: plant.bias,
            jerk,
            disturbance: e,
            theta: [theta[0].x, theta[0].y, theta[1].x, theta[1].y],
            theta_est: [th[0].x, th[0].y, th[1].x, th[1].y],
            left_load: weights[0],
            saturation_fallback: fallback,
            fell: plant.fell,
        });
        if plant.fell {
            fall_time = Some(t);
            break;
        }

        plant.support = next_phase;
        plant.step(jerk, &loads, e, period).map_err(|err| err.at(t, "plant"))?;
    }
    if fall_time.is_none() && plant.fell {
        fall_time = Some(plant.time);
    }

    let errors = trace.cop_errors();
    let ss_errors: Vec<f64> = trace.rows.iter().filter(|r| r.contact != Contact::Double).map(|r| r.cop_error_norm()).collect();
    let mut max_vrp_error = [0.0f64; 2];
    for row in &trace.rows {
        let v = row.vrp_error(w2);
        max_vrp_error = [max_vrp_error[0].max(v[0].abs()), max_vrp_error[1].max(v[1].abs())];
    }
    let walk = match cfg.scenario.kind {
        ScenarioKind::DynamicWalk => Some(walk_metrics(cfg, &layout, &trace, &reference, &sys, ticks)?),
        _ => None,
    };
    let (replans, max_kkt_residual) = match &reference {
        ReferenceSource::Online(w) => (w.replans, w.max_kkt_residual),
        ReferenceSource::Playback(_) => (0, 0.0),
    };
    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: cfg.scenario.kind,
        seed: cfg.scenario.seed,
        estimator: cfg.scenario.estimator,
        mpc: cfg.scenario.mpc,
        rigid_plant: rigid,
        duration,
        ticks: trace.rows.len(),
        fell: fall_time.is_some(),
        fall_time,
        gain: gain.k,
        spectral_radius: gain.spectral_radius,
        disturbance_bound: bound,
        margin: cfg.stabilizer.margin,
        cop_error: ErrorStats::of(&errors),
        single_support_cop_error: ErrorStats::of(&ss_errors),
        max_vrp_error,
        saturation_fallbacks: fallbacks,
        replans,
        max_kkt_residual,
        walk,
    };
    Ok(RunOutput { trace, summary })
}

fn walk_metrics(
    cfg: &ScenarioConfig,
    layout: &Layout,
    trace: &SimTrace,
    reference: &ReferenceSource,
    sys: &SystemMatrices,
    ticks: usize,
) -> Result<WalkMetrics> {
    let w = &cfg.walk;
    let period = cfg.stabilizer.period;
    let at = |t: f64| trace.rows.get((t / period).round() as usize);
    let start = layout.schedule.step_start(w.ramp_steps, &layout.gait);
    let stop_command = layout.schedule.step_start(w.ramp_steps + w.steady_steps, &layout.gait);
    let stop_deadline = layout.schedule.step_start(w.ramp_steps + w.steady_steps + w.stop_steps, &layout.gait);
    let steady_speed = match (at(start), at(stop_command)) {
        (Some(a), Some(b)) if w.steady_steps > 0 => Some((b.actual[0].c - a.actual[0].c) / (stop_command - start)),
        _ => None,
    };

    let final_speed = trace.rows.last().map_or(0.0, |r| r.actual[0].c_dot.hypot(r.actual[1].c_dot));
    if trace.rows.len() < ticks {
        // Fell before the end: nothing was captured.
        return Ok(WalkMetrics { steady_speed, stop_command, stop_deadline, dcm_captured_at: None, settled_at: None, final_speed });
    }
    let end_time = ticks as f64 * period;
    let final_phase = reference.phase_at(ticks, end_time)?;
    let omega = sys.omega();
    let shrunk: [[f64; 2]; 2] = [0, 1].map(|a| {
        let s = support_interval(&final_phase, &cfg.gait, a);
        [s[0] + cfg.stabilizer.margin[a], s[1] - cfg.stabilizer.margin[a]]
    });
    let inside = |r: &TraceRow| {
        (0..2).all(|a| {
            let xi = r.actual[a].c + r.actual[a].c_dot / omega;
            xi >= shrunk[a][0] && xi <= shrunk[a][1]
        })
    };
    let slow = |r: &TraceRow| r.actual[0].c_dot.hypot(r.actual[1].c_dot) < 1e-3;
    let last_from = |pred: &dyn Fn(&TraceRow) -> bool| -> Option<f64> {
        if trace.rows.is_empty() || !pred(trace.rows.last().unwrap()) {
            return None;
        }
        let i = trace.rows.iter().rposition(|r| !pred(r)).map_or(0, |i| i + 1);
        Some(trace.rows[i].time)
    };
    Ok(WalkMetrics {
        steady_speed,
        stop_command,
        stop_deadline,
        dcm_captured_at: last_from(&inside),
        settled_at: last_from(&slow),
        final_speed,
    })
}

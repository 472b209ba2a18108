//! Walking pattern generation: gait timing, support intervals and the
//! per-axis model predictive planner producing CoM jerks and footsteps.
//!
//! Axis 0 is forward (x), axis 1 lateral (y). Feet are axis-aligned
//! rectangles and the double-support polygon is the per-axis hull.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::centroidal::{input, transition, CentroidalState, SystemMatrices};
use crate::error::{Error, Result};
use crate::qp::{Qp, QpOutcome};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    /// +1 for the left foot, which sits at larger y.
    pub fn lateral_sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub velocity: f64,
    /// Tracking of the mean velocity over one step duration.
    pub stride_velocity: f64,
    pub jerk: f64,
    pub ankle: f64,
}

/// Allowed displacement of a landing relative to the stance foot.
/// `lateral` is measured away from the stance foot, outward for the swing side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteppingArea {
    pub forward: [f64; 2],
    pub lateral: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitConfig {
    pub mpc_period: f64,
    pub horizon: usize,
    pub step_duration: f64,
    pub ss_fraction: f64,
    pub foot_half_length: f64,
    pub foot_half_width: f64,
    pub stepping_area: SteppingArea,
    pub max_swing_speed: f64,
    pub swing_apex: f64,
    pub weights: CostWeights,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            mpc_period: 0.1,
            horizon: 16,
            step_duration: 1.4,
            ss_fraction: 1.2 / 1.4,
            foot_half_length: 0.11,
            foot_half_width: 0.07,
            stepping_area: SteppingArea::default(),
            max_swing_speed: 1.5,
            swing_apex: 0.05,
            weights: CostWeights::default(),
        }
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { velocity: 1.0, stride_velocity: 100.0, jerk: 1e-5, ankle: 10.0 }
    }
}

impl Default for SteppingArea {
    fn default() -> Self {
        Self { forward: [-0.2, 0.4], lateral: [0.16, 0.3] }
    }
}

fn config_err(key: &str, what: &str) -> Error {
    Error::Config(format!("gait.{key}: {what}"))
}

impl GaitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.mpc_period) {
            return Err(config_err("mpc_period", "must be positive"));
        }
        if self.horizon < 2 {
            return Err(config_err("horizon", "must be at least 2"));
        }
        if !positive(self.step_duration) {
            return Err(config_err("step_duration", "must be positive"));
        }
        if !(self.ss_fraction > 0.0 && self.ss_fraction < 1.0) {
            return Err(config_err("ss_fraction", "must lie in (0, 1)"));
        }
        if !positive(self.foot_half_length) {
            return Err(config_err("foot_half_length", "must be positive"));
        }
        if !positive(self.foot_half_width) {
            return Err(config_err("foot_half_width", "must be positive"));
        }
        let area = self.stepping_area;
        if !(area.forward[0] <= area.forward[1]) {
            return Err(config_err("stepping_area.forward", "min exceeds max"));
        }
        if !(area.lateral[0] > 0.0 && area.lateral[0] <= area.lateral[1]) {
            return Err(config_err("stepping_area.lateral", "needs 0 < min <= max"));
        }
        if !positive(self.max_swing_speed) {
            return Err(config_err("max_swing_speed", "must be positive"));
        }
        if !positive(self.swing_apex) {
            return Err(config_err("swing_apex", "must be positive"));
        }
        let w = self.weights;
        if !(w.velocity > 0.0) {
            return Err(config_err("weights.velocity", "must be positive"));
        }
        if !(w.jerk >= 0.0) || !(w.ankle >= 0.0) || !(w.stride_velocity >= 0.0) {
            return Err(config_err("weights", "must be non-negative"));
        }
        Ok(())
    }

    pub fn single_support(&self) -> f64 {
        self.step_duration * self.ss_fraction
    }

    pub fn double_support(&self) -> f64 {
        self.step_duration - self.single_support()
    }

    pub fn half_dim(&self, axis: usize) -> f64 {
        if axis == 0 { self.foot_half_length } else { self.foot_half_width }
    }

    /// Largest per-axis swing displacement keeping the quintic's peak
    /// planar speed under the limit.
    pub fn max_swing_displacement(&self) -> f64 {
        self.max_swing_speed * self.single_support() * 8.0 / 15.0 / std::f64::consts::SQRT_2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Foothold {
    pub side: Side,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPhase {
    pub kind: PhaseKind,
    pub feet: Vec<Foothold>,
    pub start: f64,
    pub duration: f64,
}

impl SupportPhase {
    pub fn single(foot: Foothold, start: f64, duration: f64) -> Self {
        Self { kind: PhaseKind::Single, feet: vec![foot], start, duration }
    }

    pub fn double(a: Foothold, b: Foothold, start: f64, duration: f64) -> Self {
        Self { kind: PhaseKind::Double, feet: vec![a, b], start, duration }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start - TIME_EPS && t < self.end() - TIME_EPS
    }

    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            PhaseKind::Single => self.feet.len() == 1,
            PhaseKind::Double => self.feet.len() == 2,
        }
    }

    pub fn foot(&self, side: Side) -> Option<&Foothold> {
        self.feet.iter().find(|f| f.side == side)
    }
}

pub fn support_interval(phase: &SupportPhase, cfg: &GaitConfig, axis: usize) -> [f64; 2] {
    let h = cfg.half_dim(axis);
    phase.feet.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |acc, f| {
        [acc[0].min(f.position[axis] - h), acc[1].max(f.position[axis] + h)]
    })
}

/// Fixed step timing: an initial double support until `origin`, then steps
/// of single support followed by double support, alternating sides. After
/// `steps` steps (if bounded) the robot stays in double support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitSchedule {
    pub origin: f64,
    pub first_swing: Side,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Double support after `last` (None before the first step).
    Double { last: Option<usize> },
    Single { step: usize },
}

impl GaitSchedule {
    pub fn swing_side(&self, step: usize) -> Side {
        if step.is_multiple_of(2) { self.first_swing } else { self.first_swing.other() }
    }

    pub fn step_start(&self, step: usize, cfg: &GaitConfig) -> f64 {
        self.origin + step as f64 * cfg.step_duration
    }

    pub fn touchdown(&self, step: usize, cfg: &GaitConfig) -> f64 {
        self.step_start(step, cfg) + cfg.single_support()
    }

    pub fn slot_at(&self, t: f64, cfg: &GaitConfig) -> Slot {
        if t < self.origin - TIME_EPS {
            return Slot::Double { last: None };
        }
        let j = ((t - self.origin) / cfg.step_duration + TIME_EPS).floor() as usize;
        if let Some(n) = self.steps {
            if j >= n {
                return Slot::Double { last: n.checked_sub(1) };
            }
        }
        if t < self.touchdown(j, cfg) - TIME_EPS {
            Slot::Single { step: j }
        } else {
            Slot::Double { last: Some(j) }
        }
    }

    /// Start and end of the slot containing `t` (end may be infinite).
    pub fn slot_span(&self, slot: Slot, cfg: &GaitConfig) -> (f64, f64) {
        match slot {
            Slot::Double { last: None } => (f64::NEG_INFINITY, self.origin),
            Slot::Single { step } => (self.step_start(step, cfg), self.touchdown(step, cfg)),
            Slot::Double { last: Some(j) } => {
                let end = match self.steps {
                    Some(n) if j + 1 >= n => f64::INFINITY,
                    _ => self.step_start(j + 1, cfg),
                };
                (self.touchdown(j, cfg), end)
            }
        }
    }
}

/// Everything the planner needs to know about the walk at replanning time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanContext {
    pub time: f64,
    pub schedule: GaitSchedule,
    /// Foot positions at `time`; a swinging foot is at its lift-off point.
    pub feet: [[f64; 2]; 2],
    /// Landing of the swing already in progress, if any.
    pub swing_landing: Option<[f64; 2]>,
    /// Prescribed landings by step index; these are not optimized.
    pub pinned: Vec<(usize, [f64; 2])>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub step: usize,
    pub side: Side,
    pub position: [f64; 2],
    pub lift_off: f64,
    pub touchdown: f64,
    /// False when the landing was a decision variable of this plan.
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePlan {
    pub start: f64,
    pub period: f64,
    pub omega_sq: f64,
    /// `horizon + 1` states per axis, the first being the initial state.
    pub states: [Vec<CentroidalState>; 2],
    pub jerks: [Vec<f64>; 2],
    pub footsteps: Vec<PlannedStep>,
    pub phases: Vec<SupportPhase>,
    pub bias: [f64; 2],
    pub objective: [f64; 2],
    pub kkt_residual: f64,
}

impl ReferencePlan {
    pub fn horizon(&self) -> f64 {
        self.jerks[0].len() as f64 * self.period
    }

    pub fn terminal_state(&self) -> [CentroidalState; 2] {
        [*self.states[0].last().unwrap(), *self.states[1].last().unwrap()]
    }

    pub fn phase_at(&self, t: f64) -> Option<&SupportPhase> {
        self.phases.iter().find(|p| p.contains(t)).or_else(|| {
            self.phases.last().filter(|p| (t - p.end()).abs() <= TIME_EPS)
        })
    }

    pub fn landing_of(&self, step: usize) -> Option<&PlannedStep> {
        self.footsteps.iter().find(|s| s.step == step)
    }
}

/// One stabilizer-rate sample of the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSample {
    pub time: f64,
    pub state: [CentroidalState; 2],
    pub jerk: [f64; 2],
    pub phase: SupportPhase,
}

/// Exact re-integration of the plan's piecewise-constant jerk at an
/// arbitrary time offset from the plan start.
pub fn replan_shift(plan: &ReferencePlan, elapsed: f64) -> Result<ReferenceSample> {
    let horizon = plan.horizon();
    if !(elapsed >= 0.0) || elapsed >= horizon - TIME_EPS {
        return Err(Error::StalePlan { elapsed, horizon });
    }
    let k = ((elapsed / plan.period + TIME_EPS).floor() as usize).min(plan.jerks[0].len() - 1);
    let tau = (elapsed - k as f64 * plan.period).max(0.0);
    let (a, b) = (transition(tau), input(tau));
    let mut state = [CentroidalState::default(); 2];
    let mut jerk = [0.0; 2];
    for axis in 0..2 {
        let u = plan.jerks[axis][k];
        state[axis] = CentroidalState::from_vector(&(a * plan.states[axis][k].to_vector() + b * u));
        jerk[axis] = u;
    }
    let time = plan.start + elapsed;
    let phase = plan
        .phase_at(time)
        .cloned()
        .ok_or_else(|| Error::Domain(format!("no support phase at t={time}")))?;
    Ok(ReferenceSample { time, state, jerk, phase })
}

/// Affine expression `constant + sum coeff * z[var]` over the decision vector.
#[derive(Debug, Clone, PartialEq)]
struct Aff {
    constant: f64,
    terms: Vec<(usize, f64)>,
}

impl Aff {
    fn known(v: f64) -> Self {
        Self { constant: v, terms: Vec::new() }
    }

    fn var(i: usize) -> Self {
        Self { constant: 0.0, terms: vec![(i, 1.0)] }
    }

    fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    fn scaled(mut self, s: f64) -> Self {
        self.constant *= s;
        for t in &mut self.terms {
            t.1 *= s;
        }
        self
    }

    fn add(mut self, other: &Aff) -> Self {
        self.constant += other.constant;
        self.terms.extend_from_slice(&other.terms);
        self
    }

    fn sub(self, other: &Aff) -> Self {
        self.add(&other.clone().scaled(-1.0))
    }

    fn is_known(&self) -> bool {
        self.terms.is_empty()
    }

    /// Linear part as a dense row plus the constant.
    fn dense(&self, dim: usize) -> (DVector<f64>, f64) {
        let mut row = DVector::zeros(dim);
        for &(i, c) in &self.terms {
            row[i] += c;
        }
        (row, self.constant)
    }

    #[cfg(test)]
    fn eval(&self, z: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * z[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
enum FootRef {
    Known([f64; 2]),
    /// Landing decision variable, same index on both axes.
    Var(usize),
}

impl FootRef {
    fn axis(&self, axis: usize, offset: usize) -> Aff {
        match self {
            FootRef::Known(p) => Aff::known(p[axis]),
            FootRef::Var(i) => Aff::var(offset + i),
        }
    }
}

#[derive(Debug, Clone)]
struct StepLayout {
    step: usize,
    side: Side,
    stance: FootRef,
    lift_off: FootRef,
    landing: FootRef,
    free: bool,
}

struct Layout {
    steps: Vec<StepLayout>,
    n_free: usize,
}

fn build_layout(ctx: &PlanContext, cfg: &GaitConfig, t_end: f64) -> Result<Layout> {
    let sched = &ctx.schedule;
    let mut feet = [FootRef::Known(ctx.feet[0]), FootRef::Known(ctx.feet[1])];
    let first = match sched.slot_at(ctx.time, cfg) {
        Slot::Double { last: None } => 0,
        Slot::Single { step } => step,
        Slot::Double { last: Some(j) } => j + 1,
    };
    let mut steps = Vec::new();
    let mut n_free = 0;
    let mut j = first;
    loop {
        if sched.steps.is_some_and(|n| j >= n) {
            break;
        }
        let start = sched.step_start(j, cfg);
        if start > t_end + TIME_EPS {
            break;
        }
        let side = sched.swing_side(j);
        let pinned = ctx.pinned.iter().find(|(s, _)| *s == j).map(|(_, p)| *p);
        let (landing, free) = if start < ctx.time - TIME_EPS {
            let p = ctx.swing_landing.ok_or_else(|| {
                Error::Domain(format!("step {j} is already swinging but no landing was given"))
            })?;
            (FootRef::Known(p), false)
        } else if let Some(p) = pinned {
            (FootRef::Known(p), false)
        } else {
            n_free += 1;
            (FootRef::Var(n_free - 1), true)
        };
        steps.push(StepLayout {
            step: j,
            side,
            stance: feet[side.other().index()].clone(),
            lift_off: feet[side.index()].clone(),
            landing: landing.clone(),
            free,
        });
        feet[side.index()] = landing;
        j += 1;
    }
    Ok(Layout { steps, n_free })
}

/// Axis interval of the support at time `t` as affine bounds, together with
/// the feet defining it.
#[allow(clippy::too_many_arguments)]
fn support_at(
    t: f64,
    ctx: &PlanContext,
    cfg: &GaitConfig,
    layout: &Layout,
    axis: usize,
    offset: usize,
    forward: bool,
    terminal: bool,
) -> (Aff, Aff) {
    let h = cfg.half_dim(axis);
    let find = |j: usize| layout.steps.iter().find(|s| s.step == j);
    let hull = |stance: &FootRef, stance_side: Side, landing: &FootRef| -> (Aff, Aff) {
        let (s, l) = (stance.axis(axis, offset), landing.axis(axis, offset));
        if s.is_known() && l.is_known() {
            let (a, b) = (s.constant.min(l.constant), s.constant.max(l.constant));
            return (Aff::known(a - h), Aff::known(b + h));
        }
        let landing_upper = if axis == 0 { forward } else { stance_side == Side::Right };
        if landing_upper { (s.plus(-h), l.plus(h)) } else { (l.plus(-h), s.plus(h)) }
    };
    match ctx.schedule.slot_at(t, cfg) {
        Slot::Single { step } => {
            let st = find(step).expect("single-support step inside the layout");
            if terminal {
                // One-step capturability: stance foot plus the coming landing.
                return hull(&st.stance, st.side.other(), &st.landing);
            }
            let c = st.stance.axis(axis, offset);
            (c.clone().plus(-h), c.plus(h))
        }
        Slot::Double { last } => match last.and_then(find) {
            Some(st) => hull(&st.stance, st.side.other(), &st.landing),
            None => {
                // Feet as they stand at plan time.
                let (a, b) = (ctx.feet[0][axis], ctx.feet[1][axis]);
                (Aff::known(a.min(b) - h), Aff::known(a.max(b) + h))
            }
        },
    }
}

/// Solve the walking QP for both axes.
///
/// `margin` is the tube half-width per axis and `bias` the held-constant
/// preview of the VRP bias. The VRP is constrained at every stabilizer tick
/// of the horizon, not only at the planner samples.
pub fn plan(
    x0: &[CentroidalState; 2],
    aimed_velocity: [f64; 2],
    ctx: &PlanContext,
    cfg: &GaitConfig,
    margin: [f64; 2],
    bias: [f64; 2],
    sys: &SystemMatrices,
) -> Result<ReferencePlan> {
    cfg.validate()?;
    if !x0.iter().all(CentroidalState::is_finite) {
        return Err(Error::Domain("initial state is not finite".into()));
    }
    for axis in 0..2 {
        if !(margin[axis] >= 0.0) {
            return Err(Error::Domain(format!("negative margin {} on axis {axis}", margin[axis])));
        }
        if margin[axis] >= cfg.half_dim(axis) {
            return Err(Error::MarginTooLarge { axis, margin: margin[axis] });
        }
    }
    let n = cfg.horizon;
    let t_end = ctx.time + n as f64 * cfg.mpc_period;
    let layout = build_layout(ctx, cfg, t_end)?;
    let forward = aimed_velocity[0] >= 0.0;

    let mut states = [Vec::new(), Vec::new()];
    let mut jerks = [Vec::new(), Vec::new()];
    let mut objective = [0.0; 2];
    let mut kkt: f64 = 0.0;
    let mut landings = vec![[0.0; 2]; layout.n_free];
    for axis in 0..2 {
        let (sol, obj, res) = solve_axis(
            axis,
            &x0[axis],
            aimed_velocity[axis],
            ctx,
            cfg,
            &layout,
            margin[axis],
            bias[axis],
            sys,
            forward,
        )?;
        let u: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let mut x = x0[axis];
        let a = transition(cfg.mpc_period);
        let b = input(cfg.mpc_period);
        states[axis].push(x);
        for &uk in &u {
            x = CentroidalState::from_vector(&(a * x.to_vector() + b * uk));
            states[axis].push(x);
        }
        for (i, l) in landings.iter_mut().enumerate() {
            l[axis] = sol[n + i];
        }
        jerks[axis] = u;
        objective[axis] = obj;
        kkt = kkt.max(res);
    }

    let resolve = |f: &FootRef| match f {
        FootRef::Known(p) => *p,
        FootRef::Var(i) => landings[*i],
    };
    let footsteps: Vec<PlannedStep> = layout
        .steps
        .iter()
        .map(|s| PlannedStep {
            step: s.step,
            side: s.side,
            position: resolve(&s.landing),
            lift_off: ctx.schedule.step_start(s.step, cfg),
            touchdown: ctx.schedule.touchdown(s.step, cfg),
            fixed: !s.free,
        })
        .collect();
    let phases = horizon_phases(ctx, cfg, &layout, t_end, &resolve);

    Ok(ReferencePlan {
        start: ctx.time,
        period: cfg.mpc_period,
        omega_sq: sys.omega_sq,
        states,
        jerks,
        footsteps,
        phases,
        bias,
        objective,
        kkt_residual: kkt,
    })
}

fn horizon_phases(
    ctx: &PlanContext,
    cfg: &GaitConfig,
    layout: &Layout,
    t_end: f64,
    resolve: &dyn Fn(&FootRef) -> [f64; 2],
) -> Vec<SupportPhase> {
    let mut phases = Vec::new();
    let mut t = ctx.time;
    while t <= t_end + TIME_EPS {
        let slot = ctx.schedule.slot_at(t, cfg);
        let (start, end) = ctx.schedule.slot_span(slot, cfg);
        let start = if start.is_finite() { start } else { ctx.time };
        let duration = if end.is_finite() { end - start } else { t_end - start + cfg.step_duration };
        let foothold = |side: Side, f: &FootRef| Foothold { side, position: resolve(f) };
        let phase = match slot {
            Slot::Single { step } => {
                let st = layout.steps.iter().find(|s| s.step == step).unwrap();
                SupportPhase::single(foothold(st.side.other(), &st.stance), start, duration)
            }
            Slot::Double { last } => match last.and_then(|j| layout.steps.iter().find(|s| s.step == j)) {
                Some(st) => SupportPhase::double(
                    foothold(Side::Left, if st.side == Side::Left { &st.landing } else { &st.stance }),
                    foothold(Side::Right, if st.side == Side::Right { &st.landing } else { &st.stance }),
                    start,
                    duration,
                ),
                None => SupportPhase::double(
                    Foothold { side: Side::Left, position: ctx.feet[0] },
                    Foothold { side: Side::Right, position: ctx.feet[1] },
                    start,
                    duration,
                ),
            },
        };
        let next = phase.end();
        phases.push(phase);
        if !next.is_finite() || next <= t + TIME_EPS {
            break;
        }
        t = next;
    }
    phases
}

#[allow(clippy::too_many_arguments)]
fn solve_axis(
    axis: usize,
    x0: &CentroidalState,
    aim: f64,
    ctx: &PlanContext,
    cfg: &GaitConfig,
    layout: &Layout,
    margin: f64,
    bias: f64,
    sys: &SystemMatrices,
    forward: bool,
) -> Result<(DVector<f64>, f64, f64)> {
    let n = cfg.horizon;
    let dim = n + layout.n_free;
    let a = transition(cfg.mpc_period);
    let b = input(cfg.mpc_period);
    let v = sys.v;
    let ratio = (cfg.mpc_period / sys.period).round().max(1.0) as usize;

    // x_k = xc[k] + g[k] u, with u the jerk block of the decision vector.
    let mut xc: Vec<Vector3<f64>> = vec![x0.to_vector()];
    let mut g: Vec<Matrix3xX<f64>> = vec![Matrix3xX::zeros(dim)];
    for k in 0..n {
        let mut gk = a * &g[k];
        for r in 0..3 {
            gk[(r, k)] += b[r];
        }
        g.push(gk);
        xc.push(a * xc[k]);
    }
    let row_of = |sel: &RowVector3<f64>, k: usize| -> (DVector<f64>, f64) {
        ((sel * &g[k]).transpose(), (sel * xc[k])[0])
    };

    let mut hess = DMatrix::<f64>::zeros(dim, dim);
    let mut grad = DVector::<f64>::zeros(dim);
    let mut constant = 0.0;
    let mut add_cost = |w: f64, row: &DVector<f64>, c: f64| {
        if w == 0.0 {
            return;
        }
        hess += row * row.transpose() * (2.0 * w);
        grad += row * (2.0 * w * c);
        constant += w * c * c;
    };
    let w = cfg.weights;
    let stride = ((cfg.step_duration / cfg.mpc_period).round() as usize).max(1);
    for k in 1..=n {
        let t_k = ctx.time + k as f64 * cfg.mpc_period;
        let (row, c) = row_of(&RowVector3::new(0.0, 1.0, 0.0), k);
        add_cost(w.velocity, &row, c - aim);
        // Mean velocity over the last stride of the plan, so the walking
        // speed itself tracks the aim and not only the instantaneous one.
        // Off when stopping, where it would only slow the settling.
        if aim != 0.0 {
            let j = k.saturating_sub(stride);
            let span = (k - j) as f64 * cfg.mpc_period;
            let (r1, c1) = row_of(&RowVector3::new(1.0, 0.0, 0.0), k);
            let (r0, c0) = row_of(&RowVector3::new(1.0, 0.0, 0.0), j);
            add_cost(w.stride_velocity, &((r1 - r0) / span), (c1 - c0) / span - aim);
        }
        let (lo, hi) = support_at(t_k, ctx, cfg, layout, axis, n, forward, false);
        let center = lo.add(&hi).scaled(0.5);
        let (crow, cc) = center.dense(dim);
        let (row, c) = row_of(&v, k);
        add_cost(w.ankle, &(row - crow), c + bias - cc);
    }
    for k in 0..n {
        let mut row = DVector::zeros(dim);
        row[k] = 1.0;
        add_cost(w.jerk, &row, 0.0);
    }
    // Tiny regularization on landings keeps the Hessian definite when a
    // landing only enters through constraints.
    for i in n..dim {
        hess[(i, i)] += 1e-8;
    }

    let mut qp = Qp::new(hess, grad);

    // VRP bounds at every stabilizer tick.
    let steps: Vec<(Matrix3<f64>, Vector3<f64>)> =
        (1..=ratio).map(|j| (transition(j as f64 * sys.period), input(j as f64 * sys.period))).collect();
    for k in 0..n {
        for (j, (aj, bj)) in steps.iter().enumerate() {
            let t = ctx.time + k as f64 * cfg.mpc_period + (j + 1) as f64 * sys.period;
            let sel = v * aj;
            let (mut row, c) = row_of(&sel, k);
            row[k] += (v * bj)[0];
            let (lo, hi) = support_at(t, ctx, cfg, layout, axis, n, forward, false);
            let (lo_row, lo_c) = lo.dense(dim);
            let (hi_row, hi_c) = hi.dense(dim);
            qp.add_ge(&row - lo_row, lo_c + margin - c - bias, "vrp-bounds");
            qp.add_le(&row - hi_row, hi_c - margin - c - bias, "vrp-bounds");
        }
    }

    // Terminal capturability on the divergent component.
    let omega = sys.omega();
    let (row, c) = row_of(&RowVector3::new(1.0, 1.0 / omega, 0.0), n);
    let (lo, hi) = support_at(ctx.time + n as f64 * cfg.mpc_period, ctx, cfg, layout, axis, n, forward, true);
    let (lo_row, lo_c) = lo.dense(dim);
    let (hi_row, hi_c) = hi.dense(dim);
    qp.add_ge(&row - lo_row, lo_c + margin - c - bias, "terminal");
    qp.add_le(&row - hi_row, hi_c - margin - c - bias, "terminal");

    // Stepping area and swing reach for each free landing.
    let area = cfg.stepping_area;
    let reach = cfg.max_swing_displacement();
    for st in layout.steps.iter().filter(|s| s.free) {
        let disp = st.landing.axis(axis, n).sub(&st.stance.axis(axis, n));
        let (bounds, scale) = if axis == 0 {
            let lo = if forward { area.forward[0].max(0.0) } else { area.forward[0] };
            let hi = if forward { area.forward[1] } else { area.forward[1].min(0.0) };
            ([lo, hi], 1.0)
        } else {
            (area.lateral, st.side.lateral_sign())
        };
        let (row, c) = disp.scaled(scale).dense(dim);
        qp.add_ge(row.clone(), bounds[0] - c, "stepping-area");
        qp.add_le(row, bounds[1] - c, "stepping-area");
        let (row, c) = st.landing.axis(axis, n).sub(&st.lift_off.axis(axis, n)).dense(dim);
        qp.add_ge(row.clone(), -reach - c, "swing-speed");
        qp.add_le(row, reach - c, "swing-speed");
    }

    match qp.solve()? {
        QpOutcome::Solved(s) => Ok((s.x, s.objective + constant, s.kkt.max())),
        QpOutcome::Infeasible => Err(Error::PlannerInfeasible {
            axis,
            time: ctx.time,
            violated: qp.explain_infeasibility()?,
        }),
    }
}

/// Check the planned reference against its own constraints at stabilizer
/// rate. Returns the largest violation (m) of the shrunk VRP bounds.
pub fn max_vrp_violation(
    plan: &ReferencePlan,
    cfg: &GaitConfig,
    margin: [f64; 2],
    sys: &SystemMatrices,
) -> Result<f64> {
    let ticks = (plan.horizon() / sys.period).round() as usize;
    let mut worst: f64 = f64::NEG_INFINITY;
    for i in 1..ticks {
        let s = replan_shift(plan, i as f64 * sys.period)?;
        for axis in 0..2 {
            let [lo, hi] = support_interval(&s.phase, cfg, axis);
            let p = sys.vrp(&s.state[axis]) + plan.bias[axis];
            worst = worst.max(lo + margin[axis] - p).max(p - (hi - margin[axis]));
        }
    }
    Ok(worst)
}

// Used by tests to evaluate affine supports with a concrete decision vector.
#[cfg(test)]
fn eval_support(lo: &Aff, hi: &Aff, z: &DVector<f64>) -> [f64; 2] {
    [lo.eval(z), hi.eval(z)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sys() -> SystemMatrices {
        SystemMatrices::new(0.002, 9.81 / 0.87).unwrap()
    }

    fn standing_ctx(time: f64, origin: f64) -> PlanContext {
        PlanContext {
            time,
            schedule: GaitSchedule { origin, first_swing: Side::Right, steps: None },
            feet: [[0.0, 0.1], [0.0, -0.1]],
            swing_landing: None,
            pinned: Vec::new(),
        }
    }

    #[test]
    fn support_interval_examples() {
        let cfg = GaitConfig::default();
        let f = |x: f64| Foothold { side: Side::Left, position: [x, 0.0] };
        let single = SupportPhase::single(f(0.0), 0.0, 1.2);
        assert_eq!(support_interval(&single, &cfg, 0), [-0.11, 0.11]);
        let double = SupportPhase::double(f(0.0), Foothold { side: Side::Right, position: [0.35, 0.0] }, 0.0, 0.2);
        assert_eq!(support_interval(&double, &cfg, 0), [-0.11, 0.35 + 0.11]);
        let same = SupportPhase::double(f(0.0), Foothold { side: Side::Right, position: [0.0, 0.0] }, 0.0, 0.2);
        assert_eq!(support_interval(&same, &cfg, 0), support_interval(&single, &cfg, 0));
    }

    #[test]
    fn schedule_slots() {
        let cfg = GaitConfig::default();
        let s = GaitSchedule { origin: 0.4, first_swing: Side::Right, steps: Some(2) };
        assert_eq!(s.slot_at(0.0, &cfg), Slot::Double { last: None });
        assert_eq!(s.slot_at(0.4, &cfg), Slot::Single { step: 0 });
        assert_eq!(s.slot_at(1.6, &cfg), Slot::Double { last: Some(0) });
        assert_eq!(s.slot_at(1.8, &cfg), Slot::Single { step: 1 });
        assert_eq!(s.slot_at(3.0, &cfg), Slot::Double { last: Some(1) });
        assert_eq!(s.slot_at(30.0, &cfg), Slot::Double { last: Some(1) });
        assert_eq!(s.swing_side(1), Side::Left);
        assert!(s.slot_span(Slot::Double { last: Some(1) }, &cfg).1.is_infinite());
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = GaitConfig { horizon: 1, ..GaitConfig::default() };
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("horizon")),
            other => panic!("{other:?}"),
        }
        let cfg = GaitConfig { weights: CostWeights { velocity: 0.0, ..CostWeights::default() }, ..GaitConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn at_rest_is_a_fixed_point() {
        let cfg = GaitConfig::default();
        let x0 = [CentroidalState::at_rest(0.0); 2];
        let ctx = PlanContext {
            schedule: GaitSchedule { origin: 100.0, first_swing: Side::Right, steps: None },
            ..standing_ctx(0.0, 100.0)
        };
        let p = plan(&x0, [0.0, 0.0], &ctx, &cfg, [0.02, 0.015], [0.0, 0.0], &sys()).unwrap();
        for axis in 0..2 {
            assert!(p.jerks[axis].iter().all(|u| u.abs() < 1e-9), "{:?}", p.jerks[axis]);
            assert!(p.states[axis].iter().all(|s| (s.to_vector() - x0[axis].to_vector()).amax() < 1e-9));
        }
        assert!(p.footsteps.is_empty());
        assert!(p.kkt_residual <= 1e-8);
    }

    #[test]
    fn margin_too_large() {
        let cfg = GaitConfig::default();
        let x0 = [CentroidalState::at_rest(0.0); 2];
        let err = plan(&x0, [0.0; 2], &standing_ctx(0.0, 0.4), &cfg, [0.02, 0.08], [0.0; 2], &sys()).unwrap_err();
        assert!(matches!(err, Error::MarginTooLarge { axis: 1, .. }));
    }

    #[test]
    fn unreachable_dcm_is_infeasible() {
        let cfg = GaitConfig::default();
        // DCM 3 m ahead: beyond any stepping reach within the horizon.
        let x0 = [CentroidalState::new(0.0, 3.0 * (9.81f64 / 0.87).sqrt(), 0.0), CentroidalState::at_rest(0.0)];
        let err = plan(&x0, [0.0; 2], &standing_ctx(0.0, 0.4), &cfg, [0.02, 0.015], [0.0; 2], &sys()).unwrap_err();
        match err {
            Error::PlannerInfeasible { axis, violated, .. } => {
                assert_eq!(axis, 0);
                assert!(!violated.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forward_plan_satisfies_invariants() {
        let cfg = GaitConfig::default();
        let s = sys();
        let margin = [0.02, 0.015];
        let x0 = [CentroidalState::at_rest(0.0); 2];
        let p = plan(&x0, [0.25, 0.0], &standing_ctx(0.0, 0.4), &cfg, margin, [0.0; 2], &s).unwrap();
        assert!(p.kkt_residual <= 1e-8, "{}", p.kkt_residual);
        assert!(max_vrp_violation(&p, &cfg, margin, &s).unwrap() <= 1e-8);
        let a = transition(cfg.mpc_period);
        let b = input(cfg.mpc_period);
        for axis in 0..2 {
            for k in 0..cfg.horizon {
                let next = a * p.states[axis][k].to_vector() + b * p.jerks[axis][k];
                assert!((next - p.states[axis][k + 1].to_vector()).amax() <= 1e-9);
            }
        }
        let first = p.landing_of(0).unwrap();
        assert_eq!(first.side, Side::Right);
        assert!(first.position[0] > 0.0, "{first:?}");
        assert!(first.position[1] <= 0.1 - 0.16 + 1e-9);
    }

    #[test]
    fn replan_shift_examples() {
        let cfg = GaitConfig::default();
        let s = sys();
        let x0 = [CentroidalState::new(0.01, 0.02, 0.1), CentroidalState::at_rest(0.0)];
        let p = plan(&x0, [0.25, 0.0], &standing_ctx(0.0, 0.4), &cfg, [0.02, 0.015], [0.0; 2], &s).unwrap();
        let first = replan_shift(&p, 0.0).unwrap();
        assert_eq!(first.state, [p.states[0][0], p.states[1][0]]);

        // Constant-jerk closed form at half a period.
        let h = cfg.mpc_period / 2.0;
        let u = p.jerks[0][0];
        let x = x0[0];
        let expect = [
            x.c + x.c_dot * h + x.c_ddot * h * h / 2.0 + u * h.powi(3) / 6.0,
            x.c_dot + x.c_ddot * h + u * h * h / 2.0,
            x.c_ddot + u * h,
        ];
        let mid = replan_shift(&p, h).unwrap().state[0];
        assert_relative_eq!(mid.c, expect[0], epsilon = 1e-14);
        assert_relative_eq!(mid.c_dot, expect[1], epsilon = 1e-14);
        assert_relative_eq!(mid.c_ddot, expect[2], epsilon = 1e-12);

        assert!(matches!(replan_shift(&p, p.horizon()), Err(Error::StalePlan { .. })));
        assert!(matches!(replan_shift(&p, -0.1), Err(Error::StalePlan { .. })));
    }

    #[test]
    fn swing_in_progress_requires_landing() {
        let cfg = GaitConfig::default();
        let x0 = [CentroidalState::at_rest(0.0), CentroidalState::at_rest(0.1)];
        let ctx = standing_ctx(0.6, 0.4);
        let err = plan(&x0, [0.0; 2], &ctx, &cfg, [0.02, 0.015], [0.0; 2], &sys()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let ctx = PlanContext { swing_landing: Some([0.1, -0.1]), ..ctx };
        let p = plan(&x0, [0.0; 2], &ctx, &cfg, [0.02, 0.015], [0.0; 2], &sys()).unwrap();
        let step = p.landing_of(0).unwrap();
        assert!(step.fixed);
        assert_eq!(step.position, [0.1, -0.1]);
    }

    #[test]
    fn hull_bounds_follow_order_convention() {
        let cfg = GaitConfig::default();
        let ctx = standing_ctx(0.0, 0.4);
        let layout = build_layout(&ctx, &cfg, 1.6).unwrap();
        assert_eq!(layout.n_free, 1);
        let (lo, hi) = support_at(1.7, &ctx, &cfg, &layout, 1, 0, true, false);
        let z = DVector::from_vec(vec![-0.12]);
        assert_eq!(eval_support(&lo, &hi, &z), [-0.12 - 0.07, 0.1 + 0.07]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn freeing_footsteps_never_increases_cost(
            vx in 0.0..0.3f64, c0 in -0.02..0.02f64, cd in -0.05..0.05f64,
            dx in 0.0..0.3f64, dy in -0.28..-0.18f64,
        ) {
            let cfg = GaitConfig::default();
            let s = sys();
            let x0 = [CentroidalState::new(c0, cd, 0.0), CentroidalState::at_rest(0.0)];
            let ctx = standing_ctx(0.0, 0.4);
            let free = plan(&x0, [vx, 0.0], &ctx, &cfg, [0.02, 0.015], [0.0; 2], &s);
            let pinned = PlanContext { pinned: vec![(0, [dx, 0.1 + dy])], ..ctx };
            let fixed = plan(&x0, [vx, 0.0], &pinned, &cfg, [0.02, 0.015], [0.0; 2], &s);
            if let (Ok(free), Ok(fixed)) = (free, fixed) {
                let total = |p: &ReferencePlan| p.objective[0] + p.objective[1];
                prop_assert!(total(&free) <= total(&fixed) + 1e-9 * (1.0 + total(&fixed).abs()));
                prop_assert!(free.kkt_residual <= 1e-8);
            }
        }
    }
}

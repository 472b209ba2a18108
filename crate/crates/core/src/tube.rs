//! Tube stabilizer: a saturated linear feedback around the MPC reference.
//!
//! The tracking error `x~ = x - x_ref` evolves as `x~+ = (A + BK) x~ + B e`
//! with a scalar lumped disturbance `|e| <= d_max`. Its minimal robust
//! positively invariant set is bounded here through support-function series
//! in a few fixed directions: the VRP output row and the three coordinates.

pub mod nelder_mead;

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::centroidal::{CentroidalState, SystemMatrices};
use crate::error::{Error, Result};

const MAX_TERMS: usize = 1_000_000;
const STABILITY_GUARD: f64 = 1e-6;
const UNSTABLE_PENALTY: f64 = 1e6;
const REL_TAIL: f64 = 1e-16;

/// Default absolute truncation tolerance for the invariant-set series (m).
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBound {
    pub d_max: f64,
}

impl DisturbanceBound {
    pub fn new(d_max: f64) -> Result<Self> {
        if !(d_max >= 0.0 && d_max.is_finite()) {
            return Err(Error::Domain(format!("disturbance bound must be >= 0, got {d_max}")));
        }
        Ok(Self { d_max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeGain {
    pub k: [f64; 3],
    pub v_tilde_max: f64,
    /// Componentwise bound on the invariant set: position, velocity, acceleration.
    pub omega_box: [f64; 3],
    pub spectral_radius: f64,
    pub d_max: f64,
}

impl TubeGain {
    /// Evaluate the invariant-set bounds of a given feedback row.
    pub fn certify(k: [f64; 3], sys: &SystemMatrices, d: DisturbanceBound, tail_tol: f64) -> Result<Self> {
        Ok(Self {
            k,
            v_tilde_max: mrpi_vrp_bound(k, sys, d, tail_tol)?,
            omega_box: mrpi_state_box(k, sys, d, tail_tol)?,
            spectral_radius: spectral_radius(&closed_loop(k, sys)),
            d_max: d.d_max,
        })
    }

    /// Same feedback with the bounds rescaled to another disturbance level.
    pub fn rescaled(&self, d: DisturbanceBound) -> Self {
        let ratio = if self.d_max > 0.0 { d.d_max / self.d_max } else { 0.0 };
        Self {
            v_tilde_max: self.v_tilde_max * ratio,
            omega_box: self.omega_box.map(|b| b * ratio),
            d_max: d.d_max,
            ..*self
        }
    }

    /// Largest disturbance whose VRP error stays within `margin`.
    pub fn disturbance_for_margin(&self, margin: f64) -> f64 {
        margin * self.d_max / self.v_tilde_max
    }

    pub fn feedback(&self, error: &CentroidalState) -> f64 {
        RowVector3::from(self.k).dot(&error.to_vector().transpose())
    }
}

pub fn closed_loop(k: [f64; 3], sys: &SystemMatrices) -> Matrix3<f64> {
    sys.a + sys.b * RowVector3::from(k)
}

pub fn spectral_radius(m: &Matrix3<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `d * sum_i |dir A_K^i B|`, plus a rigorous bound on the truncated tail.
///
/// The tail is bounded with a power `p` of the closed loop that contracts in
/// the infinity norm, `||A_K^p|| = rho < 1`:
/// `sum_{i>=M} |dir A_K^i B| <= ||dir||_1 / (1 - rho) * sum_{r<p} ||A_K^{M+r} B||`.
pub fn support_series(
    k: [f64; 3],
    sys: &SystemMatrices,
    dir: &RowVector3<f64>,
    d: DisturbanceBound,
    tail_tol: f64,
) -> Result<f64> {
    let a_k = closed_loop(k, sys);
    let radius = spectral_radius(&a_k);
    if !(radius < 1.0) {
        return Err(Error::Unstable { spectral_radius: radius });
    }
    if d.d_max == 0.0 {
        return Ok(0.0);
    }
    let (p, rho) = contracting_power(&a_k)?;
    let dir_norm = dir.abs().sum();
    let tail_factor = dir_norm / (1.0 - rho);

    // Rolling window over the next p terms starting at M.
    let mut window: std::collections::VecDeque<f64> = std::collections::VecDeque::with_capacity(p);
    let mut window_sum = 0.0;
    let mut ahead = sys.b;
    for _ in 0..p {
        let norm = ahead.amax();
        window.push_back(norm);
        window_sum += norm;
        ahead = a_k * ahead;
    }

    let mut partial = 0.0;
    let mut y = sys.b;
    for m in 0..MAX_TERMS {
        // Per unit disturbance. Also requiring a tail negligible against the
        // partial sum keeps the bound linear in d_max to rounding.
        let tail = tail_factor * window_sum;
        if d.d_max * tail < tail_tol && tail <= REL_TAIL * partial {
            return Ok(d.d_max * (partial + tail));
        }
        partial += (dir * y)[0].abs();
        y = a_k * y;
        window_sum -= window.pop_front().unwrap_or(0.0);
        let norm = ahead.amax();
        window.push_back(norm);
        window_sum += norm;
        ahead = a_k * ahead;
        // The running difference accumulates rounding; resum once per window.
        if (m + 1) % p == 0 || window_sum < 0.0 {
            window_sum = window.iter().sum();
        }
    }
    Err(Error::SeriesDivergence { terms: MAX_TERMS })
}

fn contracting_power(a_k: &Matrix3<f64>) -> Result<(usize, f64)> {
    let mut power = *a_k;
    for p in 1..=MAX_TERMS {
        let rho = inf_norm(&power);
        if rho < 1.0 {
            return Ok((p, rho));
        }
        if !rho.is_finite() {
            break;
        }
        power *= a_k;
    }
    Err(Error::SeriesDivergence { terms: MAX_TERMS })
}

fn inf_norm(m: &Matrix3<f64>) -> f64 {
    (0..3).map(|i| m.row(i).abs().sum()).fold(0.0, f64::max)
}

/// Largest VRP tracking error over the invariant set.
pub fn mrpi_vrp_bound(k: [f64; 3], sys: &SystemMatrices, d: DisturbanceBound, tail_tol: f64) -> Result<f64> {
    support_series(k, sys, &sys.v, d, tail_tol)
}

/// Componentwise box around the invariant set.
pub fn mrpi_state_box(k: [f64; 3], sys: &SystemMatrices, d: DisturbanceBound, tail_tol: f64) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut dir = RowVector3::zeros();
        dir[i] = 1.0;
        *slot = support_series(k, sys, &dir, d, tail_tol)?;
    }
    Ok(out)
}

/// Ackermann pole placement for the single-input triple integrator.
pub fn pole_placement_gain(sys: &SystemMatrices, poles: [f64; 3]) -> Result<[f64; 3]> {
    let ctrb = Matrix3::from_columns(&[sys.b, sys.a * sys.b, sys.a * sys.a * sys.b]);
    let inv = ctrb
        .try_inverse()
        .ok_or_else(|| Error::Domain("system is not controllable".into()))?;
    let id = Matrix3::identity();
    let phi = (sys.a - id * poles[0]) * (sys.a - id * poles[1]) * (sys.a - id * poles[2]);
    let k = -(Vector3::<f64>::z().transpose() * inv * phi);
    Ok([k[0], k[1], k[2]])
}

/// Gain placing every closed-loop eigenvalue at the origin.
pub fn deadbeat_gain(sys: &SystemMatrices) -> Result<[f64; 3]> {
    pole_placement_gain(sys, [0.0; 3])
}

/// Stabilizing starting point: continuous poles at 10, 20 and 30 omega.
pub fn default_seed(sys: &SystemMatrices) -> Result<[f64; 3]> {
    let w = sys.omega() * sys.period;
    pole_placement_gain(sys, [(-10.0 * w).exp(), (-20.0 * w).exp(), (-30.0 * w).exp()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSearch {
    pub gain: TubeGain,
    /// Best objective (VRP bound per unit disturbance) per simplex iteration.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
}

/// Search for the feedback row minimizing the VRP error bound.
///
/// The objective is linear in `d_max`, so the search runs at unit
/// disturbance in coordinates scaled by the seed magnitude, which keeps the
/// simplex well conditioned despite gains spanning several decades.
pub fn optimize_gain(
    sys: &SystemMatrices,
    d: DisturbanceBound,
    seed: Option<[f64; 3]>,
    opts: nelder_mead::Options,
) -> Result<GainSearch> {
    let unit = DisturbanceBound { d_max: 1.0 };
    let stabilizing = |k: [f64; 3]| spectral_radius(&closed_loop(k, sys)) < 1.0 - STABILITY_GUARD;
    let seed = match seed {
        Some(k) if stabilizing(k) => k,
        _ => match default_seed(sys) {
            Ok(k) if stabilizing(k) => k,
            _ => return Err(Error::GainInitialization),
        },
    };
    let scale = seed.map(|v| if v != 0.0 { v.abs() } else { 1.0 });
    let to_gain = |z: &[f64]| [z[0] * scale[0], z[1] * scale[1], z[2] * scale[2]];
    let objective = |z: &[f64]| {
        let k = to_gain(z);
        if !stabilizing(k) {
            return UNSTABLE_PENALTY;
        }
        mrpi_vrp_bound(k, sys, unit, DEFAULT_TAIL_TOL).unwrap_or(UNSTABLE_PENALTY)
    };
    let z0: Vec<f64> = seed.iter().zip(&scale).map(|(k, s)| k / s).collect();
    let found = nelder_mead::minimize(objective, &z0, opts);
    let k = to_gain(&found.x);
    let gain = TubeGain::certify(k, sys, d, DEFAULT_TAIL_TOL)?;
    Ok(GainSearch { gain, history: found.history, evaluations: found.evaluations, converged: found.converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationLimits {
    pub min: f64,
    pub max: f64,
}

impl SaturationLimits {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// Feedback interval keeping the next CoP inside `support` for every
/// disturbance in `e_u_bounds`.
///
/// `x+ = x_ref+ + A x~ + B (sat + e)`, so `V x+ + n+` lies in the support iff
/// `sat + e` lies between the two quotients below; requiring that for every
/// admissible `e` shrinks the interval by the disturbance bounds.
pub fn saturation_limits(
    x_tilde: &CentroidalState,
    x_ref_next: &CentroidalState,
    n_next: f64,
    support: [f64; 2],
    e_u_bounds: [f64; 2],
    sys: &SystemMatrices,
) -> Result<SaturationLimits> {
    let vb = sys.vb();
    if vb == 0.0 {
        return Err(Error::Domain("VB vanishes; the VRP is not controllable in one step".into()));
    }
    let free = (sys.v * (sys.a * x_tilde.to_vector() + x_ref_next.to_vector()))[0];
    let q_lo = (support[0] - n_next - free) / vb;
    let q_hi = (support[1] - n_next - free) / vb;
    let (lo, hi) = if q_lo <= q_hi { (q_lo, q_hi) } else { (q_hi, q_lo) };
    let min = lo - e_u_bounds[0];
    let max = hi - e_u_bounds[1];
    if min > max {
        return Err(Error::InfeasibleSaturation { min, max });
    }
    Ok(SaturationLimits { min, max })
}

/// One stabilizer tick: `jerk = u_ref + sat(K (x^ - x_ref))`, `x^+ = A x^ + B jerk`.
pub fn stabilize_step(
    x_hat: &CentroidalState,
    x_ref: &CentroidalState,
    u_ref: f64,
    gain: &TubeGain,
    limits: SaturationLimits,
    sys: &SystemMatrices,
) -> (CentroidalState, f64) {
    let error = CentroidalState::from_vector(&(x_hat.to_vector() - x_ref.to_vector()));
    let jerk = u_ref + limits.clamp(gain.feedback(&error));
    (sys.step(x_hat, jerk), jerk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn robot() -> SystemMatrices {
        SystemMatrices::new(0.002, 11.276).unwrap()
    }

    fn unit() -> DisturbanceBound {
        DisturbanceBound::new(1.0).unwrap()
    }

    #[test]
    fn deadbeat_is_nilpotent() {
        let sys = robot();
        let k = deadbeat_gain(&sys).unwrap();
        let a3 = closed_loop(k, &sys).pow(3);
        // Entries of A_K reach ~1e3, so roundoff leaves ~1e-12 in the cube.
        assert!(a3.amax() < 1e-9, "{a3}");
        assert!(k.iter().all(|v| *v < 0.0));
    }

    #[test]
    fn deadbeat_series_is_three_terms() {
        let sys = robot();
        let k = deadbeat_gain(&sys).unwrap();
        let a_k = closed_loop(k, &sys);
        let d = 1000.0;
        let exact: f64 = (0..3).map(|i| (sys.v * a_k.pow(i) * sys.b)[0].abs()).sum::<f64>() * d;
        let got = mrpi_vrp_bound(k, &sys, DisturbanceBound::new(d).unwrap(), DEFAULT_TAIL_TOL).unwrap();
        assert_relative_eq!(got, exact, max_relative = 1e-12);
    }

    #[test]
    fn open_loop_is_rejected() {
        let err = mrpi_vrp_bound([0.0; 3], &robot(), unit(), DEFAULT_TAIL_TOL).unwrap_err();
        assert!(matches!(err, Error::Unstable { spectral_radius } if (spectral_radius - 1.0).abs() < 1e-6));
    }

    #[test]
    fn zero_disturbance_gives_zero_box() {
        let sys = robot();
        let k = default_seed(&sys).unwrap();
        let zero = DisturbanceBound::new(0.0).unwrap();
        assert_eq!(mrpi_state_box(k, &sys, zero, DEFAULT_TAIL_TOL).unwrap(), [0.0; 3]);
        assert!(DisturbanceBound::new(-1.0).is_err());
    }

    #[test]
    fn pole_placement_places_poles() {
        let sys = robot();
        let poles = [0.9, 0.5, 0.1];
        let k = pole_placement_gain(&sys, poles).unwrap();
        let a_k = closed_loop(k, &sys);
        // Characteristic polynomial coefficients: trace and determinant.
        assert_relative_eq!(a_k.trace(), 1.5, epsilon = 1e-9);
        assert_relative_eq!(a_k.determinant(), 0.045, epsilon = 1e-9);
    }

    #[test]
    fn optimized_gain_beats_deadbeat_and_seed() {
        let sys = robot();
        let d = DisturbanceBound::new(1000.0).unwrap();
        let search = optimize_gain(&sys, d, None, nelder_mead::Options::default()).unwrap();
        let deadbeat = mrpi_vrp_bound(deadbeat_gain(&sys).unwrap(), &sys, d, DEFAULT_TAIL_TOL).unwrap();
        let seed = mrpi_vrp_bound(default_seed(&sys).unwrap(), &sys, d, DEFAULT_TAIL_TOL).unwrap();
        assert!(search.gain.spectral_radius < 1.0);
        assert!(search.gain.v_tilde_max <= deadbeat);
        assert!(search.gain.v_tilde_max <= seed);
        assert!(search.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(search.gain.k.iter().all(|v| *v < 0.0), "{:?}", search.gain.k);
    }

    #[test]
    fn unstabilizable_seed_falls_back_to_default() {
        let sys = robot();
        let opts = nelder_mead::Options { max_evaluations: 20, ..Default::default() };
        let a = optimize_gain(&sys, unit(), Some([1.0, 1.0, 1.0]), opts).unwrap();
        let b = optimize_gain(&sys, unit(), None, opts).unwrap();
        assert_eq!(a, b);
    }

    /// Independent evaluation of the interval for the numeric spot case.
    fn spot_oracle(e: f64) -> (f64, f64) {
        let t: f64 = 0.002;
        let w2 = 11.276;
        // V A x~ with x~ = (0.01, 0, 0) and V x_ref+ = 0.
        let vax = 0.01;
        let vb = t.powi(3) / 6.0 - t / w2;
        let a = (-0.11 - vax) / vb;
        let b = (0.11 - vax) / vb;
        (a.min(b) + e, a.max(b) - e)
    }

    #[test]
    fn saturation_spot_case() {
        let sys = robot();
        let x_tilde = CentroidalState::at_rest(0.01);
        let x_ref = CentroidalState::default();
        let (omin, omax) = spot_oracle(5370.0);
        match saturation_limits(&x_tilde, &x_ref, 0.0, [-0.11, 0.11], [-5370.0, 5370.0], &sys) {
            Err(Error::InfeasibleSaturation { min, max }) => {
                assert_relative_eq!(min, omin, max_relative = 1e-12);
                assert_relative_eq!(max, omax, max_relative = 1e-12);
            }
            other => panic!("expected infeasible saturation, got {other:?}"),
        }
        let (omin, omax) = spot_oracle(100.0);
        let lim = saturation_limits(&x_tilde, &x_ref, 0.0, [-0.11, 0.11], [-100.0, 100.0], &sys).unwrap();
        assert_relative_eq!(lim.min, omin, max_relative = 1e-12);
        assert_relative_eq!(lim.max, omax, max_relative = 1e-12);
    }

    #[test]
    fn saturation_symmetry_and_degenerate_support() {
        let sys = robot();
        let zero = CentroidalState::default();
        let lim = saturation_limits(&zero, &zero, 0.0, [-0.1, 0.1], [-50.0, 50.0], &sys).unwrap();
        assert_relative_eq!(lim.min, -lim.max, epsilon = 1e-9);
        let lim = saturation_limits(&zero, &zero, 0.0, [0.02, 0.02], [0.0, 0.0], &sys).unwrap();
        assert_eq!(lim.min, lim.max);
    }

    #[test]
    fn stabilize_zero_error_and_clamp() {
        let sys = robot();
        let gain = TubeGain::certify(default_seed(&sys).unwrap(), &sys, unit(), DEFAULT_TAIL_TOL).unwrap();
        let x_ref = CentroidalState::new(0.1, 0.2, 0.3);
        let wide = SaturationLimits { min: -1e9, max: 1e9 };
        let (next, jerk) = stabilize_step(&x_ref, &x_ref, 4.0, &gain, wide, &sys);
        assert_eq!(jerk, 4.0);
        assert_eq!(next, sys.step(&x_ref, 4.0));

        let x_hat = CentroidalState::new(0.0, 0.2, 0.3);
        assert!(gain.feedback(&CentroidalState::at_rest(-0.1)) > 1.0);
        let tight = SaturationLimits { min: -1.0, max: 1.0 };
        let (_, jerk) = stabilize_step(&x_hat, &x_ref, 4.0, &gain, tight, &sys);
        assert_eq!(jerk, 5.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bounds_scale_linearly(lambda in 0.01..100.0f64, d in 0.1..5000.0f64) {
            let sys = robot();
            let k = default_seed(&sys).unwrap();
            let base = DisturbanceBound::new(d).unwrap();
            let scaled = DisturbanceBound::new(lambda * d).unwrap();
            let v1 = mrpi_vrp_bound(k, &sys, base, 1e-15).unwrap();
            let v2 = mrpi_vrp_bound(k, &sys, scaled, 1e-15 * lambda).unwrap();
            prop_assert!((v2 - lambda * v1).abs() <= 1e-12 * v2);
        }

        #[test]
        fn bounds_dominate_first_term(d in 0.0..5000.0f64) {
            let sys = robot();
            let gain = TubeGain::certify(default_seed(&sys).unwrap(), &sys, DisturbanceBound::new(d).unwrap(), DEFAULT_TAIL_TOL).unwrap();
            prop_assert!(gain.v_tilde_max >= sys.vb().abs() * d);
            for i in 0..3 {
                prop_assert!(gain.omega_box[i] >= sys.b[i].abs() * d);
            }
        }

        /// Substituting the clamped command into the error dynamics keeps the
        /// next CoP inside the support for any admissible disturbance.
        #[test]
        fn saturated_command_keeps_cop_inside(
            c in -0.02..0.02f64, cd in -0.05..0.05f64, cdd in -0.5..0.5f64,
            raw_feedback in -1e5..1e5f64, e_frac in 0.0..1.0f64,
            n_next in -0.01..0.01f64, ref_vrp in -0.05..0.05f64,
        ) {
            let sys = robot();
            let x_tilde = CentroidalState::new(c, cd, cdd);
            let x_ref_next = CentroidalState::at_rest(ref_vrp);
            let support = [-0.11, 0.11];
            let e_bounds = [-200.0, 200.0];
            if let Ok(lim) = saturation_limits(&x_tilde, &x_ref_next, n_next, support, e_bounds, &sys) {
                let e = e_bounds[0] + e_frac * (e_bounds[1] - e_bounds[0]);
                let sat = lim.clamp(raw_feedback);
                let next = x_ref_next.to_vector() + sys.a * x_tilde.to_vector() + sys.b * (sat + e);
                let cop = (sys.v * next)[0] + n_next;
                prop_assert!(cop >= support[0] - 1e-12 && cop <= support[1] + 1e-12, "cop {cop}");
            }
        }
    }
}

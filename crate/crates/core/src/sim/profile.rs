//! Error-duration profile: for each fraction of the run, the error bound
//! that held during that fraction of the time.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfilePoint {
    pub fraction: f64,
    pub bound: f64,
}

/// Sorted absolute errors: the `k`-th point says `|error| <= bound` during
/// a fraction `k / n` of the samples.
pub fn error_duration_profile(errors: &[f64]) -> Vec<ProfilePoint> {
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(k, bound)| ProfilePoint { fraction: (k + 1) as f64 / n, bound })
        .collect()
}

/// Smallest bound holding during at least a fraction `q` of the samples.
pub fn bound_at(profile: &[ProfilePoint], q: f64) -> Option<f64> {
    profile.iter().find(|p| p.fraction >= q - 1e-12).map(|p| p.bound)
}

/// Fraction of samples whose absolute error stays at or below `bound`.
pub fn fraction_below(errors: &[f64], bound: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| e.abs() <= bound).count() as f64 / errors.len() as f64
}

pub fn median_abs(errors: &[f64]) -> Option<f64> {
    bound_at(&error_duration_profile(errors), 0.5)
}

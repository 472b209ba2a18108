//! Nelder-Mead simplex search with dimension-adaptive coefficients.
//!
//! Reflection 1, expansion 1 + 2/n, contraction 0.75 - 1/(2n), shrink 1 - 1/n.
//! With n = 1 these reduce to the classic (1, 3, 0.25, 0) which would never
//! shrink, so the shrink factor is floored at 0.5.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    /// Relative size of the initial simplex edges, per coordinate.
    pub initial_step: f64,
    /// Stop once the largest vertex distance from the best vertex drops below this.
    pub diameter_tol: f64,
    pub max_evaluations: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { initial_step: 0.05, diameter_tol: 1e-8, max_evaluations: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// Best objective value after each iteration; never increases.
    pub history: Vec<f64>,
    pub converged: bool,
}

pub fn minimize(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: Options) -> Minimum {
    let n = x0.len();
    assert!(n > 0, "cannot minimize over zero dimensions");
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, (1.0 - 1.0 / nf).max(0.5));

    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_nan() { f64::INFINITY } else { v }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evaluations)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i] != 0.0 { opts.initial_step * x[i] } else { opts.initial_step };
        let v = eval(&x, &mut evaluations);
        simplex.push((x, v));
    }

    let mut history = Vec::new();
    let mut converged = false;
    loop {
        // Stable sort keeps the ordering deterministic for ties.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        history.push(simplex[0].1);
        if diameter(&simplex) < opts.diameter_tol {
            converged = true;
            break;
        }
        if evaluations >= opts.max_evaluations {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / nf;
            }
        }
        let toward = |t: f64, from: &[f64]| -> Vec<f64> {
            centroid.iter().zip(from).map(|(c, w)| c + t * (c - w)).collect()
        };

        let worst = simplex[n].clone();
        let best_v = simplex[0].1;
        let second_worst_v = simplex[n - 1].1;

        let xr = toward(alpha, &worst.0);
        let vr = eval(&xr, &mut evaluations);
        if vr < best_v {
            let xe = toward(alpha * beta, &worst.0);
            let ve = eval(&xe, &mut evaluations);
            simplex[n] = if ve < vr { (xe, ve) } else { (xr, vr) };
            continue;
        }
        if vr < second_worst_v {
            simplex[n] = (xr, vr);
            continue;
        }
        let outside = vr < worst.1;
        let xc = toward(if outside { alpha * gamma } else { -gamma }, &worst.0);
        let vc = eval(&xc, &mut evaluations);
        let accept = if outside { vc <= vr } else { vc < worst.1 };
        if accept {
            simplex[n] = (xc, vc);
            continue;
        }

        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, v)| b + delta * (v - b)).collect();
            let v = eval(&x, &mut evaluations);
            *vertex = (x, v);
        }
    }

    let (x, value) = simplex.swap_remove(0);
    Minimum { x, value, evaluations, history, converged }
}

fn diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let best = &simplex[0].0;
    simplex[1..]
        .iter()
        .map(|(x, _)| x.iter().zip(best).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn finds_rosenbrock_valley_minimum() {
        let m = minimize(rosenbrock, &[-1.2, 1.0], Options { initial_step: 0.1, ..Options::default() });
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn quadratic_in_five_dimensions() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * (v - 0.5).powi(2)).sum();
        let m = minimize(f, &[3.0, -2.0, 1.0, 0.0, 4.0], Options { initial_step: 0.5, ..Options::default() });
        assert!(m.converged);
        assert!(m.x.iter().all(|v| (v - 0.5).abs() < 1e-6), "{:?}", m.x);
    }

    #[test]
    fn history_is_monotone_and_budget_respected() {
        let opts = Options { max_evaluations: 50, ..Options::default() };
        let m = minimize(rosenbrock, &[-1.2, 1.0], opts);
        assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
        // One iteration can overshoot by at most n + 1 shrink evaluations.
        assert!(m.evaluations <= 50 + 3);
        assert!(!m.converged);
    }

    #[test]
    fn nan_is_treated_as_worst() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let m = minimize(f, &[0.2], Options { initial_step: 0.5, ..Options::default() });
        assert!((m.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic() {
        let a = minimize(rosenbrock, &[0.0, 0.0], Options::default());
        let b = minimize(rosenbrock, &[0.0, 0.0], Options::default());
        assert_eq!(a, b);
    }
}

//! Dense strictly convex QP with named constraint groups.
//!
//! Thin layer over the Goldfarb-Idnani solver in the `quadprog` crate. Rows
//! carry a group label so that an infeasible problem can be explained in
//! terms of which family of constraints is responsible.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: DVector<f64>,
    pub rhs: f64,
    pub group: String,
}

/// `min 1/2 x'Hx + g'x  s.t.  E x = e,  C x <= d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub equalities: Vec<Row>,
    pub inequalities: Vec<Row>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// One multiplier per row, equalities first. Inequality multipliers are
    /// nonnegative and satisfy `Hx + g + E'y + C'z = 0`.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Solved(QpSolution),
    Infeasible,
}

impl Qp {
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        assert_eq!(hessian.nrows(), gradient.len());
        assert_eq!(hessian.ncols(), gradient.len());
        Self { hessian, gradient, equalities: Vec::new(), inequalities: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn add_eq(&mut self, coeffs: DVector<f64>, rhs: f64, group: &str) {
        assert_eq!(coeffs.len(), self.dim());
        self.equalities.push(Row { coeffs, rhs, group: group.to_owned() });
    }

    pub fn add_le(&mut self, coeffs: DVector<f64>, rhs: f64, group: &str) {
        assert_eq!(coeffs.len(), self.dim());
        self.inequalities.push(Row { coeffs, rhs, group: group.to_owned() });
    }

    pub fn add_ge(&mut self, coeffs: DVector<f64>, rhs: f64, group: &str) {
        self.add_le(-coeffs, -rhs, group);
    }

    /// Distinct group labels in insertion order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for row in self.equalities.iter().chain(&self.inequalities) {
            if !out.contains(&row.group) {
                out.push(row.group.clone());
            }
        }
        out
    }

    pub fn solve(&self) -> Result<QpOutcome> {
        self.solve_filtered(|_| true)
    }

    /// Solve with every row of the listed groups removed.
    pub fn solve_without(&self, dropped: &[String]) -> Result<QpOutcome> {
        self.solve_filtered(|row| !dropped.contains(&row.group))
    }

    fn solve_filtered(&self, keep: impl Fn(&Row) -> bool) -> Result<QpOutcome> {
        let n = self.dim();
        let eq: Vec<&Row> = self.equalities.iter().filter(|r| keep(r)).collect();
        let ineq: Vec<&Row> = self.inequalities.iter().filter(|r| keep(r)).collect();
        let rows: Vec<&Row> = eq.iter().chain(ineq.iter()).copied().collect();

        let mut q: Vec<f64> = (0..n * n).map(|k| self.hessian[(k / n, k % n)]).collect();
        let mut amat = Vec::with_capacity(rows.len() * n);
        for row in &rows {
            amat.extend(row.coeffs.iter());
        }
        let bvec: Vec<f64> = rows.iter().map(|r| r.rhs).collect();

        let sol = match quadprog::solve_qp(&mut q, self.gradient.as_slice(), &amat, &bvec, eq.len(), false) {
            Ok(sol) => sol,
            Err(quadprog::Error::Infeasible) => return Ok(QpOutcome::Infeasible),
            Err(e) => return Err(Error::Qp(format!("{e:?}"))),
        };
        let x = DVector::from_vec(sol.sol);
        let mut multipliers = DVector::from_vec(sol.lagr);
        equality_multipliers(self, &eq, &ineq, &x, &mut multipliers)?;
        let kkt = residuals(self, &rows, eq.len(), &x, &multipliers);
        let objective = 0.5 * x.dot(&(&self.hessian * &x)) + self.gradient.dot(&x);
        Ok(QpOutcome::Solved(QpSolution { x, objective, multipliers, iterations: sol.iter, kkt }))
    }

    /// Groups whose removal alone restores feasibility. Falls back to
    /// pairs, and finally to every group when no small subset explains it.
    pub fn explain_infeasibility(&self) -> Result<Vec<String>> {
        let groups = self.groups();
        let mut single = Vec::new();
        for g in &groups {
            if matches!(self.solve_without(std::slice::from_ref(g))?, QpOutcome::Solved(_)) {
                single.push(g.clone());
            }
        }
        if !single.is_empty() {
            return Ok(single);
        }
        for (i, a) in groups.iter().enumerate() {
            for b in &groups[i + 1..] {
                let pair = [a.clone(), b.clone()];
                if matches!(self.solve_without(&pair)?, QpOutcome::Solved(_)) {
                    return Ok(pair.to_vec());
                }
            }
        }
        Ok(groups)
    }
}

/// The solver only reports multiplier magnitudes, which loses the sign of
/// equality multipliers. Recover them by least squares on stationarity.
fn equality_multipliers(
    qp: &Qp,
    eq: &[&Row],
    ineq: &[&Row],
    x: &DVector<f64>,
    multipliers: &mut DVector<f64>,
) -> Result<()> {
    if eq.is_empty() {
        return Ok(());
    }
    let mut rhs = -(&qp.hessian * x + &qp.gradient);
    for (k, row) in ineq.iter().enumerate() {
        rhs -= &row.coeffs * multipliers[eq.len() + k];
    }
    let et = DMatrix::from_columns(&eq.iter().map(|r| r.coeffs.clone()).collect::<Vec<_>>());
    let y = et
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Qp(e.to_owned()))?;
    multipliers.rows_mut(0, eq.len()).copy_from(&y);
    Ok(())
}

fn residuals(qp: &Qp, rows: &[&Row], meq: usize, x: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let mut grad = &qp.hessian * x + &qp.gradient;
    let mut out = KktResiduals::default();
    for (i, row) in rows.iter().enumerate() {
        let l = lambda[i];
        grad += &row.coeffs * l;
        let slack = row.coeffs.dot(x) - row.rhs;
        if i < meq {
            out.primal = out.primal.max(slack.abs());
        } else {
            out.primal = out.primal.max(slack.max(0.0));
            out.dual = out.dual.max((-l).max(0.0));
            out.complementarity = out.complementarity.max((l * slack).abs());
        }
    }
    out.stationarity = grad.amax();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn solved(o: QpOutcome) -> QpSolution {
        match o {
            QpOutcome::Solved(s) => s,
            QpOutcome::Infeasible => panic!("unexpectedly infeasible"),
        }
    }

    #[test]
    fn projection_onto_halfspace() {
        // min 1/2|x|^2 + x0  s.t. x0 + 2 x1 >= 1
        let mut qp = Qp::new(DMatrix::identity(2, 2), v(&[1.0, 0.0]));
        qp.add_ge(v(&[1.0, 2.0]), 1.0, "half");
        let s = solved(qp.solve().unwrap());
        assert_relative_eq!(s.x[0], -0.6, epsilon = 1e-12);
        assert_relative_eq!(s.x[1], 0.8, epsilon = 1e-12);
        assert!(s.kkt.max() < 1e-10, "{:?}", s.kkt);
        assert!(s.multipliers[0] > 0.0);
    }

    #[test]
    fn equality_constrained() {
        let mut qp = Qp::new(DMatrix::identity(2, 2) * 2.0, v(&[0.0, 0.0]));
        qp.add_eq(v(&[1.0, 1.0]), 1.0, "sum");
        let s = solved(qp.solve().unwrap());
        assert_relative_eq!(s.x[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.x[1], 0.5, epsilon = 1e-12);
        assert!(s.kkt.max() < 1e-10, "{:?}", s.kkt);
        assert_relative_eq!(s.multipliers[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_is_reported_and_explained() {
        let mut qp = Qp::new(DMatrix::identity(1, 1), v(&[0.0]));
        qp.add_le(v(&[1.0]), 0.0, "upper");
        qp.add_ge(v(&[1.0]), 1.0, "lower");
        qp.add_le(v(&[1.0]), 5.0, "loose");
        assert_eq!(qp.solve().unwrap(), QpOutcome::Infeasible);
        assert_eq!(qp.explain_infeasibility().unwrap(), vec!["upper".to_owned(), "lower".to_owned()]);
        let s = solved(qp.solve_without(&["upper".to_owned()]).unwrap());
        assert_relative_eq!(s.x[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn indefinite_hessian_is_an_error() {
        let qp = Qp::new(DMatrix::from_diagonal(&v(&[1.0, -1.0])), v(&[0.0, 0.0]));
        assert!(matches!(qp.solve(), Err(Error::Qp(_))));
    }

    proptest! {
        /// Box-constrained separable QP has a closed-form answer: clip the
        /// unconstrained minimizer to the box.
        #[test]
        fn box_qp_matches_clipping(
            diag in proptest::collection::vec(0.1..10.0f64, 4),
            lin in proptest::collection::vec(-10.0..10.0f64, 4),
            lo in proptest::collection::vec(-2.0..0.0f64, 4),
            width in proptest::collection::vec(0.01..3.0f64, 4),
        ) {
            let n = 4;
            let mut qp = Qp::new(DMatrix::from_diagonal(&v(&diag)), v(&lin));
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                qp.add_le(e.clone(), lo[i] + width[i], "box");
                qp.add_ge(e, lo[i], "box");
            }
            let s = solved(qp.solve().unwrap());
            for i in 0..n {
                let want = (-lin[i] / diag[i]).clamp(lo[i], lo[i] + width[i]);
                prop_assert!((s.x[i] - want).abs() < 1e-9);
            }
            prop_assert!(s.kkt.max() < 1e-8, "{:?}", s.kkt);
        }

        #[test]
        fn mixed_problems_satisfy_kkt(
            h in proptest::collection::vec(-1.0..1.0f64, 9),
            g in proptest::collection::vec(-5.0..5.0f64, 3),
            e in proptest::collection::vec(-1.0..1.0f64, 3),
            c in proptest::collection::vec(-1.0..1.0f64, 6),
            rhs in proptest::collection::vec(-0.5..0.5f64, 2),
        ) {
            let m = DMatrix::from_row_slice(3, 3, &h);
            let hess = &m * m.transpose() + DMatrix::identity(3, 3);
            let mut qp = Qp::new(hess, v(&g));
            qp.add_eq(v(&e).add_scalar(2.0), 0.1, "eq");
            // Both halfspaces contain the origin shifted by rhs >= -0.5, so
            // together with the equality the problem stays feasible.
            qp.add_le(v(&c[..3]), 1.0 + rhs[0], "a");
            qp.add_le(v(&c[3..]), 1.0 + rhs[1], "b");
            if let QpOutcome::Solved(s) = qp.solve().unwrap() {
                prop_assert!(s.kkt.max() < 1e-8, "{:?}", s.kkt);
            }
        }
    }
}

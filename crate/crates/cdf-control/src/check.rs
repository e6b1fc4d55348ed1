//! Independent numerical cross-checks.
//!
//! Everything in this module is deliberately naive: central finite
//! differences for gradients and divergences, and a first-order dual
//! projected-gradient method for quadratic programs. None of it shares code
//! with the analytic gradients in [`crate::density`] or with the active-set
//! solver in [`crate::qp`], so the test suites can use these routines as
//! one-sided referees. The finite-difference divergence is also the
//! production fallback for user-defined systems that do not supply analytic
//! divergences.

use nalgebra::{DMatrix, DVector};

use crate::qp::QpProblem;

/// Central-difference gradient of a scalar field.
pub fn central_gradient<F>(f: F, x: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut probe = x.clone();
    for i in 0..n {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Central-difference divergence of a vector field, `Σ_i ∂F_i/∂x_i`.
pub fn central_divergence<F>(field: F, x: &DVector<f64>, step: f64) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut div = 0.0;
    let mut probe = x.clone();
    for i in 0..n {
        probe[i] = x[i] + step;
        let hi = field(&probe)[i];
        probe[i] = x[i] - step;
        let lo = field(&probe)[i];
        probe[i] = x[i];
        div += (hi - lo) / (2.0 * step);
    }
    div
}

/// Reference solution of a strictly convex QP by accelerated projected
/// gradient ascent on the dual.
///
/// Minimizes `½ uᵀHu + qᵀu` subject to `A u ≥ b` and box bounds, using only
/// a Cholesky solve with `H` and nonnegativity clamping of the multipliers.
/// Returns the primal point and objective once the KKT residual drops below
/// `tol`, or `None` if `max_iter` iterations do not get there (which is the
/// expected behaviour on infeasible data).
pub fn reference_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Option<(DVector<f64>, f64)> {
    let hessian = &problem.hessian;
    let linear = &problem.linear;
    let a_ineq = &problem.a_ineq;
    let b_ineq = &problem.b_ineq;
    let lower = &problem.lower;
    let upper = &problem.upper;
    let p = linear.len();
    let chol = nalgebra::Cholesky::new(hessian.clone())?;

    // Stack A u ≥ b with the finite bound rows e_i u ≥ l_i and -e_i u ≥ -u_i.
    // Rows are normalized to unit length (same feasible set, far better dual
    // conditioning when the caller mixes O(1) and O(1/ε) coefficients).
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..a_ineq.nrows() {
        let row = a_ineq.row(i).transpose();
        let norm = row.norm();
        if norm > 0.0 {
            rows.push(row / norm);
            rhs.push(b_ineq[i] / norm);
        } else if b_ineq[i] > 0.0 {
            return None; // 0 ≥ b with b > 0 can never hold
        }
    }
    for i in 0..p {
        if lower[i].is_finite() {
            let mut e = DVector::zeros(p);
            e[i] = 1.0;
            rows.push(e);
            rhs.push(lower[i]);
        }
        if upper[i].is_finite() {
            let mut e = DVector::zeros(p);
            e[i] = -1.0;
            rows.push(e);
            rhs.push(-upper[i]);
        }
    }

    let objective = |u: &DVector<f64>| 0.5 * u.dot(&(hessian * u)) + linear.dot(u);

    if rows.is_empty() {
        let u = chol.solve(&(-linear));
        let obj = objective(&u);
        return Some((u, obj));
    }

    let total = rows.len();
    let mut c = DMatrix::zeros(total, p);
    for (i, row) in rows.iter().enumerate() {
        c.row_mut(i).copy_from(&row.transpose());
    }
    let d = DVector::from_vec(rhs);

    // Step size from the dual gradient's Lipschitz constant ‖C H⁻¹ Cᵀ‖.
    let hinv_ct = chol.solve(&c.transpose());
    let dual_hessian = &c * &hinv_ct;
    let lipschitz = DMatrix::symmetric_eigen(dual_hessian.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &e| acc.max(e.abs()));
    if lipschitz <= 0.0 || !lipschitz.is_finite() {
        let u = chol.solve(&(-linear));
        let obj = objective(&u);
        return Some((u, obj));
    }
    let step = 1.0 / (lipschitz * 1.000001);

    let primal = |lam: &DVector<f64>| chol.solve(&(c.transpose() * lam - linear));

    let mut lam = DVector::zeros(total);
    let mut momentum = lam.clone();
    let mut theta = 1.0f64;
    for _ in 0..max_iter {
        let u = primal(&momentum);
        let slack = &c * &u - &d;
        let mut lam_next = &momentum - step * &slack;
        for v in lam_next.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        momentum = &lam_next + ((theta - 1.0) / theta_next) * (&lam_next - &lam);
        lam = lam_next;
        theta = theta_next;

        let u_now = primal(&lam);
        let slack_now = &c * &u_now - &d;
        let worst_violation = slack_now.iter().fold(0.0f64, |acc, &s| acc.max(-s));
        let worst_comp = slack_now
            .iter()
            .zip(lam.iter())
            .fold(0.0f64, |acc, (&s, &l)| acc.max((s * l).abs()));
        if worst_violation <= tol && worst_comp <= tol {
            let obj = objective(&u_now);
            return Some((u_now, obj));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_quadratic_is_linear() {
        let f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[1];
        let x = DVector::from_vec(vec![2.0, -1.0]);
        let g = central_gradient(f, &x, 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn divergence_of_linear_field() {
        // F = (3x, -5y) has divergence -2 everywhere.
        let field = |x: &DVector<f64>| DVector::from_vec(vec![3.0 * x[0], -5.0 * x[1]]);
        let x = DVector::from_vec(vec![0.7, 0.3]);
        assert!((central_divergence(field, &x, 1e-6) + 2.0).abs() < 1e-8);
    }

    #[test]
    fn reference_qp_projects_onto_halfspace() {
        // min ‖u‖² s.t. u_1 ≥ 1 → u = (1, 0).
        let inf = f64::INFINITY;
        let problem = QpProblem {
            hessian: DMatrix::identity(2, 2) * 2.0,
            linear: DVector::zeros(2),
            a_ineq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b_ineq: DVector::from_vec(vec![1.0]),
            lower: DVector::from_vec(vec![-inf, -inf]),
            upper: DVector::from_vec(vec![inf, inf]),
        };
        let (u, obj) = reference_qp(&problem, 1e-10, 200_000).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-7);
        assert!(u[1].abs() < 1e-7);
        assert!((obj - 1.0).abs() < 1e-7);
    }
}

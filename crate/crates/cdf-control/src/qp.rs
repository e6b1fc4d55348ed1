//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! min ½ uᵀHu + qᵀu   s.t.  A u ≥ b,   lower ≤ u ≤ upper
//! ```
//!
//! with a dual active-set iteration in the Goldfarb–Idnani family: start at
//! the unconstrained minimizer, repeatedly pull in the most violated
//! constraint, and take coupled primal/dual steps computed from a dense
//! Cholesky solve of the working-set KKT system, refactored on every
//! working-set change. Problems here are tiny (a dozen variables, a few
//! hundred rows at most), so exactness and determinism are worth more than
//! incremental factor updates. Ties in constraint selection always break
//! toward the lowest index, which makes the solve reproducible bit for bit.
//!
//! The per-step programs mix row magnitudes (trace rows scale as 1/ε next to
//! near-zero density rows) and objective weights (the slack penalty), and
//! their optima sit on degenerate vertices more often than not. The solver
//! therefore equilibrates both the objective diagonal and the constraint
//! rows, re-solves the working-set system with iterative refinement before
//! accepting any candidate optimum, and classifies termination in the
//! caller's units against the tolerances the downstream certificates use.
//!
//! Box bounds are handled as stacked rows; indices reported in
//! [`QpSolution::active_set`] and violation reports follow that stacking:
//! inequality rows first, then lower bounds, then upper bounds.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Hard cap on `r + 2p`; the solver is built for the small-problem regime.
const MAX_STACKED_ROWS: usize = 512;

/// Violations below this threshold never pull a row into the working set.
const FEASIBILITY_TOL: f64 = 1e-10;

/// Acceptance tolerance for general inequality rows, in the caller's units:
/// a point is accepted as a solution only when every row holds this tightly,
/// which keeps a factor-two margin inside the 1e-6 certificates the
/// controller publishes. Degenerate vertices cannot be resolved much past
/// this in double precision.
const ACCEPT_TOL: f64 = 5e-7;

/// Acceptance tolerance for box-bound rows, which are perfectly conditioned
/// and promised to hold much tighter than general rows.
const BOUND_ACCEPT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("objective matrix is not symmetric within 1e-12")]
    NotSymmetric,
    #[error("objective matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite entry in problem data: {0}")]
    NonFinite(String),
    #[error("problem too large: {0} stacked rows exceed {MAX_STACKED_ROWS}")]
    TooLarge(usize),
}

/// A dense strictly convex QP with inequality rows `A u ≥ b` and box bounds.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Problem with no inequality rows and free variables.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let p = linear.len();
        Self {
            hessian,
            linear,
            a_ineq: DMatrix::zeros(0, p),
            b_ineq: DVector::zeros(0),
            lower: DVector::from_element(p, f64::NEG_INFINITY),
            upper: DVector::from_element(p, f64::INFINITY),
        }
    }

    pub fn num_variables(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u)
    }

    fn validate(&self) -> Result<(), QpError> {
        let p = self.num_variables();
        if self.hessian.nrows() != p || self.hessian.ncols() != p {
            return Err(QpError::Dimension(format!(
                "hessian is {}x{}, expected {p}x{p}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        let r = self.a_ineq.nrows();
        if self.a_ineq.ncols() != p && r > 0 {
            return Err(QpError::Dimension(format!(
                "constraint matrix has {} columns, expected {p}",
                self.a_ineq.ncols()
            )));
        }
        if self.b_ineq.len() != r {
            return Err(QpError::Dimension(format!(
                "constraint rhs has length {}, expected {r}",
                self.b_ineq.len()
            )));
        }
        if self.lower.len() != p || self.upper.len() != p {
            return Err(QpError::Dimension("bound vector length".into()));
        }
        if r + 2 * p > MAX_STACKED_ROWS {
            return Err(QpError::TooLarge(r + 2 * p));
        }
        for (name, data) in [
            ("hessian", self.hessian.as_slice()),
            ("linear", self.linear.as_slice()),
            ("a_ineq", self.a_ineq.as_slice()),
            ("b_ineq", self.b_ineq.as_slice()),
        ] {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(QpError::NonFinite(name.into()));
            }
        }
        for i in 0..p {
            if self.lower[i].is_nan() || self.upper[i].is_nan() {
                return Err(QpError::NonFinite("bounds".into()));
            }
            if self.lower[i] > self.upper[i] {
                return Err(QpError::Dimension(format!(
                    "lower bound exceeds upper bound on variable {i}"
                )));
            }
            if self.lower[i] == f64::INFINITY || self.upper[i] == f64::NEG_INFINITY {
                return Err(QpError::NonFinite("bounds".into()));
            }
        }
        let asym = (&self.hessian - self.hessian.transpose()).abs().max();
        let asym_tol = 1e-12 * self.hessian.abs().max().max(1.0);
        if p > 0 && (asym.is_nan() || asym > asym_tol) {
            return Err(QpError::NotSymmetric);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Solver output. `active_set` and `most_violated` index the stacked rows
/// (inequalities, then lower bounds, then upper bounds).
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub active_set: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    /// Populated when `status == Infeasible`: stacked row index and the
    /// magnitude of its violation at the final iterate.
    pub most_violated: Option<(usize, f64)>,
    pub iterations: usize,
}

/// Constraint rows with their stacked indexing. The solver iterates on
/// row-equilibrated copies (each row scaled to unit norm): mixed-magnitude
/// rows (CDF problems pair O(1/ε) trace rows with O(ρ) divergence rows)
/// otherwise push the working-set Gram matrix towards singularity and the
/// returned point can drift off its own active constraints. Multipliers are
/// scaled back before they are reported.
struct StackedRows {
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
    scales: Vec<f64>,
    original_rows: DMatrix<f64>,
    original_rhs: DVector<f64>,
    num_ineq: usize,
}

impl StackedRows {
    fn build(problem: &QpProblem) -> Self {
        let p = problem.num_variables();
        let r = problem.a_ineq.nrows();
        let mut rows_vec: Vec<f64> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for i in 0..r {
            rows_vec.extend(problem.a_ineq.row(i).iter());
            rhs.push(problem.b_ineq[i]);
        }
        for i in 0..p {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            rows_vec.extend(e.iter());
            rhs.push(problem.lower[i]);
        }
        for i in 0..p {
            let mut e = vec![0.0; p];
            e[i] = -1.0;
            rows_vec.extend(e.iter());
            rhs.push(-problem.upper[i]);
        }
        let total = r + 2 * p;
        let original_rows = DMatrix::from_row_slice(total, p, &rows_vec);
        let original_rhs = DVector::from_vec(rhs);
        let mut rows = original_rows.clone();
        let mut rhs = original_rhs.clone();
        let mut scales = vec![1.0; total];
        for i in 0..total {
            let norm = original_rows.row(i).norm();
            if norm > 0.0 {
                scales[i] = norm;
                rows.row_mut(i).scale_mut(1.0 / norm);
                rhs[i] /= norm;
            }
        }
        Self {
            rows,
            rhs,
            scales,
            original_rows,
            original_rhs,
            num_ineq: r,
        }
    }

    fn accept_tol(&self, idx: usize) -> f64 {
        if idx < self.num_ineq {
            ACCEPT_TOL
        } else {
            BOUND_ACCEPT_TOL
        }
    }

    /// Violation in the more forgiving of the two measures: the caller's
    /// units and the row-normalized (geometric) units. Large-coefficient rows
    /// otherwise amplify arithmetic noise, tiny-coefficient rows shrink it.
    /// Used only to decide which rows are worth entering the working set.
    fn min_violation(&self, idx: usize, x: &DVector<f64>) -> f64 {
        let scaled = -self.slack(idx, x);
        let original = -self.original_slack(idx, x);
        scaled.min(original)
    }

    /// Violation in the caller's units; the measure all acceptance and
    /// certificate decisions use.
    fn original_violation(&self, idx: usize, x: &DVector<f64>) -> f64 {
        -self.original_slack(idx, x)
    }

    /// Every row holds to within its acceptance tolerance at `x`.
    fn acceptable_point(&self, x: &DVector<f64>) -> bool {
        (0..self.original_rows.nrows())
            .all(|i| self.is_vacuous(i) || self.original_violation(i, x) <= self.accept_tol(i))
    }

    /// Rows for ±∞ bounds can never be violated and are skipped.
    fn is_vacuous(&self, idx: usize) -> bool {
        self.rhs[idx] == f64::NEG_INFINITY
    }

    /// Slack of the equilibrated row (the signed distance to the halfspace
    /// boundary when the row is nonzero).
    fn slack(&self, idx: usize, x: &DVector<f64>) -> f64 {
        self.rows.row(idx).dot(&x.transpose()) - self.rhs[idx]
    }

    fn original_slack(&self, idx: usize, x: &DVector<f64>) -> f64 {
        self.original_rows.row(idx).dot(&x.transpose()) - self.original_rhs[idx]
    }
}

/// Solve a QP. Infeasibility and iteration exhaustion are reported through
/// [`QpSolution::status`]; `Err` is reserved for malformed problem data.
pub fn qp_solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    let p = problem.num_variables();
    let r = problem.a_ineq.nrows();
    solve_with_limit(problem, 100 * (r + p).max(1))
}

/// Equilibrate, solve, and report in the caller's coordinates.
///
/// The iteration runs on `y = D⁻¹u` with `D = diag(H_ii^{-1/2})`, which gives
/// the transformed objective a unit diagonal. Heavily anisotropic objectives
/// (the slack relaxation weighs one variable a million times more than the
/// rest) otherwise erode the working-set factorizations enough to stall the
/// active-set iteration. Multipliers are identical in both coordinate
/// systems; only the primal point needs mapping back.
fn solve_with_limit(problem: &QpProblem, iteration_limit: usize) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let p = problem.num_variables();
    let mut d = DVector::from_element(p, 1.0);
    for i in 0..p {
        let h_ii = problem.hessian[(i, i)];
        if h_ii <= 0.0 {
            return Err(QpError::NotPositiveDefinite);
        }
        d[i] = 1.0 / h_ii.sqrt();
    }
    let scale = DMatrix::from_diagonal(&d);
    let scaled = QpProblem {
        hessian: &scale * &problem.hessian * &scale,
        linear: scale.clone() * &problem.linear,
        a_ineq: &problem.a_ineq * &scale,
        b_ineq: problem.b_ineq.clone(),
        lower: DVector::from_fn(p, |i, _| problem.lower[i] / d[i]),
        upper: DVector::from_fn(p, |i, _| problem.upper[i] / d[i]),
    };
    let mut inner = solve_equilibrated(&scaled, iteration_limit)?;
    if inner.status == QpStatus::IterationLimit {
        if let Some(rescued) = retry_with_perturbation(&scaled, iteration_limit) {
            inner = rescued;
        }
    }

    // Map back: u = D y. Inequality rows keep the same linear functional in
    // both coordinate systems, so their multipliers carry over; bound rows
    // are unit rows in y-space but scale by 1/d_i against u.
    let u_star = DVector::from_fn(p, |i, _| inner.u_star[i] * d[i]);
    let r = problem.a_ineq.nrows();
    let multipliers: Vec<f64> = inner
        .active_set
        .iter()
        .zip(inner.multipliers.iter())
        .map(|(&ci, &lam)| {
            if ci < r {
                lam
            } else if ci < r + p {
                lam / d[ci - r]
            } else {
                lam / d[ci - r - p]
            }
        })
        .collect();
    let stacked = StackedRows::build(problem);

    // Final classification happens in the caller's units: an "infeasible"
    // verdict from a degenerate vertex whose point actually satisfies every
    // row to certificate precision is a numerical artifact, not a verdict.
    let status = match inner.status {
        QpStatus::Infeasible => {
            if stacked.acceptable_point(&u_star) {
                QpStatus::Optimal
            } else {
                QpStatus::Infeasible
            }
        }
        other => other,
    };

    let kkt = kkt_residual(problem, &stacked, &u_star, &inner.active_set, &multipliers);
    let most_violated = match status {
        QpStatus::Infeasible | QpStatus::IterationLimit => worst_violation(&stacked, &u_star),
        QpStatus::Optimal => None,
    };
    Ok(QpSolution {
        objective: problem.objective(&u_star),
        u_star,
        status,
        active_set: inner.active_set,
        multipliers,
        kkt_residual: kkt,
        most_violated,
        iterations: inner.iterations,
    })
}

fn solve_equilibrated(problem: &QpProblem, iteration_limit: usize) -> Result<QpSolution, QpError> {
    let chol =
        nalgebra::Cholesky::new(problem.hessian.clone()).ok_or(QpError::NotPositiveDefinite)?;
    let stacked = StackedRows::build(problem);
    let total = stacked.rows.nrows();

    let mut x = chol.solve(&(-&problem.linear));
    let mut working: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    let finish = |x: DVector<f64>,
                  working: Vec<usize>,
                  lambda: Vec<f64>,
                  status: QpStatus,
                  iterations: usize| {
        // Multipliers were computed against unit-norm rows; scale them back
        // so stationarity holds with the caller's row data.
        let lambda: Vec<f64> = working
            .iter()
            .zip(lambda.iter())
            .map(|(&ci, &l)| l / stacked.scales[ci])
            .collect();
        let kkt = kkt_residual(problem, &stacked, &x, &working, &lambda);
        let most_violated = match status {
            QpStatus::Infeasible | QpStatus::IterationLimit => worst_violation(&stacked, &x),
            QpStatus::Optimal => None,
        };
        let objective = problem.objective(&x);
        QpSolution {
            u_star: x,
            objective,
            status,
            active_set: working,
            multipliers: lambda,
            kkt_residual: kkt,
            most_violated,
            iterations,
        }
    };

    // Two-stage termination tolerance: degenerate vertices can leave residuals
    // hovering at the tight threshold, with rows cycling in and out of the
    // working set; after this many iterations the looser certificate-level
    // tolerance takes over.
    let lenient_start = 10 * (total + problem.num_variables()).max(1);

    'outer: loop {
        let lenient = iterations >= lenient_start;
        // A row wants to enter when it is violated in both the geometric and
        // the caller's measure (tight phase), or beyond the caller-unit
        // acceptance tolerance (lenient phase). Ascending scan, so ties
        // resolve to the lowest index.
        let wants_entry = |i: usize, x: &DVector<f64>| -> Option<f64> {
            if stacked.is_vacuous(i) {
                return None;
            }
            if lenient {
                let violation = stacked.original_violation(i, x);
                (violation > stacked.accept_tol(i)).then_some(violation)
            } else {
                let violation = stacked.min_violation(i, x);
                (violation > FEASIBILITY_TOL).then_some(violation)
            }
        };
        let mut entering: Option<(usize, f64)> = None;
        for i in 0..total {
            if working.contains(&i) {
                continue;
            }
            if let Some(violation) = wants_entry(i, &x) {
                let better = match entering {
                    None => true,
                    Some((_, best)) => violation > best,
                };
                if better {
                    entering = Some((i, violation));
                }
            }
        }
        let Some((enter_idx, _)) = entering else {
            // Candidate optimum. The incremental iterate can drift off its
            // working set after many partial steps, so re-solve the
            // equality-constrained problem on the working set from scratch
            // and only return once the polished point passes a full rescan.
            let Some((x_pol, lam_pol)) = working_set_solution(&chol, &stacked, &working, problem)
            else {
                return Ok(finish(
                    x,
                    working,
                    lambda,
                    QpStatus::IterationLimit,
                    iterations,
                ));
            };
            iterations += 1;
            if iterations > iteration_limit {
                return Ok(finish(
                    x_pol,
                    working,
                    lam_pol,
                    QpStatus::IterationLimit,
                    iterations,
                ));
            }
            // Dual feasibility first: a clearly negative multiplier means the
            // row should leave the working set.
            let mut drop_idx: Option<usize> = None;
            let mut most_negative = -1e-11;
            for (k, &lam) in lam_pol.iter().enumerate() {
                if lam < most_negative {
                    most_negative = lam;
                    drop_idx = Some(k);
                }
            }
            x = x_pol;
            lambda = lam_pol;
            if let Some(k) = drop_idx {
                working.remove(k);
                lambda.remove(k);
                continue 'outer;
            }
            // Working rows are enforced (and verified) by the polish and can
            // never re-enter; only the remaining rows decide whether the
            // point is final.
            let clean = (0..total).all(|i| working.contains(&i) || wants_entry(i, &x).is_none());
            if clean {
                return Ok(finish(x, working, lambda, QpStatus::Optimal, iterations));
            }
            // Some row is genuinely violated at the polished point; the next
            // pass will pull it in.
            continue 'outer;
        };

        let a_new = stacked.rows.row(enter_idx).transpose();
        let mut entering_multiplier = 0.0f64;

        loop {
            iterations += 1;
            if iterations > iteration_limit {
                return Ok(finish(
                    x,
                    working,
                    lambda,
                    QpStatus::IterationLimit,
                    iterations,
                ));
            }

            // Primal direction z and dual direction r for the working set,
            // from a fresh factorization of A_W H⁻¹ A_Wᵀ.
            let hinv_a = chol.solve(&a_new);
            let (z, dual_dir) = if working.is_empty() {
                (hinv_a.clone(), Vec::new())
            } else {
                let w = working.len();
                let p_dim = problem.num_variables();
                let mut a_w = DMatrix::zeros(w, p_dim);
                for (row_pos, &ci) in working.iter().enumerate() {
                    a_w.row_mut(row_pos).copy_from(&stacked.rows.row(ci));
                }
                let hinv_awt = chol.solve(&a_w.transpose());
                let gram = &a_w * &hinv_awt;
                let Some(gram_chol) = nalgebra::Cholesky::new(gram) else {
                    // Working-set rows became numerically dependent; declare
                    // the step degenerate and fall back to a dual-only move.
                    return Ok(finish(
                        x,
                        working,
                        lambda,
                        QpStatus::IterationLimit,
                        iterations,
                    ));
                };
                let r_dir = gram_chol.solve(&(&a_w * &hinv_a));
                let z = &hinv_a - &hinv_awt * &r_dir;
                (z, r_dir.iter().copied().collect::<Vec<f64>>())
            };

            // Dependence test: ztn = aᵀ(projected H⁻¹)a collapses to rounding
            // noise relative to aᵀH⁻¹a when a is spanned by the working set.
            // The comparison is invariant under row and objective scaling. A
            // full working set (p rows) cannot accept another independent row.
            let ztn = a_new.dot(&z);
            let hinv_quad = a_new.dot(&hinv_a);
            let z_is_null = working.len() >= problem.num_variables()
                || ztn <= 1e-10 * hinv_quad.max(f64::MIN_POSITIVE);

            // Dual blocking step over working constraints with positive dual
            // direction; ascending scan keeps the lowest index on ties.
            let mut t_dual = f64::INFINITY;
            let mut blocking: Option<usize> = None;
            for (k, &rk) in dual_dir.iter().enumerate() {
                if rk > 1e-14 {
                    let ratio = lambda[k] / rk;
                    if ratio < t_dual {
                        t_dual = ratio;
                        blocking = Some(k);
                    }
                }
            }

            let slack = stacked.slack(enter_idx, &x);
            let t_primal = if z_is_null {
                f64::INFINITY
            } else {
                -slack / ztn
            };

            if t_dual.is_infinite() && t_primal.is_infinite() {
                let status = if stacked.acceptable_point(&x) {
                    QpStatus::Optimal
                } else {
                    QpStatus::Infeasible
                };
                return Ok(finish(x, working, lambda, status, iterations));
            }

            let step = t_dual.min(t_primal);
            if !z_is_null {
                x += step * &z;
            }
            for (k, lam) in lambda.iter_mut().enumerate() {
                *lam -= step * dual_dir[k];
            }
            entering_multiplier += step;

            if t_primal <= t_dual {
                // Full step: the entering constraint is now tight.
                working.push(enter_idx);
                lambda.push(entering_multiplier);
                continue 'outer;
            }
            // Partial step: drop the blocking constraint and retry.
            let k = blocking.expect("finite dual step implies a blocking index");
            working.remove(k);
            lambda.remove(k);
        }
    }
}

/// Exact KKT solution restricted to the working set treated as equalities:
/// `x = H⁻¹(A_Wᵀλ − q)` with `λ` from `(A_W H⁻¹ A_Wᵀ) λ = b_W + A_W H⁻¹ q`.
/// Uses the equilibrated rows; `None` when the working-set Gram matrix has
/// lost positive definiteness.
fn working_set_solution(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    stacked: &StackedRows,
    working: &[usize],
    problem: &QpProblem,
) -> Option<(DVector<f64>, Vec<f64>)> {
    if working.is_empty() {
        return Some((chol.solve(&(-&problem.linear)), Vec::new()));
    }
    let w = working.len();
    let p = problem.num_variables();
    let mut a_w = DMatrix::zeros(w, p);
    let mut b_w = DVector::zeros(w);
    for (row_pos, &ci) in working.iter().enumerate() {
        a_w.row_mut(row_pos).copy_from(&stacked.rows.row(ci));
        b_w[row_pos] = stacked.rhs[ci];
    }
    let hinv_awt = chol.solve(&a_w.transpose());
    let gram = &a_w * &hinv_awt;
    let gram_chol = nalgebra::Cholesky::new(gram)?;
    let rhs = &b_w + &a_w * chol.solve(&problem.linear);
    let mut lam = gram_chol.solve(&rhs);
    let mut x = chol.solve(&(a_w.transpose() * &lam - &problem.linear));

    // Two passes of iterative refinement on the KKT system claw back the
    // digits an ill-conditioned working set costs the direct solve.
    for _ in 0..2 {
        let r_stat = -&problem.linear - &problem.hessian * &x + a_w.transpose() * &lam;
        let r_primal = &b_w - &a_w * &x;
        let d_lam = gram_chol.solve(&(&r_primal - &a_w * chol.solve(&r_stat)));
        let d_x = chol.solve(&(&r_stat + a_w.transpose() * &d_lam));
        x += d_x;
        lam += d_lam;
    }

    // The solve enforces the working rows as equalities; with a badly
    // conditioned working set the residual can exceed what acceptance allows,
    // and such a polish must not be trusted.
    for &ci in working {
        if stacked.original_violation(ci, &x) > stacked.accept_tol(ci) {
            return None;
        }
    }
    Some((x, lam.iter().copied().collect()))
}

/// Degenerate vertices (more tight rows than variables) can cycle the
/// active-set iteration. Re-solve with the constraint boundaries pulled
/// apart by tiny, deterministic, index-dependent relaxations, then Newton-
/// polish the resulting working set against the unperturbed data and accept
/// only if the polished point verifies.
fn retry_with_perturbation(problem: &QpProblem, iteration_limit: usize) -> Option<QpSolution> {
    let p = problem.num_variables();
    let mut perturbed = problem.clone();
    for i in 0..perturbed.b_ineq.len() {
        let scale = perturbed.a_ineq.row(i).norm().max(1.0);
        perturbed.b_ineq[i] -= 1e-9 * (i + 1) as f64 * scale;
    }
    for i in 0..p {
        if perturbed.lower[i].is_finite() {
            perturbed.lower[i] -= 1e-9 * (i + 1) as f64;
        }
        if perturbed.upper[i].is_finite() {
            perturbed.upper[i] += 1e-9 * (p + i + 1) as f64;
        }
    }
    let guide = solve_equilibrated(&perturbed, iteration_limit).ok()?;
    if guide.status != QpStatus::Optimal {
        return None;
    }

    // Polish the guide's working set on the unperturbed problem, shedding
    // rows whose multipliers come out negative.
    let chol = nalgebra::Cholesky::new(problem.hessian.clone())?;
    let stacked = StackedRows::build(problem);
    let mut working = guide.active_set;
    loop {
        let (x, lambda_raw) = working_set_solution(&chol, &stacked, &working, problem)?;
        let mut drop_idx: Option<usize> = None;
        let mut most_negative = -1e-11;
        for (k, &lam) in lambda_raw.iter().enumerate() {
            if lam < most_negative {
                most_negative = lam;
                drop_idx = Some(k);
            }
        }
        if let Some(k) = drop_idx {
            working.remove(k);
            continue;
        }
        if !stacked.acceptable_point(&x) {
            return None;
        }
        let lambda: Vec<f64> = working
            .iter()
            .zip(lambda_raw.iter())
            .map(|(&ci, &l)| l / stacked.scales[ci])
            .collect();
        let kkt = kkt_residual(problem, &stacked, &x, &working, &lambda);
        let objective = problem.objective(&x);
        return Some(QpSolution {
            u_star: x,
            objective,
            status: QpStatus::Optimal,
            active_set: working,
            multipliers: lambda,
            kkt_residual: kkt,
            most_violated: None,
            iterations: iteration_limit + guide.iterations,
        });
    }
}

/// Whether `u` satisfies every row of `problem` within the same acceptance
/// tolerances the solver uses for its own verdicts (min of caller-unit and
/// row-normalized violations; tighter for box bounds).
pub fn feasible_within_certificates(problem: &QpProblem, u: &DVector<f64>) -> bool {
    let stacked = StackedRows::build(problem);
    stacked.acceptable_point(u)
}

fn worst_violation(stacked: &StackedRows, x: &DVector<f64>) -> Option<(usize, f64)> {
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..stacked.original_rows.nrows() {
        if stacked.is_vacuous(i) {
            continue;
        }
        let violation = -stacked.original_slack(i, x);
        if violation > 0.0 {
            let better = match worst {
                None => true,
                Some((_, best)) => violation > best,
            };
            if better {
                worst = Some((i, violation));
            }
        }
    }
    worst
}

/// KKT residual in the caller's (unscaled) row data.
fn kkt_residual(
    problem: &QpProblem,
    stacked: &StackedRows,
    x: &DVector<f64>,
    working: &[usize],
    lambda: &[f64],
) -> f64 {
    let mut stationarity = &problem.hessian * x + &problem.linear;
    for (&ci, &lam) in working.iter().zip(lambda.iter()) {
        stationarity -= lam * stacked.original_rows.row(ci).transpose();
    }
    let stat = stationarity.abs().max();
    let mut primal = 0.0f64;
    for i in 0..stacked.original_rows.nrows() {
        if stacked.is_vacuous(i) {
            continue;
        }
        primal = primal.max(-stacked.original_slack(i, x));
    }
    let dual = lambda.iter().fold(0.0f64, |acc, &l| acc.max(-l));
    let comp = working
        .iter()
        .zip(lambda.iter())
        .fold(0.0f64, |acc, (&ci, &l)| {
            acc.max((l * stacked.original_slack(ci, x)).abs())
        });
    stat.max(primal).max(dual).max(comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::reference_qp;
    use rand::{Rng, SeedableRng};

    fn free_bounds(p: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(p, f64::NEG_INFINITY),
            DVector::from_element(p, f64::INFINITY),
        )
    }

    #[test]
    fn projects_origin_onto_halfspace() {
        let (lower, upper) = free_bounds(2);
        let problem = QpProblem {
            hessian: DMatrix::identity(2, 2) * 2.0,
            linear: DVector::zeros(2),
            a_ineq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b_ineq: DVector::from_vec(vec![1.0]),
            lower,
            upper,
        };
        let sol = qp_solve(&problem).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u_star[0] - 1.0).abs() < 1e-12);
        assert!(sol.u_star[1].abs() < 1e-12);
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert_eq!(sol.active_set, vec![0]);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn unconstrained_minimum_is_stationary_point() {
        let problem =
            QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-2.0, 3.0]));
        let sol = qp_solve(&problem).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u_star[0] - 2.0).abs() < 1e-12);
        assert!((sol.u_star[1] + 3.0).abs() < 1e-12);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn respects_box_bound_next_to_constraint() {
        let problem = QpProblem {
            hessian: DMatrix::from_row_slice(1, 1, &[2.0]),
            linear: DVector::zeros(1),
            a_ineq: DMatrix::from_row_slice(1, 1, &[1.0]),
            b_ineq: DVector::from_vec(vec![1.5]),
            lower: DVector::from_element(1, f64::NEG_INFINITY),
            upper: DVector::from_element(1, 2.0),
        };
        let sol = qp_solve(&problem).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u_star[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn reports_infeasibility_with_violation() {
        // u ≥ 1 and u ≤ 0 cannot hold together.
        let problem = QpProblem {
            hessian: DMatrix::from_row_slice(1, 1, &[2.0]),
            linear: DVector::zeros(1),
            a_ineq: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            b_ineq: DVector::from_vec(vec![1.0, 0.0]),
            lower: DVector::from_element(1, f64::NEG_INFINITY),
            upper: DVector::from_element(1, f64::INFINITY),
        };
        let sol = qp_solve(&problem).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let (idx, violation) = sol.most_violated.unwrap();
        assert!(idx < 2);
        assert!(violation > 0.0);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let problem = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::from_vec(vec![-10.0, -10.0]),
            a_ineq: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            b_ineq: DVector::from_vec(vec![-1.0, -1.0]),
            lower: DVector::from_element(2, f64::NEG_INFINITY),
            upper: DVector::from_element(2, f64::INFINITY),
        };
        let sol = solve_with_limit(&problem, 1).unwrap();
        assert_eq!(sol.status, QpStatus::IterationLimit);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite_objectives() {
        let bad_sym = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(qp_solve(&bad_sym), Err(QpError::NotSymmetric)));
        let indefinite = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(
            qp_solve(&indefinite),
            Err(QpError::NotPositiveDefinite)
        ));
    }

    fn random_feasible_problem(rng: &mut rand_chacha::ChaCha8Rng) -> QpProblem {
        let p = rng.random_range(1..=9);
        let r = rng.random_range(0..=6);
        // SPD objective via MᵀM + I.
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let hessian = m.transpose() * &m + DMatrix::identity(p, p);
        let linear = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
        // A feasible anchor point strictly inside the box.
        let anchor = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let a_ineq = DMatrix::from_fn(r, p, |_, _| rng.random_range(-1.0..1.0));
        let b_ineq = DVector::from_fn(r, |i, _| {
            a_ineq.row(i).dot(&anchor.transpose()) - rng.random_range(0.0..1.5)
        });
        let lower = DVector::from_fn(p, |i, _| {
            if rng.random_bool(0.5) {
                anchor[i] - rng.random_range(0.5..3.0)
            } else {
                f64::NEG_INFINITY
            }
        });
        let upper = DVector::from_fn(p, |i, _| {
            if rng.random_bool(0.5) {
                anchor[i] + rng.random_range(0.5..3.0)
            } else {
                f64::INFINITY
            }
        });
        QpProblem {
            hessian,
            linear,
            a_ineq,
            b_ineq,
            lower,
            upper,
        }
    }

    #[test]
    fn matches_first_order_reference_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for case in 0..60 {
            let problem = random_feasible_problem(&mut rng);
            let sol = qp_solve(&problem).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
            assert!(
                sol.kkt_residual <= 1e-8,
                "case {case}: kkt {}",
                sol.kkt_residual
            );
            let (_, ref_obj) =
                reference_qp(&problem, 1e-10, 2_000_000).expect("reference failed to converge");
            assert!(
                (sol.objective - ref_obj).abs() <= 1e-6,
                "case {case}: objective {} vs reference {ref_obj}",
                sol.objective
            );
        }
    }

    #[test]
    fn scaling_objective_leaves_minimizer_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let problem = random_feasible_problem(&mut rng);
            let scale = rng.random_range(0.1..10.0);
            let scaled = QpProblem {
                hessian: &problem.hessian * scale,
                linear: &problem.linear * scale,
                ..problem.clone()
            };
            let a = qp_solve(&problem).unwrap();
            let b = qp_solve(&scaled).unwrap();
            assert_eq!(a.status, QpStatus::Optimal);
            assert_eq!(b.status, QpStatus::Optimal);
            assert!(
                (&a.u_star - &b.u_star).abs().max() <= 1e-9,
                "minimizer moved under objective scaling"
            );
        }
    }

    #[test]
    fn extra_constraints_never_improve_objective() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let problem = random_feasible_problem(&mut rng);
            let base = qp_solve(&problem).unwrap();
            // Append a row that keeps the current minimizer feasible, so the
            // tightened problem is solvable and its optimum cannot drop.
            let p = problem.num_variables();
            let extra = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let rhs = extra.dot(&base.u_star) + rng.random_range(0.0..0.5);
            let mut a2 = problem
                .a_ineq
                .clone()
                .insert_row(problem.a_ineq.nrows(), 0.0);
            a2.row_mut(problem.a_ineq.nrows())
                .copy_from(&extra.transpose());
            let b2 = problem.b_ineq.clone().insert_row(problem.b_ineq.len(), rhs);
            let tightened = QpProblem {
                a_ineq: a2,
                b_ineq: b2,
                ..problem.clone()
            };
            let harder = qp_solve(&tightened).unwrap();
            if harder.status == QpStatus::Optimal {
                assert!(
                    harder.objective >= base.objective - 1e-9,
                    "restriction lowered the optimum"
                );
            }
        }
    }

    #[test]
    fn kkt_certificate_holds_on_optimal_returns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..60 {
            let problem = random_feasible_problem(&mut rng);
            let sol = qp_solve(&problem).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            // Stationarity re-checked from scratch against the caller's rows.
            let stacked = StackedRows::build(&problem);
            let mut stat = &problem.hessian * &sol.u_star + &problem.linear;
            for (&ci, &lam) in sol.active_set.iter().zip(sol.multipliers.iter()) {
                assert!(lam >= -1e-10, "negative multiplier {lam}");
                stat -= lam * stacked.original_rows.row(ci).transpose();
            }
            assert!(stat.abs().max() <= 1e-8);
            // Feasibility at the spec tolerances.
            for i in 0..problem.a_ineq.nrows() {
                let slack = problem.a_ineq.row(i).dot(&sol.u_star.transpose()) - problem.b_ineq[i];
                assert!(slack >= -1e-8);
            }
            for i in 0..problem.num_variables() {
                assert!(sol.u_star[i] >= problem.lower[i] - 1e-10);
                assert!(sol.u_star[i] <= problem.upper[i] + 1e-10);
            }
        }
    }

    #[test]
    fn determinism_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let problem = random_feasible_problem(&mut rng);
            let a = qp_solve(&problem).unwrap();
            let b = qp_solve(&problem).unwrap();
            assert_eq!(a.u_star.as_slice(), b.u_star.as_slice());
            assert_eq!(a.active_set, b.active_set);
            assert_eq!(a.iterations, b.iterations);
        }
    }
}

//! Per-step control synthesis.
//!
//! At a state `x` the controller perturbs the state along each coordinate
//! axis (`z_j = x + ε e_j`), writes one density-divergence inequality per
//! evaluation point, bounds the spatial variation of the control through a
//! trace constraint assembled from the finite differences `(u_i^j − u_i)/ε`,
//! and solves the resulting strictly convex QP for the stacked decision
//! vector `(u, u¹, …, uⁿ)` of length `m(n+1)`. Only `u` is applied to the
//! plant; the perturbed controls exist to give the trace rows meaning and are
//! kept for diagnostics.
//!
//! Row layout of the assembled problem, in order:
//! - row 0: divergence inequality at `x` acting on block 0,
//! - rows `1..=n`: divergence inequality at `z_j` acting on block `j`,
//! - rows `n+1`, `n+2`: the two linearizations of `|trace| ≤ β`,
//! - box bounds replicated on every block.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::density::{DensityError, DensityFunction};
use crate::dynamics::ControlAffineSystem;
use crate::qp::{feasible_within_certificates, qp_solve, QpError, QpProblem, QpStatus};

/// Penalty weight on the shared slack variable used by the `Slack` policy.
const SLACK_PENALTY: f64 = 1e6;

pub type NominalControl = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// What to do when the per-step QP has no feasible point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InfeasibilityPolicy {
    /// Abort the run with a diagnostic naming the worst row. A silently
    /// relaxed safety constraint is worse than a halted run.
    #[default]
    Error,
    /// Re-solve with a single nonnegative slack shared by the divergence
    /// rows, heavily penalized; the step is flagged as relaxed.
    Slack,
}

/// Controller parameters.
#[derive(Clone)]
pub struct CdfConfig {
    /// Margin β: divergence rows demand `… ≥ β ρ` and the trace rows demand
    /// `|trace| ≤ β`.
    pub beta: f64,
    /// Perturbation radius ε for the axis points `z_j = x + ε e_j`.
    pub epsilon: f64,
    /// Euler step of the closed loop.
    pub dt: f64,
    /// Maximum number of closed-loop steps.
    pub horizon_steps: usize,
    /// Optional nominal control; when set the objective tracks it instead of
    /// minimizing the control norm.
    pub u_nominal: Option<NominalControl>,
    pub infeasibility_policy: InfeasibilityPolicy,
    /// Extra slack demanded when turning the strict inequalities into
    /// non-strict ones: divergence rows get `≥ βρ + margin`, trace rows get
    /// `≤ β − margin`. Zero keeps the non-strict relaxation.
    pub strict_margin: f64,
}

impl std::fmt::Debug for CdfConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CdfConfig")
            .field("beta", &self.beta)
            .field("epsilon", &self.epsilon)
            .field("dt", &self.dt)
            .field("horizon_steps", &self.horizon_steps)
            .field("has_nominal", &self.u_nominal.is_some())
            .field("infeasibility_policy", &self.infeasibility_policy)
            .field("strict_margin", &self.strict_margin)
            .finish()
    }
}

impl CdfConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            epsilon: 1e-3,
            dt: 0.01,
            horizon_steps: 5000,
            u_nominal: None,
            infeasibility_policy: InfeasibilityPolicy::Error,
            strict_margin: 0.0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_horizon(mut self, steps: usize) -> Self {
        self.horizon_steps = steps;
        self
    }

    pub fn with_nominal(mut self, nominal: NominalControl) -> Self {
        self.u_nominal = Some(nominal);
        self
    }

    pub fn with_policy(mut self, policy: InfeasibilityPolicy) -> Self {
        self.infeasibility_policy = policy;
        self
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.strict_margin = margin;
        self
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(ControllerError::InvalidConfig(
                "beta must be positive".into(),
            ));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(ControllerError::InvalidConfig(
                "epsilon must be positive".into(),
            ));
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(ControllerError::InvalidConfig("dt must be positive".into()));
        }
        if self.horizon_steps == 0 {
            return Err(ControllerError::InvalidConfig(
                "horizon_steps must be at least 1".into(),
            ));
        }
        if self.strict_margin < 0.0 || !self.strict_margin.is_finite() {
            return Err(ControllerError::InvalidConfig(
                "strict_margin must be nonnegative".into(),
            ));
        }
        if self.strict_margin >= self.beta {
            return Err(ControllerError::InvalidConfig(
                "strict_margin must stay below beta or the trace rows become empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("per-step QP infeasible at {row}: violated by {violation:.3e}")]
    Infeasible { row: String, violation: f64 },
    #[error("per-step QP hit its iteration limit")]
    IterationLimit,
}

/// One divergence inequality `affine + control_coeffs·u ≥ rhs` at a single
/// evaluation point.
#[derive(Debug, Clone)]
pub struct DivergenceRow {
    /// `∇·(fρ) = ρ ∇·f + ∇ρᵀf`.
    pub affine: f64,
    /// `∇ᵀ[gρ]` componentwise: `ρ ∇·g_i + ∇ρᵀg_i`.
    pub control_coeffs: DVector<f64>,
    /// `β ρ` at the evaluation point.
    pub rhs: f64,
}

/// What one solved step looked like.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// The applied control `u` (first block of the decision vector).
    pub control: DVector<f64>,
    /// The perturbed controls `u^j`, one per state coordinate.
    pub perturbed_controls: Vec<DVector<f64>>,
    /// Divergence left-hand sides, one per evaluation point (x first).
    pub constraint_lhs: Vec<f64>,
    /// Divergence right-hand sides `β ρ` (margin excluded), same order.
    pub constraint_rhs: Vec<f64>,
    /// Signed value of `tr((∇ₓuᵀ)ᵀ g(x))` reconstructed from the solution.
    pub trace_value: f64,
    pub qp_status: QpStatus,
    /// Set when the step was re-solved with the slack relaxation.
    pub relaxed: bool,
    /// Slack magnitude used by a relaxed step.
    pub slack: f64,
    /// ρ(x) > 1 at this step; there the trace bound is no longer a
    /// conservative under-approximation of the exact divergence constraint.
    pub rho_above_one: bool,
}

/// Axis perturbation points `z_j = x + ε e_j`, one per state coordinate.
pub fn perturbation_points(x: &DVector<f64>, epsilon: f64) -> Vec<DVector<f64>> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    (0..x.len())
        .map(|j| {
            let mut z = x.clone();
            z[j] += epsilon;
            z
        })
        .collect()
}

/// Coefficients of the divergence inequality at `x`.
pub fn divergence_row(
    sys: &ControlAffineSystem,
    df: &DensityFunction,
    x: &DVector<f64>,
    beta: f64,
) -> Result<DivergenceRow, ControllerError> {
    let rho = df.rho(x)?;
    let grad_rho = df.rho_gradient(x)?;
    let drift = sys.drift(x);
    let columns = sys.input_columns(x);
    let input_divs = sys.input_divergences(x);

    let affine = rho * sys.drift_divergence(x) + grad_rho.dot(&drift);
    let control_coeffs = DVector::from_fn(sys.control_dim(), |i, _| {
        rho * input_divs[i] + grad_rho.dot(&columns.column(i).into_owned())
    });
    Ok(DivergenceRow {
        affine,
        control_coeffs,
        rhs: beta * rho,
    })
}

/// Everything `assemble_step_qp` derives on the way to the QP; kept so the
/// solve step can report certificates without re-evaluating the field.
pub struct AssembledStep {
    pub problem: QpProblem,
    pub rows: Vec<DivergenceRow>,
    pub trace_coeffs: DVector<f64>,
    pub rho_at_x: f64,
    beta: f64,
    state_dim: usize,
    control_dim: usize,
}

/// Build the per-step QP at `x`: stacked decision vector `(u, u¹, …, uⁿ)`,
/// `n+1` divergence rows, two trace rows and replicated box bounds.
pub fn assemble_step_qp(
    sys: &ControlAffineSystem,
    df: &DensityFunction,
    cfg: &CdfConfig,
    x: &DVector<f64>,
) -> Result<AssembledStep, ControllerError> {
    cfg.validate()?;
    let n = sys.state_dim();
    let m = sys.control_dim();
    let p = m * (n + 1);

    let mut points = Vec::with_capacity(n + 1);
    points.push(x.clone());
    points.extend(perturbation_points(x, cfg.epsilon));

    let rows: Vec<DivergenceRow> = points
        .iter()
        .map(|pt| divergence_row(sys, df, pt, cfg.beta))
        .collect::<Result<_, _>>()?;

    // Trace coefficients over the stacked vector:
    // tr = (1/ε) Σ_i Σ_j (u_i^j − u_i) g_{ji}(x).
    let g_at_x = sys.input_columns(x);
    let mut trace_coeffs: DVector<f64> = DVector::zeros(p);
    for i in 0..m {
        for j in 0..n {
            let gji = g_at_x[(j, i)] / cfg.epsilon;
            trace_coeffs[(j + 1) * m + i] += gji;
            trace_coeffs[i] -= gji;
        }
    }

    let mut a_ineq = DMatrix::zeros(n + 1 + 2, p);
    let mut b_ineq = DVector::zeros(n + 1 + 2);
    for (k, row) in rows.iter().enumerate() {
        for i in 0..m {
            a_ineq[(k, k * m + i)] = row.control_coeffs[i];
        }
        b_ineq[k] = row.rhs + cfg.strict_margin - row.affine;
    }
    let trace_bound = cfg.beta - cfg.strict_margin;
    // trace ≤ bound  →  −coeffs·U ≥ −bound;  trace ≥ −bound  →  coeffs·U ≥ −bound.
    for c in 0..p {
        a_ineq[(n + 1, c)] = -trace_coeffs[c];
        a_ineq[(n + 2, c)] = trace_coeffs[c];
    }
    b_ineq[n + 1] = -trace_bound;
    b_ineq[n + 2] = -trace_bound;

    let mut lower = DVector::zeros(p);
    let mut upper = DVector::zeros(p);
    for block in 0..=n {
        for i in 0..m {
            lower[block * m + i] = sys.control_lower()[i];
            upper[block * m + i] = sys.control_upper()[i];
        }
    }

    let hessian = DMatrix::identity(p, p) * 2.0;
    let linear = match &cfg.u_nominal {
        None => DVector::zeros(p),
        Some(nominal) => {
            let mut q = DVector::zeros(p);
            for (block, pt) in points.iter().enumerate() {
                let u0 = nominal(pt);
                assert_eq!(u0.len(), m, "nominal control dimension");
                for i in 0..m {
                    q[block * m + i] = -2.0 * u0[i];
                }
            }
            q
        }
    };

    let rho_at_x = rows[0].rhs / cfg.beta;
    Ok(AssembledStep {
        problem: QpProblem {
            hessian,
            linear,
            a_ineq,
            b_ineq,
            lower,
            upper,
        },
        rows,
        trace_coeffs,
        rho_at_x,
        beta: cfg.beta,
        state_dim: n,
        control_dim: m,
    })
}

/// Solve the per-step QP at `x` and extract the applied control together
/// with the feasibility certificates.
pub fn step_control(
    sys: &ControlAffineSystem,
    df: &DensityFunction,
    cfg: &CdfConfig,
    x: &DVector<f64>,
) -> Result<StepResult, ControllerError> {
    let assembled = assemble_step_qp(sys, df, cfg, x)?;
    let solution = qp_solve(&assembled.problem)?;

    match solution.status {
        QpStatus::Optimal => Ok(extract_step(&assembled, &solution.u_star, false, 0.0)),
        // A stalled iterate is still usable when it verifiably satisfies
        // every row; effort-optimality is secondary to feasibility here. A
        // stall without a feasible point is unresolved feasibility and goes
        // through the infeasibility policy like a definite verdict would.
        QpStatus::IterationLimit
            if feasible_within_certificates(&assembled.problem, &solution.u_star) =>
        {
            Ok(extract_step(&assembled, &solution.u_star, false, 0.0))
        }
        QpStatus::Infeasible | QpStatus::IterationLimit => match cfg.infeasibility_policy {
            InfeasibilityPolicy::Error => {
                let (idx, violation) = solution.most_violated.unwrap_or((0, f64::NAN));
                Err(ControllerError::Infeasible {
                    row: describe_row(&assembled, idx),
                    violation,
                })
            }
            InfeasibilityPolicy::Slack => {
                let relaxed_problem = add_divergence_slack(&assembled);
                let relaxed = qp_solve(&relaxed_problem)?;
                let usable = relaxed.status == QpStatus::Optimal
                    || (relaxed.status == QpStatus::IterationLimit
                        && feasible_within_certificates(&relaxed_problem, &relaxed.u_star));
                if !usable {
                    if relaxed.status == QpStatus::IterationLimit {
                        return Err(ControllerError::IterationLimit);
                    }
                    let (idx, violation) = relaxed.most_violated.unwrap_or((0, f64::NAN));
                    return Err(ControllerError::Infeasible {
                        row: describe_row(&assembled, idx),
                        violation,
                    });
                }
                let p = assembled.problem.num_variables();
                let slack = relaxed.u_star[p];
                let u = relaxed.u_star.rows(0, p).into_owned();
                Ok(extract_step(&assembled, &u, true, slack))
            }
        },
    }
}

/// Append one nonnegative slack shared by the divergence rows, with a large
/// quadratic penalty; trace rows and bounds stay exact.
fn add_divergence_slack(assembled: &AssembledStep) -> QpProblem {
    let base = &assembled.problem;
    let p = base.num_variables();
    let n_rows = base.a_ineq.nrows();
    let divergence_rows = assembled.state_dim + 1;

    let mut hessian = DMatrix::zeros(p + 1, p + 1);
    hessian.view_mut((0, 0), (p, p)).copy_from(&base.hessian);
    hessian[(p, p)] = 2.0 * SLACK_PENALTY;
    let mut linear = DVector::zeros(p + 1);
    linear.rows_mut(0, p).copy_from(&base.linear);

    let mut a_ineq = DMatrix::zeros(n_rows, p + 1);
    a_ineq.view_mut((0, 0), (n_rows, p)).copy_from(&base.a_ineq);
    for k in 0..divergence_rows {
        a_ineq[(k, p)] = 1.0;
    }

    let mut lower = DVector::from_element(p + 1, f64::NEG_INFINITY);
    lower.rows_mut(0, p).copy_from(&base.lower);
    lower[p] = 0.0;
    let mut upper = DVector::from_element(p + 1, f64::INFINITY);
    upper.rows_mut(0, p).copy_from(&base.upper);

    QpProblem {
        hessian,
        linear,
        a_ineq,
        b_ineq: base.b_ineq.clone(),
        lower,
        upper,
    }
}

fn extract_step(
    assembled: &AssembledStep,
    stacked: &DVector<f64>,
    relaxed: bool,
    slack: f64,
) -> StepResult {
    let n = assembled.state_dim;
    let m = assembled.control_dim;
    let control = stacked.rows(0, m).into_owned();
    let perturbed_controls: Vec<DVector<f64>> = (1..=n)
        .map(|block| stacked.rows(block * m, m).into_owned())
        .collect();
    let constraint_lhs: Vec<f64> = assembled
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let block = stacked.rows(k * m, m);
            row.affine + row.control_coeffs.dot(&block.into_owned())
        })
        .collect();
    let constraint_rhs: Vec<f64> = assembled.rows.iter().map(|row| row.rhs).collect();
    let trace_value = assembled.trace_coeffs.dot(stacked);
    if !relaxed {
        for (lhs, row) in constraint_lhs.iter().zip(assembled.rows.iter()) {
            debug_assert!(
                *lhs >= row.rhs - 1e-6,
                "optimal step violates its divergence certificate: {lhs} < {}",
                row.rhs
            );
        }
    }
    debug_assert!(
        trace_value.abs() <= assembled.beta + 1e-6,
        "step violates its trace certificate: |{trace_value}| > {}",
        assembled.beta
    );
    StepResult {
        control,
        perturbed_controls,
        constraint_lhs,
        constraint_rhs,
        trace_value,
        qp_status: QpStatus::Optimal,
        relaxed,
        slack,
        rho_above_one: assembled.rho_at_x > 1.0,
    }
}

fn describe_row(assembled: &AssembledStep, stacked_idx: usize) -> String {
    let n = assembled.state_dim;
    let m = assembled.control_dim;
    let p = m * (n + 1);
    let ineq_rows = n + 3;
    if stacked_idx < ineq_rows {
        if stacked_idx == 0 {
            "divergence row at x".into()
        } else if stacked_idx <= n {
            format!("divergence row at z_{stacked_idx}")
        } else if stacked_idx == n + 1 {
            "trace upper row".into()
        } else {
            "trace lower row".into()
        }
    } else if stacked_idx < ineq_rows + p {
        format!("lower bound on variable {}", stacked_idx - ineq_rows)
    } else {
        format!("upper bound on variable {}", stacked_idx - ineq_rows - p)
    }
}

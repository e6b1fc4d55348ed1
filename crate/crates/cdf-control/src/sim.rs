//! Closed-loop simulation, the Dubin steering layer and Monte Carlo sweeps.
//!
//! Integration is explicit Euler, exactly the update the per-step program is
//! derived for; fidelity is checked by Δt-halving tests rather than by a
//! higher-order integrator. Safety and convergence are monitored on every
//! recorded state: a run ends `Unsafe` the moment any obstacle clearance
//! drops to zero, `Converged` once the state enters the terminal
//! neighborhood `N_η` (where a local stabilizer is assumed to take over),
//! `Infeasible` if the per-step program fails under the `Error` policy, and
//! `Timeout` when the horizon runs out.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{step_control, CdfConfig, ControllerError, StepResult};
use crate::density::DensityFunction;
use crate::dynamics::ControlAffineSystem;

/// Sentinel written instead of ρ where the density is singular or capped
/// (inside the terminal neighborhood exports).
pub const RHO_SENTINEL: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error("state diverged to non-finite values at step {0}")]
    Diverged(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    Unsafe,
    Timeout,
    Infeasible,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Converged => "converged",
            Outcome::Unsafe => "unsafe",
            Outcome::Timeout => "timeout",
            Outcome::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepFlag {
    Optimal,
    Relaxed,
}

impl StepFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepFlag::Optimal => "optimal",
            StepFlag::Relaxed => "relaxed",
        }
    }
}

/// Per-step diagnostics: the feasibility certificates of the solved program
/// plus the Dubin heading signals when the steering layer is active.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub flag: StepFlag,
    /// Divergence row left-hand sides (state point first, then each z_j);
    /// empty in the gradient and nominal-only modes.
    pub constraint_lhs: Vec<f64>,
    /// Matching right-hand sides β·ρ.
    pub constraint_rhs: Vec<f64>,
    pub trace_value: f64,
    /// ρ at the step's state.
    pub rho: f64,
    pub rho_above_one: bool,
    /// `wrap(θ − θ̃)` for Dubin runs.
    pub heading_error: Option<f64>,
    pub theta_tilde: Option<f64>,
}

/// A complete closed-loop record.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Time stamps, one per recorded state.
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Control applied at each non-terminal state (`len = states.len() − 1`,
    /// unless the run ended before the first solve).
    pub controls: Vec<DVector<f64>>,
    /// ρ at each recorded state ([`RHO_SENTINEL`] where singular).
    pub rhos: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    /// `min_t min_k c_k(x_t)` over all recorded states.
    pub min_clearance: f64,
    /// Distance from the final state to the target (planar for Dubin runs).
    pub terminal_distance: f64,
    /// `Σ Δt · 1_unsafe(x_t)` over recorded states.
    pub unsafe_dwell_time: f64,
    /// Diagnostic from the step that ended an infeasible run.
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn relaxed_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.flag == StepFlag::Relaxed)
            .count()
    }

    pub fn rho_above_one_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.rho_above_one).count()
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

/// How the applied control is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMode {
    /// Solve the per-step program (the default).
    QpCdf,
    /// Apply `gain · ∇ρ(x)` directly; the single-integrator baseline.
    Gradient { gain: f64 },
    /// Apply the configured nominal control without any program.
    NominalOnly,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub cdf: CdfConfig,
    pub mode: ControlMode,
}

impl SimConfig {
    pub fn qp(cdf: CdfConfig) -> Self {
        Self {
            cdf,
            mode: ControlMode::QpCdf,
        }
    }
}

fn rho_or_sentinel(df: &DensityFunction, x: &DVector<f64>) -> f64 {
    df.rho(x).unwrap_or(RHO_SENTINEL)
}

/// Run the closed loop from `x0` for at most `cfg.cdf.horizon_steps` Euler
/// steps of length `cfg.cdf.dt`.
pub fn simulate(
    sys: &ControlAffineSystem,
    df: &DensityFunction,
    cfg: &SimConfig,
    x0: &DVector<f64>,
) -> Result<Trajectory, SimError> {
    cfg.cdf.validate()?;
    let n = sys.state_dim();
    if x0.len() != n {
        return Err(SimError::InvalidInput(format!(
            "initial state has length {}, system expects {n}",
            x0.len()
        )));
    }
    if df.state_dim() != n {
        return Err(SimError::InvalidInput(
            "density and system dimensions disagree".into(),
        ));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(SimError::InvalidInput(
            "initial state must be finite".into(),
        ));
    }
    match cfg.mode {
        ControlMode::Gradient { gain } => {
            if sys.control_dim() != n {
                return Err(SimError::InvalidInput(
                    "gradient mode needs single-integrator structure (m = n)".into(),
                ));
            }
            if gain <= 0.0 || !gain.is_finite() {
                return Err(SimError::InvalidInput(
                    "gradient gain must be positive".into(),
                ));
            }
        }
        ControlMode::NominalOnly => {
            if cfg.cdf.u_nominal.is_none() {
                return Err(SimError::InvalidInput(
                    "nominal-only mode needs a nominal control".into(),
                ));
            }
        }
        ControlMode::QpCdf => {}
    }

    let dt = cfg.cdf.dt;
    let mut states = vec![x0.clone()];
    let mut times = vec![0.0];
    let mut controls: Vec<DVector<f64>> = Vec::new();
    let mut rhos = vec![rho_or_sentinel(df, x0)];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut outcome = Outcome::Timeout;
    let mut failure = None;

    for k in 0..cfg.cdf.horizon_steps {
        let x = states.last().unwrap().clone();
        if df.min_clearance(&x) <= 0.0 {
            outcome = Outcome::Unsafe;
            break;
        }
        if (&x - df.target()).norm() <= df.eta() {
            outcome = Outcome::Converged;
            break;
        }

        let (u, record) = match cfg.mode {
            ControlMode::QpCdf => match step_control(sys, df, &cfg.cdf, &x) {
                Ok(step) => {
                    let record = record_from_step(&step, rhos[states.len() - 1]);
                    (step.control, record)
                }
                Err(ControllerError::Infeasible { row, violation }) => {
                    outcome = Outcome::Infeasible;
                    failure = Some(format!("step {k}: {row} violated by {violation:.3e}"));
                    break;
                }
                Err(other) => return Err(other.into()),
            },
            ControlMode::Gradient { gain } => {
                let u = sys.clamp_control(
                    &df.gradient_controller(&x, gain)
                        .map_err(ControllerError::Density)?,
                );
                (u, plain_record(rhos[states.len() - 1]))
            }
            ControlMode::NominalOnly => {
                let nominal = cfg.cdf.u_nominal.as_ref().unwrap();
                let u = sys.clamp_control(&nominal(&x));
                (u, plain_record(rhos[states.len() - 1]))
            }
        };

        let next = &x + dt * sys.closed_loop(&x, &u);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(SimError::Diverged(k));
        }
        controls.push(u);
        steps.push(record);
        rhos.push(rho_or_sentinel(df, &next));
        times.push(dt * (k + 1) as f64);
        states.push(next);
    }

    // Horizon exhausted: the monitors still owe a verdict on the final state.
    if outcome == Outcome::Timeout {
        let x = states.last().unwrap();
        if df.min_clearance(x) <= 0.0 {
            outcome = Outcome::Unsafe;
        } else if (x - df.target()).norm() <= df.eta() {
            outcome = Outcome::Converged;
        }
    }

    Ok(seal_trajectory(
        df,
        times,
        states,
        controls,
        rhos,
        steps,
        outcome,
        failure,
        dt,
        |x| (x - df.target()).norm(),
    ))
}

fn record_from_step(step: &StepResult, rho: f64) -> StepRecord {
    StepRecord {
        flag: if step.relaxed {
            StepFlag::Relaxed
        } else {
            StepFlag::Optimal
        },
        constraint_lhs: step.constraint_lhs.clone(),
        constraint_rhs: step.constraint_rhs.clone(),
        trace_value: step.trace_value,
        rho,
        rho_above_one: step.rho_above_one,
        heading_error: None,
        theta_tilde: None,
    }
}

fn plain_record(rho: f64) -> StepRecord {
    StepRecord {
        flag: StepFlag::Optimal,
        constraint_lhs: Vec::new(),
        constraint_rhs: Vec::new(),
        trace_value: 0.0,
        rho,
        rho_above_one: rho > 1.0,
        heading_error: None,
        theta_tilde: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn seal_trajectory(
    df: &DensityFunction,
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    rhos: Vec<f64>,
    steps: Vec<StepRecord>,
    outcome: Outcome,
    failure: Option<String>,
    dt: f64,
    distance: impl Fn(&DVector<f64>) -> f64,
) -> Trajectory {
    let min_clearance = states
        .iter()
        .map(|x| df.min_clearance(x))
        .fold(f64::INFINITY, f64::min);
    let unsafe_dwell_time =
        dt * states.iter().filter(|x| df.min_clearance(x) <= 0.0).count() as f64;
    let terminal_distance = distance(states.last().unwrap());
    Trajectory {
        times,
        states,
        controls,
        rhos,
        steps,
        outcome,
        min_clearance,
        terminal_distance,
        unsafe_dwell_time,
        failure,
    }
}

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut r = a % tau;
    if r <= -std::f64::consts::PI {
        r += tau;
    } else if r > std::f64::consts::PI {
        r -= tau;
    }
    r
}

/// Heading-tracking state for the Dubin vehicle.
#[derive(Debug, Clone)]
pub struct DubinState {
    pub x1: f64,
    pub x2: f64,
    /// Heading, wrapped to `(−π, π]`.
    pub theta: f64,
    /// Gain `k` of the heading-error feedback.
    pub k_gain: f64,
    /// Desired heading from the previous step, for the backward difference;
    /// `None` before the first step (then `θ̃˙ = 0`).
    pub theta_tilde_prev: Option<f64>,
}

impl DubinState {
    pub fn new(x1: f64, x2: f64, theta: f64, k_gain: f64) -> Self {
        assert!(k_gain > 0.0, "heading gain must be positive");
        Self {
            x1,
            x2,
            theta: wrap_angle(theta),
            k_gain,
            theta_tilde_prev: None,
        }
    }
}

/// Convert a planar control into vehicle inputs: forward speed `v = ‖u‖`,
/// desired heading `θ̃ = atan2(u₂, u₁)` and steering rate
/// `ω = θ̃˙ − k (θ − θ̃)`, with `θ̃˙` from a wrapped backward difference.
///
/// A zero planar control holds the previous desired heading with `v = 0`.
/// Returns `(v, ω, θ̃, updated state)`.
pub fn dubin_steering(
    u_planar: &DVector<f64>,
    ds: &DubinState,
    dt: f64,
) -> (f64, f64, f64, DubinState) {
    assert_eq!(u_planar.len(), 2, "planar control must be two-dimensional");
    assert!(dt > 0.0);
    let v = u_planar.norm();
    let theta_tilde = if v == 0.0 {
        ds.theta_tilde_prev.unwrap_or(ds.theta)
    } else {
        u_planar[1].atan2(u_planar[0])
    };
    let theta_tilde_dot = match ds.theta_tilde_prev {
        None => 0.0,
        Some(prev) => wrap_angle(theta_tilde - prev) / dt,
    };
    let omega = theta_tilde_dot - ds.k_gain * wrap_angle(ds.theta - theta_tilde);
    let mut next = ds.clone();
    next.theta_tilde_prev = Some(theta_tilde);
    (v, omega, theta_tilde, next)
}

/// Closed-loop Dubin run: plan on the planar reduction, steer the heading,
/// integrate the full vehicle `(ẋ₁, ẋ₂, θ̇) = (v cos θ, v sin θ, ω)`.
///
/// `df` is the planar density (2-state); trajectory states are
/// `(x₁, x₂, θ)` and controls are `(v, ω)`. Planar control bounds default to
/// unbounded; use [`simulate_dubin_bounded`] to cap them.
pub fn simulate_dubin(
    df: &DensityFunction,
    cfg: &CdfConfig,
    x0: &DVector<f64>,
    theta0: f64,
    k_gain: f64,
) -> Result<Trajectory, SimError> {
    simulate_dubin_bounded(df, cfg, x0, theta0, k_gain, None)
}

/// [`simulate_dubin`] with optional box bounds on the planar control.
pub fn simulate_dubin_bounded(
    df: &DensityFunction,
    cfg: &CdfConfig,
    x0: &DVector<f64>,
    theta0: f64,
    k_gain: f64,
    planar_bounds: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    if x0.len() != 2 || df.state_dim() != 2 {
        return Err(SimError::InvalidInput(
            "the Dubin reduction is planar: x0 and the density must be two-dimensional".into(),
        ));
    }
    let mut sys = crate::dynamics::dubin_reduced();
    if let Some((lower, upper)) = planar_bounds {
        sys = sys.with_bounds(lower, upper);
    }
    let dt = cfg.dt;
    let mut ds = DubinState::new(x0[0], x0[1], theta0, k_gain);

    let mut states = vec![DVector::from_vec(vec![ds.x1, ds.x2, ds.theta])];
    let mut times = vec![0.0];
    let mut controls: Vec<DVector<f64>> = Vec::new();
    let mut rhos = vec![rho_or_sentinel(df, x0)];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut outcome = Outcome::Timeout;
    let mut failure = None;

    for k in 0..cfg.horizon_steps {
        let planar = DVector::from_vec(vec![ds.x1, ds.x2]);
        if df.min_clearance(&planar) <= 0.0 {
            outcome = Outcome::Unsafe;
            break;
        }
        if (&planar - df.target()).norm() <= df.eta() {
            outcome = Outcome::Converged;
            break;
        }

        let step = match step_control(&sys, df, cfg, &planar) {
            Ok(step) => step,
            Err(ControllerError::Infeasible { row, violation }) => {
                outcome = Outcome::Infeasible;
                failure = Some(format!("step {k}: {row} violated by {violation:.3e}"));
                break;
            }
            Err(other) => return Err(other.into()),
        };

        let (v, omega, theta_tilde, next_ds) = dubin_steering(&step.control, &ds, dt);
        let mut record = record_from_step(&step, rhos[states.len() - 1]);
        record.heading_error = Some(wrap_angle(ds.theta - theta_tilde));
        record.theta_tilde = Some(theta_tilde);

        ds = next_ds;
        ds.x1 += dt * v * ds.theta.cos();
        ds.x2 += dt * v * ds.theta.sin();
        ds.theta = wrap_angle(ds.theta + dt * omega);

        if !(ds.x1.is_finite() && ds.x2.is_finite() && ds.theta.is_finite()) {
            return Err(SimError::Diverged(k));
        }
        controls.push(DVector::from_vec(vec![v, omega]));
        steps.push(record);
        let planar_next = DVector::from_vec(vec![ds.x1, ds.x2]);
        rhos.push(rho_or_sentinel(df, &planar_next));
        times.push(dt * (k + 1) as f64);
        states.push(DVector::from_vec(vec![ds.x1, ds.x2, ds.theta]));
    }

    if outcome == Outcome::Timeout {
        let planar = DVector::from_vec(vec![ds.x1, ds.x2]);
        if df.min_clearance(&planar) <= 0.0 {
            outcome = Outcome::Unsafe;
        } else if (&planar - df.target()).norm() <= df.eta() {
            outcome = Outcome::Converged;
        }
    }

    Ok(seal_trajectory(
        df,
        times,
        states,
        controls,
        rhos,
        steps,
        outcome,
        failure,
        dt,
        |x| {
            let planar = DVector::from_vec(vec![x[0], x[1]]);
            (&planar - df.target()).norm()
        },
    ))
}

/// How initial states are drawn for sweeps.
#[derive(Debug, Clone)]
pub enum InitialSampler {
    /// Uniform angle on a circle of the given radius (planar only).
    Ring { center: DVector<f64>, radius: f64 },
    /// Uniform in an axis-aligned box.
    Box {
        min: DVector<f64>,
        max: DVector<f64>,
    },
}

impl InitialSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            InitialSampler::Ring { center, radius } => {
                assert_eq!(center.len(), 2, "ring sampling is planar");
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                DVector::from_vec(vec![
                    center[0] + radius * angle.cos(),
                    center[1] + radius * angle.sin(),
                ])
            }
            InitialSampler::Box { min, max } => DVector::from_fn(min.len(), |i, _| {
                if min[i] == max[i] {
                    min[i]
                } else {
                    rng.random_range(min[i]..max[i])
                }
            }),
        }
    }
}

/// One sweep entry. `outcome = None` marks a run that failed with a hard
/// error rather than finishing with a verdict.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub index: usize,
    pub x0: DVector<f64>,
    pub outcome: Option<Outcome>,
    pub terminal_distance: f64,
    pub unsafe_dwell_time: f64,
    pub min_clearance: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub runs: Vec<RunRecord>,
    pub converged_fraction: f64,
    pub unsafe_fraction: f64,
    pub failed_runs: usize,
    pub max_unsafe_dwell_time: f64,
}

/// Draw `count` seeded initial states and run the closed loop from each.
/// Sampled states falling in the unsafe set (or exactly on the target) are
/// redrawn, so the sequence of accepted states is a deterministic function
/// of `(sampler, seed)`; run `i` always sees the `i`-th accepted state.
pub fn monte_carlo_sweep(
    sys: &ControlAffineSystem,
    df: &DensityFunction,
    cfg: &SimConfig,
    sampler: &InitialSampler,
    count: usize,
    seed: u64,
) -> SweepReport {
    monte_carlo_sweep_with(df, sampler, count, seed, |x0| simulate(sys, df, cfg, x0))
}

/// Sweep over an arbitrary runner (used by the Dubin pipeline).
pub fn monte_carlo_sweep_with(
    df: &DensityFunction,
    sampler: &InitialSampler,
    count: usize,
    seed: u64,
    run: impl Fn(&DVector<f64>) -> Result<Trajectory, SimError>,
) -> SweepReport {
    assert!(count >= 1, "count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while starts.len() < count {
        attempts += 1;
        assert!(
            attempts <= 10_000 * count,
            "could not sample enough valid initial states"
        );
        let x0 = sampler.sample(&mut rng);
        if df.min_clearance(&x0) <= 0.0 || &x0 == df.target() {
            continue;
        }
        starts.push(x0);
    }

    let mut runs = Vec::with_capacity(count);
    let mut converged = 0usize;
    let mut unsafe_runs = 0usize;
    let mut failed = 0usize;
    let mut max_dwell = 0.0f64;
    for (index, x0) in starts.into_iter().enumerate() {
        match run(&x0) {
            Ok(traj) => {
                if traj.outcome == Outcome::Converged {
                    converged += 1;
                }
                if traj.outcome == Outcome::Unsafe {
                    unsafe_runs += 1;
                }
                max_dwell = max_dwell.max(traj.unsafe_dwell_time);
                runs.push(RunRecord {
                    index,
                    x0,
                    outcome: Some(traj.outcome),
                    terminal_distance: traj.terminal_distance,
                    unsafe_dwell_time: traj.unsafe_dwell_time,
                    min_clearance: traj.min_clearance,
                    error: traj.failure,
                });
            }
            Err(err) => {
                failed += 1;
                runs.push(RunRecord {
                    index,
                    x0,
                    outcome: None,
                    terminal_distance: f64::NAN,
                    unsafe_dwell_time: f64::NAN,
                    min_clearance: f64::NAN,
                    error: Some(err.to_string()),
                });
            }
        }
    }
    SweepReport {
        converged_fraction: converged as f64 / count as f64,
        unsafe_fraction: unsafe_runs as f64 / count as f64,
        failed_runs: failed,
        max_unsafe_dwell_time: max_dwell,
        runs,
    }
}

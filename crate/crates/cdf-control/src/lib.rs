//! Safe navigation for control-affine systems using control density functions.
//!
//! The library steers a system `ẋ = f(x) + g(x)u` from an initial set to a
//! target set while keeping trajectories out of a union of unsafe balls. The
//! navigation certificate is a density function: a product of inverse bump
//! functions (zero on every unsafe set, one outside the sensing shells)
//! divided by a positive power of a quadratic distance-to-target term. At
//! every closed-loop step a small strictly convex quadratic program picks the
//! minimum-effort control that keeps the divergence of the density-weighted
//! vector field positive, which simultaneously enforces convergence and
//! avoidance.
//!
//! Module map:
//! - [`density`]: obstacle/sensing geometry, the inverse bump functions and
//!   the density field with analytic gradients.
//! - [`dynamics`]: the control-affine system contract plus the shipped
//!   systems (single integrator, Duffing oscillator, reduced Dubin car).
//! - [`qp`]: dense strictly convex QP solver (active-set, deterministic).
//! - [`controller`]: assembles and solves the per-step QP: divergence rows
//!   at the state and its perturbations, the trace bound, box bounds.
//! - [`sim`]: explicit Euler closed loop, the Dubin heading-tracking layer,
//!   safety/convergence monitors and seeded Monte Carlo sweeps.
//! - [`scenario`]: flat key/value scenario files and their validation.
//! - [`check`]: independent numerical cross-checks (finite differences,
//!   first-order reference QP method) used by the test suites and by the
//!   finite-difference divergence fallback for user-defined systems.

pub mod check;
pub mod controller;
pub mod density;
pub mod dynamics;
pub mod qp;
pub mod scenario;
pub mod sim;

pub use controller::{CdfConfig, InfeasibilityPolicy, StepResult};
pub use density::{DensityError, DensityFunction, ObstacleSpec, ShapingFunction};
pub use dynamics::ControlAffineSystem;
pub use qp::{QpProblem, QpSolution, QpStatus};
pub use scenario::Scenario;
pub use sim::{InitialSampler, Outcome, SimConfig, StepFlag, SweepReport, Trajectory};

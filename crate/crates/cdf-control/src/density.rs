//! The navigation density field.
//!
//! An environment is a set of circular obstacles, each wrapped by a sensing
//! shell, plus a quadratic distance term to the target. Every obstacle
//! contributes an inverse bump `Ψ_k` that is exactly zero on the unsafe ball,
//! exactly one outside the sensing ball and C¹-smooth in between. The density
//! is the product of the bumps divided by the shaped distance raised to a
//! positive exponent:
//!
//! ```text
//! ρ(x) = Π_k Ψ_k(x) / V(x)^α,      V(x) = (x − x_T)ᵀ P (x − x_T)
//! ```
//!
//! All gradients are analytic; finite differences exist only in
//! [`crate::check`] as a referee.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Below this distance from the bump transition boundaries (in the `m`
/// coordinate) the bump is treated as exactly constant; `exp(-1/m)` is
/// analytically smooth there but numerically singular.
const BUMP_GUARD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    /// A state vector contained a NaN or infinity.
    #[error("invalid state: non-finite component")]
    InvalidState,
    /// The shaped distance V(x) is exactly zero; the density is singular at
    /// the target. Callers are expected to stop at the terminal neighborhood
    /// before this can happen.
    #[error("target singularity: V(x) = 0")]
    TargetSingularity,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One unsafe ball and its sensing shell, possibly living in a coordinate
/// subspace of the state (`dims`).
///
/// The margin functions are the evaluation contract the rest of the crate
/// builds on: `clearance` is negative-or-zero inside the unsafe set and
/// `sensing_clearance` is negative-or-zero inside the sensing ball.
#[derive(Debug, Clone)]
pub struct ObstacleSpec {
    center: DVector<f64>,
    r_unsafe: f64,
    r_sense: f64,
    dims: Vec<usize>,
}

impl ObstacleSpec {
    pub fn new(
        center: DVector<f64>,
        r_unsafe: f64,
        r_sense: f64,
        dims: Vec<usize>,
    ) -> Result<Self, DensityError> {
        if !center.iter().all(|v| v.is_finite()) {
            return Err(DensityError::InvalidParameter(
                "obstacle center must be finite".into(),
            ));
        }
        if r_unsafe <= 0.0 || !r_unsafe.is_finite() {
            return Err(DensityError::InvalidParameter(
                "r_unsafe must be positive".into(),
            ));
        }
        if r_sense <= r_unsafe || !r_sense.is_finite() {
            return Err(DensityError::InvalidParameter(
                "r_sense must exceed r_unsafe".into(),
            ));
        }
        if dims.len() != center.len() {
            return Err(DensityError::InvalidParameter(
                "dims must list one state index per center coordinate".into(),
            ));
        }
        let mut seen = dims.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != dims.len() {
            return Err(DensityError::InvalidParameter(
                "dims indices must be distinct".into(),
            ));
        }
        Ok(Self {
            center,
            r_unsafe,
            r_sense,
            dims,
        })
    }

    /// Ball occupying the full workspace (dims = 0..d).
    pub fn ball(center: DVector<f64>, r_unsafe: f64, r_sense: f64) -> Result<Self, DensityError> {
        let dims = (0..center.len()).collect();
        Self::new(center, r_unsafe, r_sense, dims)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn r_unsafe(&self) -> f64 {
        self.r_unsafe
    }

    pub fn r_sense(&self) -> f64 {
        self.r_sense
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn subspace_sq_dist(&self, x: &DVector<f64>) -> f64 {
        self.dims
            .iter()
            .zip(self.center.iter())
            .map(|(&d, &c)| {
                let diff = x[d] - c;
                diff * diff
            })
            .sum()
    }

    /// `c_k(x) = ‖x_dims − center‖² − r_unsafe²`; ≤ 0 exactly on the unsafe set.
    pub fn clearance(&self, x: &DVector<f64>) -> f64 {
        self.subspace_sq_dist(x) - self.r_unsafe * self.r_unsafe
    }

    /// `b_k(x) = ‖x_dims − center‖² − r_sense²`; ≤ 0 inside the sensing ball.
    pub fn sensing_clearance(&self, x: &DVector<f64>) -> f64 {
        self.subspace_sq_dist(x) - self.r_sense * self.r_sense
    }

    /// The inverse bump `Ψ_k(x)`: 0 on the unsafe set, 1 outside the sensing
    /// ball, and a smooth sigmoid of the normalized clearance in between.
    pub fn bump_value(&self, x: &DVector<f64>) -> Result<f64, DensityError> {
        validate_state(x)?;
        Ok(self.bump_value_unchecked(x))
    }

    fn bump_value_unchecked(&self, x: &DVector<f64>) -> f64 {
        let c = self.clearance(x);
        if c <= 0.0 {
            return 0.0;
        }
        let b = self.sensing_clearance(x);
        if b > 0.0 {
            return 1.0;
        }
        let m = c / (c - b);
        if m <= BUMP_GUARD {
            0.0
        } else if m >= 1.0 - BUMP_GUARD {
            1.0
        } else {
            psi(m)
        }
    }

    /// Analytic `∇Ψ_k(x)`: exactly zero away from the open sensing shell.
    pub fn bump_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, DensityError> {
        validate_state(x)?;
        Ok(self.bump_gradient_unchecked(x))
    }

    fn bump_gradient_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let mut grad = DVector::zeros(n);
        let c = self.clearance(x);
        let b = self.sensing_clearance(x);
        if c <= 0.0 || b >= 0.0 {
            return grad;
        }
        let width = c - b; // = r_sense² − r_unsafe², constant for balls
        let m = c / width;
        if m <= BUMP_GUARD || m >= 1.0 - BUMP_GUARD {
            return grad;
        }
        let value = psi(m);
        let im = 1.0 / m;
        let i1m = 1.0 / (1.0 - m);
        let dpsi_dm = value * (1.0 - value) * (im * im + i1m * i1m);
        // ∇m = ∇c / width, ∇c = 2 (x_dims − center) on the dims indices.
        let scale = dpsi_dm / width;
        for (&d, &cc) in self.dims.iter().zip(self.center.iter()) {
            grad[d] = scale * 2.0 * (x[d] - cc);
        }
        grad
    }
}

/// `ψ(m) = e^{−1/m} / (e^{−1/m} + e^{−1/(1−m)})`, evaluated as a sigmoid of
/// `1/(1−m) − 1/m` so neither exponential overflows.
fn psi(m: f64) -> f64 {
    let z = 1.0 / (1.0 - m) - 1.0 / m;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Quadratic distance shaping `V(x) = (x − target)ᵀ P (x − target)` together
/// with the density exponent α.
#[derive(Debug, Clone)]
pub struct ShapingFunction {
    target: DVector<f64>,
    p: DMatrix<f64>,
    alpha: f64,
}

impl ShapingFunction {
    pub fn new(target: DVector<f64>, p: DMatrix<f64>, alpha: f64) -> Result<Self, DensityError> {
        if !target.iter().all(|v| v.is_finite()) {
            return Err(DensityError::InvalidParameter(
                "target must be finite".into(),
            ));
        }
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(DensityError::InvalidParameter(
                "alpha must be positive".into(),
            ));
        }
        let n = target.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(DensityError::InvalidParameter(format!("P must be {n}x{n}")));
        }
        let asym = (&p - p.transpose()).abs().max();
        if asym.is_nan() || asym > 1e-12 {
            return Err(DensityError::InvalidParameter(
                "P must be symmetric within 1e-12".into(),
            ));
        }
        if nalgebra::Cholesky::new(p.clone()).is_none() {
            return Err(DensityError::InvalidParameter(
                "P must be positive definite (Cholesky failed)".into(),
            ));
        }
        Ok(Self { target, p, alpha })
    }

    /// Identity shaping, `V(x) = ‖x − target‖²`.
    pub fn identity(target: DVector<f64>, alpha: f64) -> Result<Self, DensityError> {
        let n = target.len();
        Self::new(target, DMatrix::identity(n, n), alpha)
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.target;
        d.dot(&(&self.p * &d))
    }

    /// `∇V(x) = 2 P (x − target)`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.p * (x - &self.target))
    }
}

/// The full density field `ρ(x) = Π_k Ψ_k(x) / V(x)^α` with its terminal
/// neighborhood radius η.
#[derive(Debug, Clone)]
pub struct DensityFunction {
    obstacles: Vec<ObstacleSpec>,
    shaping: ShapingFunction,
    eta: f64,
}

impl DensityFunction {
    pub fn new(
        obstacles: Vec<ObstacleSpec>,
        shaping: ShapingFunction,
        eta: f64,
    ) -> Result<Self, DensityError> {
        if eta <= 0.0 || !eta.is_finite() {
            return Err(DensityError::InvalidParameter(
                "eta must be positive".into(),
            ));
        }
        let n = shaping.target().len();
        for (k, obs) in obstacles.iter().enumerate() {
            if let Some(&bad) = obs.dims().iter().find(|&&d| d >= n) {
                return Err(DensityError::InvalidParameter(format!(
                    "obstacle {k} references state index {bad} but the state dimension is {n}"
                )));
            }
        }
        Ok(Self {
            obstacles,
            shaping,
            eta,
        })
    }

    pub fn obstacles(&self) -> &[ObstacleSpec] {
        &self.obstacles
    }

    pub fn shaping(&self) -> &ShapingFunction {
        &self.shaping
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn target(&self) -> &DVector<f64> {
        self.shaping.target()
    }

    pub fn state_dim(&self) -> usize {
        self.shaping.target().len()
    }

    /// `min_k c_k(x)`; +∞ when the environment has no obstacles.
    pub fn min_clearance(&self, x: &DVector<f64>) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.clearance(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn in_unsafe_set(&self, x: &DVector<f64>) -> bool {
        self.obstacles.iter().any(|o| o.clearance(x) <= 0.0)
    }

    pub fn in_sensing_region(&self, x: &DVector<f64>) -> bool {
        self.obstacles
            .iter()
            .any(|o| o.clearance(x) > 0.0 && o.sensing_clearance(x) <= 0.0)
    }

    /// Product of all inverse bumps at `x` (1 in an empty environment).
    pub fn bump_product(&self, x: &DVector<f64>) -> Result<f64, DensityError> {
        validate_state(x)?;
        Ok(self
            .obstacles
            .iter()
            .map(|o| o.bump_value_unchecked(x))
            .product())
    }

    /// `ρ(x)`. Zero exactly on the unsafe set, `V(x)^{−α}` exactly outside
    /// every sensing ball.
    pub fn rho(&self, x: &DVector<f64>) -> Result<f64, DensityError> {
        validate_state(x)?;
        let v = self.shaping.value(x);
        if v == 0.0 {
            return Err(DensityError::TargetSingularity);
        }
        let w: f64 = self
            .obstacles
            .iter()
            .map(|o| o.bump_value_unchecked(x))
            .product();
        Ok(w * v.powf(-self.shaping.alpha))
    }

    /// Analytic `∇ρ(x)` by the product and chain rules over the bump
    /// gradients and `∇V = 2P(x − target)`.
    pub fn rho_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, DensityError> {
        validate_state(x)?;
        let v = self.shaping.value(x);
        if v == 0.0 {
            return Err(DensityError::TargetSingularity);
        }
        let alpha = self.shaping.alpha;
        let v_pow = v.powf(-alpha);
        let bumps: Vec<f64> = self
            .obstacles
            .iter()
            .map(|o| o.bump_value_unchecked(x))
            .collect();
        let w: f64 = bumps.iter().product();

        let n = x.len();
        let mut grad_w = DVector::zeros(n);
        for (k, obs) in self.obstacles.iter().enumerate() {
            let bump_grad = obs.bump_gradient_unchecked(x);
            if bump_grad.iter().all(|&v| v == 0.0) {
                continue;
            }
            let leave_one_out: f64 = bumps
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &b)| b)
                .product();
            grad_w += leave_one_out * bump_grad;
        }

        let grad_v = self.shaping.gradient(x);
        Ok(grad_w * v_pow - (alpha * w * v.powf(-alpha - 1.0)) * grad_v)
    }

    /// The single-integrator baseline controller `u(x) = gain · ∇ρ(x)`.
    ///
    /// Only meaningful when the plant is the single integrator (control and
    /// state dimensions agree); the caller owns that check.
    pub fn gradient_controller(
        &self,
        x: &DVector<f64>,
        gain: f64,
    ) -> Result<DVector<f64>, DensityError> {
        if gain <= 0.0 || !gain.is_finite() {
            return Err(DensityError::InvalidParameter(
                "gain must be positive".into(),
            ));
        }
        Ok(gain * self.rho_gradient(x)?)
    }
}

fn validate_state(x: &DVector<f64>) -> Result<(), DensityError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DensityError::InvalidState)
    }
}

//! Control-affine system contract and the shipped plants.
//!
//! A system is `ẋ = f(x) + g(x)u` with `f` and the columns of `g`
//! continuously differentiable. The per-step program needs the spatial
//! divergences `∇·f` and `∇·g_i` alongside the fields themselves; the shipped
//! systems supply them analytically, and user-defined systems may fall back
//! to central finite differences (flagged, see [`DivergenceSource`]).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::check::central_divergence;

type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Whether divergences come from closed-form expressions or from the
/// finite-difference fallback. Recorded in run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceSource {
    Analytic,
    FiniteDifference,
}

#[derive(Clone)]
pub struct ControlAffineSystem {
    name: String,
    state_dim: usize,
    control_dim: usize,
    drift: VectorFn,
    input_columns: MatrixFn,
    drift_divergence: ScalarFn,
    input_divergences: VectorFn,
    control_lower: DVector<f64>,
    control_upper: DVector<f64>,
    divergence_source: DivergenceSource,
}

impl std::fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("divergence_source", &self.divergence_source)
            .finish()
    }
}

impl ControlAffineSystem {
    /// Assemble a system from user closures with analytic divergences.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        input_columns: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        drift_divergence: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        input_divergences: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            control_dim,
            drift: Arc::new(drift),
            input_columns: Arc::new(input_columns),
            drift_divergence: Arc::new(drift_divergence),
            input_divergences: Arc::new(input_divergences),
            control_lower: DVector::from_element(control_dim, f64::NEG_INFINITY),
            control_upper: DVector::from_element(control_dim, f64::INFINITY),
            divergence_source: DivergenceSource::Analytic,
        }
    }

    /// Assemble a system from `f` and `g` alone; divergences are computed by
    /// central finite differences (step 1e-6) and flagged as such.
    pub fn with_finite_difference_divergences(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        input_columns: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        let drift = Arc::new(drift);
        let input_columns = Arc::new(input_columns);
        let drift_for_div = Arc::clone(&drift);
        let cols_for_div = Arc::clone(&input_columns);
        let mut sys = Self {
            name: name.into(),
            state_dim,
            control_dim,
            drift: drift.clone(),
            input_columns: input_columns.clone(),
            drift_divergence: Arc::new(move |x| {
                central_divergence(|p| (drift_for_div)(p), x, 1e-6)
            }),
            input_divergences: Arc::new(move |x| {
                let cols = Arc::clone(&cols_for_div);
                DVector::from_fn(control_dim, |i, _| {
                    central_divergence(|p| (cols)(p).column(i).into_owned(), x, 1e-6)
                })
            }),
            control_lower: DVector::from_element(control_dim, f64::NEG_INFINITY),
            control_upper: DVector::from_element(control_dim, f64::INFINITY),
            divergence_source: DivergenceSource::FiniteDifference,
        };
        sys.divergence_source = DivergenceSource::FiniteDifference;
        sys
    }

    /// Replace the control box bounds (componentwise, ±∞ allowed).
    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        assert_eq!(lower.len(), self.control_dim, "lower bound dimension");
        assert_eq!(upper.len(), self.control_dim, "upper bound dimension");
        assert!(
            lower.iter().zip(upper.iter()).all(|(l, u)| l <= u),
            "control bounds must satisfy lower <= upper"
        );
        self.control_lower = lower;
        self.control_upper = upper;
        self
    }

    /// Symmetric scalar bounds ±limit on every control channel.
    pub fn with_symmetric_bounds(self, limit: f64) -> Self {
        assert!(limit > 0.0, "bound must be positive");
        let m = self.control_dim;
        self.with_bounds(
            DVector::from_element(m, -limit),
            DVector::from_element(m, limit),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    /// `g(x)` as an n×m matrix, columns `g_1 … g_m`.
    pub fn input_columns(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_columns)(x)
    }

    pub fn drift_divergence(&self, x: &DVector<f64>) -> f64 {
        (self.drift_divergence)(x)
    }

    /// `(∇·g_1, …, ∇·g_m)`.
    pub fn input_divergences(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.input_divergences)(x)
    }

    pub fn control_lower(&self) -> &DVector<f64> {
        &self.control_lower
    }

    pub fn control_upper(&self) -> &DVector<f64> {
        &self.control_upper
    }

    pub fn divergence_source(&self) -> DivergenceSource {
        self.divergence_source
    }

    /// Closed-loop vector field `f(x) + g(x)u`.
    pub fn closed_loop(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_columns(x) * u
    }

    /// Clamp a control into the box bounds.
    pub fn clamp_control(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.control_dim, |i, _| {
            u[i].max(self.control_lower[i]).min(self.control_upper[i])
        })
    }
}

/// `ẋ = u` in `d` dimensions: zero drift, identity input matrix, all
/// divergences zero.
pub fn single_integrator(d: usize) -> ControlAffineSystem {
    assert!(d >= 1, "dimension must be at least 1");
    ControlAffineSystem::new(
        "single_integrator",
        d,
        d,
        move |_x| DVector::zeros(d),
        move |_x| DMatrix::identity(d, d),
        |_x| 0.0,
        move |_x| DVector::zeros(d),
    )
}

/// The controlled Duffing oscillator
/// `ẋ₁ = x₂`, `ẋ₂ = x₁ − x₁³ − 0.1 x₂ + u`, with default bounds ±2.
pub fn duffing() -> ControlAffineSystem {
    ControlAffineSystem::new(
        "duffing",
        2,
        1,
        |x| DVector::from_vec(vec![x[1], x[0] - x[0].powi(3) - 0.1 * x[1]]),
        |_x| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        |_x| -0.1,
        |_x| DVector::zeros(1),
    )
    .with_symmetric_bounds(2.0)
}

/// The planar reduction of the Dubin car: single-integrator dynamics in the
/// position subspace. The heading-tracking layer in [`crate::sim`] recovers
/// the full vehicle from the planar controls.
pub fn dubin_reduced() -> ControlAffineSystem {
    let mut sys = single_integrator(2);
    sys.name = "dubin".into();
    sys
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn v(items: &[f64]) -> DVector<f64> {
        DVector::from_vec(items.to_vec())
    }

    #[test]
    fn single_integrator_has_trivial_structure() {
        let sys = single_integrator(2);
        let x = v(&[3.0, -1.0]);
        assert_eq!(sys.drift(&x), v(&[0.0, 0.0]));
        assert_eq!(sys.input_divergences(&x), v(&[0.0, 0.0]));
        let sys3 = single_integrator(3);
        let u = v(&[4.0, 5.0, 6.0]);
        assert_eq!(sys3.closed_loop(&v(&[1.0, 2.0, 3.0]), &u), u);
    }

    #[test]
    fn duffing_equilibria_and_divergence() {
        let sys = duffing();
        assert_eq!(sys.drift(&v(&[0.0, 0.0])), v(&[0.0, 0.0]));
        // x = (1, 0) sits on the drift's fixed-point set: f = (0, 1 - 1 - 0).
        assert_eq!(sys.drift(&v(&[1.0, 0.0])), v(&[0.0, 0.0]));
        assert_eq!(sys.drift_divergence(&v(&[2.5, -1.0])), -0.1);
        assert_eq!(sys.control_lower()[0], -2.0);
        assert_eq!(sys.control_upper()[0], 2.0);
    }

    #[test]
    fn dubin_reduction_is_a_tagged_planar_integrator() {
        let sys = dubin_reduced();
        assert_eq!(sys.name(), "dubin");
        let x = v(&[3.0, 1.0]);
        let u = v(&[0.5, -0.5]);
        assert_eq!(sys.closed_loop(&x, &u), u);
        assert_eq!(sys.drift_divergence(&x), 0.0);
        assert_eq!(sys.input_divergences(&x), v(&[0.0, 0.0]));
    }

    #[test]
    fn analytic_divergences_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for sys in [single_integrator(2), duffing(), dubin_reduced()] {
            for _ in 0..1000 {
                let x = DVector::from_fn(sys.state_dim(), |_, _| rng.random_range(-5.0..5.0));
                let fd_drift = central_divergence(|p| sys.drift(p), &x, 1e-5);
                assert!(
                    (sys.drift_divergence(&x) - fd_drift).abs() < 1e-6,
                    "drift divergence mismatch for {}",
                    sys.name()
                );
                let divs = sys.input_divergences(&x);
                for i in 0..sys.control_dim() {
                    let fd_col = central_divergence(
                        |p| sys.input_columns(p).column(i).into_owned(),
                        &x,
                        1e-5,
                    );
                    assert!(
                        (divs[i] - fd_col).abs() < 1e-6,
                        "input divergence mismatch for {} column {i}",
                        sys.name()
                    );
                }
            }
        }
    }

    #[test]
    fn finite_difference_fallback_is_flagged_and_accurate() {
        // A nonlinear planar field with known divergence: f = (x₁², sin x₂),
        // ∇·f = 2x₁ + cos x₂.
        let sys = ControlAffineSystem::with_finite_difference_divergences(
            "custom",
            2,
            1,
            |x| DVector::from_vec(vec![x[0] * x[0], x[1].sin()]),
            |_x| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        );
        assert_eq!(sys.divergence_source(), DivergenceSource::FiniteDifference);
        let x = v(&[0.4, -1.2]);
        let expected = 2.0 * 0.4 + (-1.2f64).cos();
        assert!((sys.drift_divergence(&x) - expected).abs() < 1e-6);
        assert!((sys.input_divergences(&x)[0]).abs() < 1e-8);
    }

    #[test]
    fn bounds_builder_validates_order() {
        let sys = single_integrator(2).with_bounds(v(&[-1.0, -2.0]), v(&[1.0, 2.0]));
        assert_eq!(sys.clamp_control(&v(&[5.0, -5.0])), v(&[1.0, -2.0]));
    }
}

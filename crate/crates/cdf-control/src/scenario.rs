//! Scenario files: a flat, diff-friendly `key = value` format.
//!
//! One assignment per line, `#` starts a comment, vectors and matrices are
//! whitespace-separated numbers (matrices row-major). Obstacles use indexed
//! keys (`obstacle.1.center`, `obstacle.1.r_unsafe`, …). Later assignments
//! win, which is also how command-line overrides are applied. The full
//! grammar is documented in the repository README.
//!
//! Validation is total: every malformed field produces a named error, and a
//! scenario that parses and validates builds directly into the system,
//! density and simulation configuration it describes.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::controller::{CdfConfig, InfeasibilityPolicy};
use crate::density::{DensityFunction, ObstacleSpec, ShapingFunction};
use crate::dynamics::{dubin_reduced, duffing, single_integrator, ControlAffineSystem};
use crate::sim::{
    monte_carlo_sweep_with, simulate, simulate_dubin_bounded, ControlMode, InitialSampler,
    SimConfig, SimError, SweepReport, Trajectory,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("key `{key}`: expected {expected}, got `{value}`")]
    BadValue {
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SystemKind {
    Duffing,
    SingleIntegrator { dim: usize },
    Dubin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Qp,
    Gradient,
    Nominal,
}

#[derive(Debug, Clone)]
pub struct ObstacleConfig {
    pub tag: u32,
    pub center: Vec<f64>,
    pub r_unsafe: f64,
    pub r_sense: f64,
    pub dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub enum SamplerConfig {
    Ring { center: Vec<f64>, radius: f64 },
    Box { min: Vec<f64>, max: Vec<f64> },
}

/// A parsed, defaulted scenario. Field semantics follow the README grammar.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: SystemKind,
    pub target: Vec<f64>,
    pub p_matrix: Option<Vec<f64>>,
    pub alpha: f64,
    pub eta: f64,
    pub obstacles: Vec<ObstacleConfig>,
    pub beta: f64,
    pub epsilon: f64,
    pub strict_margin: f64,
    pub dt: f64,
    pub steps: usize,
    pub u_min: Option<Vec<f64>>,
    pub u_max: Option<Vec<f64>>,
    pub mode: ModeKind,
    pub gradient_gain: f64,
    pub nominal: Option<Vec<f64>>,
    pub policy: InfeasibilityPolicy,
    pub x0: Option<Vec<f64>>,
    pub theta0: f64,
    pub k_gain: f64,
    pub seed: u64,
    pub count: usize,
    pub sampler: Option<SamplerConfig>,
    pub grid_min: Option<Vec<f64>>,
    pub grid_max: Option<Vec<f64>>,
    pub grid_dims: (usize, usize),
    pub grid_fixed: Option<Vec<f64>>,
}

/// Partially collected obstacle fields, keyed by tag:
/// (center, r_unsafe, r_sense, dims).
type ObstacleParts = (
    Option<Vec<f64>>,
    Option<f64>,
    Option<f64>,
    Option<Vec<usize>>,
);

const SCALAR_KEYS: &[&str] = &[
    "system",
    "state_dim",
    "target",
    "P",
    "alpha",
    "eta",
    "beta",
    "epsilon",
    "margin",
    "dt",
    "steps",
    "u_min",
    "u_max",
    "mode",
    "gradient_gain",
    "nominal",
    "policy",
    "x0",
    "theta0",
    "k_gain",
    "seed",
    "count",
    "sampler",
    "ring_center",
    "ring_radius",
    "box_min",
    "box_max",
    "grid_min",
    "grid_max",
    "grid_dims",
    "grid_fixed",
];

fn parse_entries(text: &str) -> Result<Vec<(String, String)>, ScenarioError> {
    let mut entries = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(ScenarioError::Syntax {
                line: line_no,
                text: line.to_string(),
            });
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(ScenarioError::Syntax {
                line: line_no,
                text: line.to_string(),
            });
        }
        let known = SCALAR_KEYS.contains(&key.as_str()) || is_obstacle_key(&key);
        if !known {
            return Err(ScenarioError::UnknownKey { line: line_no, key });
        }
        entries.push((key, value));
    }
    Ok(entries)
}

fn is_obstacle_key(key: &str) -> bool {
    let mut parts = key.split('.');
    if parts.next() != Some("obstacle") {
        return false;
    }
    let Some(tag) = parts.next() else {
        return false;
    };
    if tag.parse::<u32>().is_err() {
        return false;
    }
    matches!(
        parts.next(),
        Some("center") | Some("r_unsafe") | Some("r_sense") | Some("dims")
    ) && parts.next().is_none()
}

fn bad(key: &str, expected: &'static str, value: &str) -> ScenarioError {
    ScenarioError::BadValue {
        key: key.to_string(),
        expected,
        value: value.to_string(),
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ScenarioError> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| bad(key, "a finite number", value))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ScenarioError> {
    value
        .parse::<usize>()
        .map_err(|_| bad(key, "a nonnegative integer", value))
}

fn parse_vec(key: &str, value: &str) -> Result<Vec<f64>, ScenarioError> {
    let items: Option<Vec<f64>> = value
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect();
    match items {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(bad(key, "whitespace-separated finite numbers", value)),
    }
}

fn parse_index_vec(key: &str, value: &str) -> Result<Vec<usize>, ScenarioError> {
    let items: Result<Vec<usize>, _> = value
        .split_whitespace()
        .map(|tok| tok.parse::<usize>())
        .collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(bad(key, "whitespace-separated indices", value)),
    }
}

impl Scenario {
    /// Parse scenario text; later assignments override earlier ones.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let entries = parse_entries(text)?;
        Self::from_entries(&entries)
    }

    /// Apply a `key = value` override on top of an already parsed scenario,
    /// using the same grammar and the same named errors.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let mut patched = self.clone();
        patched.apply_entry(key, value)?;
        *self = patched;
        Ok(())
    }

    fn from_entries(entries: &[(String, String)]) -> Result<Self, ScenarioError> {
        // Collect obstacle fragments first so ordering by tag is stable.
        let mut obstacle_parts: BTreeMap<u32, ObstacleParts> = BTreeMap::new();
        let mut system: Option<SystemKind> = None;
        let mut state_dim = 2usize;

        let mut scenario = Scenario {
            system: SystemKind::SingleIntegrator { dim: 2 },
            target: Vec::new(),
            p_matrix: None,
            alpha: 0.2,
            eta: 0.1,
            obstacles: Vec::new(),
            beta: 0.1,
            epsilon: 1e-3,
            strict_margin: 0.0,
            dt: 0.01,
            steps: 5000,
            u_min: None,
            u_max: None,
            mode: ModeKind::Qp,
            gradient_gain: 1.0,
            nominal: None,
            policy: InfeasibilityPolicy::Error,
            x0: None,
            theta0: 0.0,
            k_gain: 10.0,
            seed: 0,
            count: 100,
            sampler: None,
            grid_min: None,
            grid_max: None,
            grid_dims: (0, 1),
            grid_fixed: None,
        };
        let mut ring_center: Option<Vec<f64>> = None;
        let mut ring_radius: Option<f64> = None;
        let mut box_min: Option<Vec<f64>> = None;
        let mut box_max: Option<Vec<f64>> = None;
        let mut sampler_kind: Option<String> = None;

        for (key, value) in entries {
            match key.as_str() {
                "system" => {
                    system = Some(match value.as_str() {
                        "duffing" => SystemKind::Duffing,
                        "single_integrator" => SystemKind::SingleIntegrator { dim: state_dim },
                        "dubin" => SystemKind::Dubin,
                        other => {
                            return Err(bad(
                                "system",
                                "one of duffing, single_integrator, dubin",
                                other,
                            ))
                        }
                    });
                }
                "state_dim" => {
                    state_dim = parse_usize(key, value)?;
                    if state_dim == 0 {
                        return Err(bad(key, "a positive integer", value));
                    }
                    if let Some(SystemKind::SingleIntegrator { ref mut dim }) = system {
                        *dim = state_dim;
                    }
                }
                "sampler" => sampler_kind = Some(value.clone()),
                "ring_center" => ring_center = Some(parse_vec(key, value)?),
                "ring_radius" => ring_radius = Some(parse_f64(key, value)?),
                "box_min" => box_min = Some(parse_vec(key, value)?),
                "box_max" => box_max = Some(parse_vec(key, value)?),
                _ => {
                    if let Some(rest) = key.strip_prefix("obstacle.") {
                        let mut it = rest.split('.');
                        let tag: u32 = it.next().unwrap().parse().unwrap();
                        let field = it.next().unwrap();
                        let entry = obstacle_parts.entry(tag).or_default();
                        match field {
                            "center" => entry.0 = Some(parse_vec(key, value)?),
                            "r_unsafe" => entry.1 = Some(parse_f64(key, value)?),
                            "r_sense" => entry.2 = Some(parse_f64(key, value)?),
                            "dims" => entry.3 = Some(parse_index_vec(key, value)?),
                            _ => unreachable!("filtered by is_obstacle_key"),
                        }
                    } else {
                        scenario.apply_entry(key, value)?;
                    }
                }
            }
        }

        let Some(system) = system else {
            return Err(ScenarioError::MissingKey("system"));
        };
        scenario.system = system;
        if scenario.target.is_empty() {
            return Err(ScenarioError::MissingKey("target"));
        }

        for (tag, (center, r_unsafe, r_sense, dims)) in obstacle_parts {
            let center = center.ok_or(ScenarioError::Invalid(format!(
                "obstacle {tag}: missing center"
            )))?;
            let r_unsafe = r_unsafe.ok_or(ScenarioError::Invalid(format!(
                "obstacle {tag}: missing r_unsafe"
            )))?;
            let r_sense = r_sense.ok_or(ScenarioError::Invalid(format!(
                "obstacle {tag}: missing r_sense"
            )))?;
            scenario.obstacles.push(ObstacleConfig {
                tag,
                center,
                r_unsafe,
                r_sense,
                dims,
            });
        }

        scenario.sampler = match sampler_kind.as_deref() {
            None => None,
            Some("ring") => {
                let radius = ring_radius.ok_or(ScenarioError::MissingKey("ring_radius"))?;
                let center = ring_center.unwrap_or_else(|| vec![0.0, 0.0]);
                Some(SamplerConfig::Ring { center, radius })
            }
            Some("box") => {
                let min = box_min.ok_or(ScenarioError::MissingKey("box_min"))?;
                let max = box_max.ok_or(ScenarioError::MissingKey("box_max"))?;
                Some(SamplerConfig::Box { min, max })
            }
            Some(other) => return Err(bad("sampler", "ring or box", other)),
        };

        Ok(scenario)
    }

    fn apply_entry(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        match key {
            "target" => self.target = parse_vec(key, value)?,
            "P" => self.p_matrix = Some(parse_vec(key, value)?),
            "alpha" => self.alpha = parse_f64(key, value)?,
            "eta" => self.eta = parse_f64(key, value)?,
            "beta" => self.beta = parse_f64(key, value)?,
            "epsilon" => self.epsilon = parse_f64(key, value)?,
            "margin" => self.strict_margin = parse_f64(key, value)?,
            "dt" => self.dt = parse_f64(key, value)?,
            "steps" => self.steps = parse_usize(key, value)?,
            "u_min" => self.u_min = Some(parse_vec(key, value)?),
            "u_max" => self.u_max = Some(parse_vec(key, value)?),
            "mode" => {
                self.mode = match value {
                    "qp" => ModeKind::Qp,
                    "gradient" => ModeKind::Gradient,
                    "nominal" => ModeKind::Nominal,
                    other => return Err(bad("mode", "one of qp, gradient, nominal", other)),
                }
            }
            "gradient_gain" => self.gradient_gain = parse_f64(key, value)?,
            "nominal" => self.nominal = Some(parse_vec(key, value)?),
            "policy" => {
                self.policy = match value {
                    "error" => InfeasibilityPolicy::Error,
                    "slack" => InfeasibilityPolicy::Slack,
                    other => return Err(bad("policy", "error or slack", other)),
                }
            }
            "x0" => self.x0 = Some(parse_vec(key, value)?),
            "theta0" => self.theta0 = parse_f64(key, value)?,
            "k_gain" => self.k_gain = parse_f64(key, value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| bad(key, "a nonnegative integer", value))?;
            }
            "count" => self.count = parse_usize(key, value)?,
            "grid_min" => self.grid_min = Some(parse_vec(key, value)?),
            "grid_max" => self.grid_max = Some(parse_vec(key, value)?),
            "grid_dims" => {
                let dims = parse_index_vec(key, value)?;
                if dims.len() != 2 || dims[0] == dims[1] {
                    return Err(bad(key, "two distinct indices", value));
                }
                self.grid_dims = (dims[0], dims[1]);
            }
            "grid_fixed" => self.grid_fixed = Some(parse_vec(key, value)?),
            other => {
                return Err(ScenarioError::UnknownKey {
                    line: 0,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    fn state_dim(&self) -> usize {
        match self.system {
            SystemKind::Duffing => 2,
            SystemKind::SingleIntegrator { dim } => dim,
            SystemKind::Dubin => 2,
        }
    }

    /// Validate everything and assemble the runtime objects.
    pub fn build(&self) -> Result<BuiltScenario, ScenarioError> {
        let n = self.state_dim();
        if self.target.len() != n {
            return Err(ScenarioError::Invalid(format!(
                "target has {} components but the workspace dimension is {n}",
                self.target.len()
            )));
        }
        let target = DVector::from_vec(self.target.clone());

        let p = match &self.p_matrix {
            None => DMatrix::identity(n, n),
            Some(values) => {
                if values.len() != n * n {
                    return Err(ScenarioError::Invalid(format!(
                        "P has {} entries, expected {} (row-major {n}x{n})",
                        values.len(),
                        n * n
                    )));
                }
                DMatrix::from_row_slice(n, n, values)
            }
        };
        let shaping = ShapingFunction::new(target.clone(), p, self.alpha)
            .map_err(|e| ScenarioError::Invalid(format!("shaping: {e}")))?;

        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for obs in &self.obstacles {
            let dims = obs
                .dims
                .clone()
                .unwrap_or_else(|| (0..obs.center.len()).collect());
            let spec = ObstacleSpec::new(
                DVector::from_vec(obs.center.clone()),
                obs.r_unsafe,
                obs.r_sense,
                dims,
            )
            .map_err(|e| ScenarioError::Invalid(format!("obstacle {}: {e}", obs.tag)))?;
            obstacles.push(spec);
        }

        if self.eta <= 0.0 || !self.eta.is_finite() {
            return Err(ScenarioError::Invalid("eta must be positive".into()));
        }
        let density = DensityFunction::new(obstacles, shaping, self.eta)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        for (obs, cfg) in density.obstacles().iter().zip(&self.obstacles) {
            if obs.clearance(&target) <= 0.0 {
                return Err(ScenarioError::Invalid(format!(
                    "target inside unsafe set (obstacle {})",
                    cfg.tag
                )));
            }
        }

        let mut system = match self.system {
            SystemKind::Duffing => duffing(),
            SystemKind::SingleIntegrator { dim } => single_integrator(dim),
            SystemKind::Dubin => dubin_reduced(),
        };
        let m = system.control_dim();
        let broadcast =
            |name: &'static str, values: &Vec<f64>| -> Result<DVector<f64>, ScenarioError> {
                match values.len() {
                    1 => Ok(DVector::from_element(m, values[0])),
                    len if len == m => Ok(DVector::from_vec(values.clone())),
                    _ => Err(ScenarioError::Invalid(format!(
                        "{name} must have 1 or {m} components"
                    ))),
                }
            };
        if self.u_min.is_some() || self.u_max.is_some() {
            let lower = match &self.u_min {
                Some(vals) => broadcast("u_min", vals)?,
                None => system.control_lower().clone(),
            };
            let upper = match &self.u_max {
                Some(vals) => broadcast("u_max", vals)?,
                None => system.control_upper().clone(),
            };
            if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
                return Err(ScenarioError::Invalid(
                    "u_min exceeds u_max on some channel".into(),
                ));
            }
            system = system.with_bounds(lower, upper);
        }

        let mut cdf = CdfConfig::new(self.beta)
            .with_epsilon(self.epsilon)
            .with_dt(self.dt)
            .with_horizon(self.steps)
            .with_policy(self.policy)
            .with_margin(self.strict_margin);
        if let Some(nominal) = &self.nominal {
            if nominal.len() != m {
                return Err(ScenarioError::Invalid(format!(
                    "nominal control must have {m} components"
                )));
            }
            let fixed = DVector::from_vec(nominal.clone());
            cdf = cdf.with_nominal(Arc::new(move |_x: &DVector<f64>| fixed.clone()));
        }
        cdf.validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        let mode = match self.mode {
            ModeKind::Qp => ControlMode::QpCdf,
            ModeKind::Gradient => {
                if system.control_dim() != system.state_dim() {
                    return Err(ScenarioError::Invalid(
                        "gradient mode needs single-integrator structure".into(),
                    ));
                }
                if self.gradient_gain <= 0.0 || !self.gradient_gain.is_finite() {
                    return Err(ScenarioError::Invalid(
                        "gradient_gain must be positive".into(),
                    ));
                }
                ControlMode::Gradient {
                    gain: self.gradient_gain,
                }
            }
            ModeKind::Nominal => {
                if cdf.u_nominal.is_none() {
                    return Err(ScenarioError::Invalid(
                        "mode = nominal requires a `nominal` control".into(),
                    ));
                }
                ControlMode::NominalOnly
            }
        };
        if self.system == SystemKind::Dubin && mode != ControlMode::QpCdf {
            return Err(ScenarioError::Invalid(
                "the dubin pipeline always uses the qp mode".into(),
            ));
        }
        if self.system == SystemKind::Dubin && (self.k_gain <= 0.0 || !self.k_gain.is_finite()) {
            return Err(ScenarioError::Invalid("k_gain must be positive".into()));
        }
        if !self.theta0.is_finite() {
            return Err(ScenarioError::Invalid("theta0 must be finite".into()));
        }

        let x0 = match &self.x0 {
            None => None,
            Some(values) => {
                if values.len() != n {
                    return Err(ScenarioError::Invalid(format!(
                        "x0 has {} components but the workspace dimension is {n}",
                        values.len()
                    )));
                }
                let x0 = DVector::from_vec(values.clone());
                for (obs, cfg) in density.obstacles().iter().zip(&self.obstacles) {
                    if obs.clearance(&x0) <= 0.0 {
                        return Err(ScenarioError::Invalid(format!(
                            "initial state unsafe (obstacle {})",
                            cfg.tag
                        )));
                    }
                }
                Some(x0)
            }
        };

        if self.count == 0 {
            return Err(ScenarioError::Invalid("count must be >= 1".into()));
        }

        let sampler = match &self.sampler {
            None => None,
            Some(SamplerConfig::Ring { center, radius }) => {
                if center.len() != 2 || n != 2 {
                    return Err(ScenarioError::Invalid(
                        "ring sampling needs a planar workspace".into(),
                    ));
                }
                if *radius <= 0.0 || !radius.is_finite() {
                    return Err(ScenarioError::Invalid(
                        "ring_radius must be positive".into(),
                    ));
                }
                Some(InitialSampler::Ring {
                    center: DVector::from_vec(center.clone()),
                    radius: *radius,
                })
            }
            Some(SamplerConfig::Box { min, max }) => {
                if min.len() != n || max.len() != n {
                    return Err(ScenarioError::Invalid(format!(
                        "box sampler bounds must have {n} components"
                    )));
                }
                if min.iter().zip(max.iter()).any(|(lo, hi)| lo > hi) {
                    return Err(ScenarioError::Invalid(
                        "box_min exceeds box_max on some axis".into(),
                    ));
                }
                Some(InitialSampler::Box {
                    min: DVector::from_vec(min.clone()),
                    max: DVector::from_vec(max.clone()),
                })
            }
        };

        let grid = self.grid_spec(&density)?;

        Ok(BuiltScenario {
            system,
            density,
            sim: SimConfig { cdf, mode },
            is_dubin: self.system == SystemKind::Dubin,
            x0,
            theta0: self.theta0,
            k_gain: self.k_gain,
            seed: self.seed,
            count: self.count,
            sampler,
            grid,
        })
    }

    fn grid_spec(&self, density: &DensityFunction) -> Result<GridSpec, ScenarioError> {
        let n = self.state_dim();
        let (d0, d1) = self.grid_dims;
        if d0 >= n || d1 >= n {
            return Err(ScenarioError::Invalid(format!(
                "grid_dims reference coordinates outside the {n}-dimensional workspace"
            )));
        }
        if n > 2 && self.grid_fixed.is_none() && self.grid_min.is_none() {
            // A slice of a higher-dimensional workspace defaults to the
            // target's coordinates on the remaining axes.
        }
        let base = match &self.grid_fixed {
            Some(values) => {
                if values.len() != n {
                    return Err(ScenarioError::Invalid(format!(
                        "grid_fixed must supply all {n} coordinates"
                    )));
                }
                DVector::from_vec(values.clone())
            }
            None => DVector::from_vec(self.target.clone()),
        };
        // Default window: cover the target and every sensing shell with margin.
        let auto = |dim: usize, pick_max: bool| -> f64 {
            let mut bound = self.target[dim];
            for obs in density.obstacles() {
                if let Some(pos) = obs.dims().iter().position(|&d| d == dim) {
                    let c = obs.center()[pos];
                    if pick_max {
                        bound = bound.max(c + 1.5 * obs.r_sense());
                    } else {
                        bound = bound.min(c - 1.5 * obs.r_sense());
                    }
                }
            }
            if pick_max {
                bound + 1.0
            } else {
                bound - 1.0
            }
        };
        let lo = match &self.grid_min {
            Some(values) => {
                if values.len() != 2 {
                    return Err(ScenarioError::Invalid(
                        "grid_min must have two components (slice coordinates)".into(),
                    ));
                }
                (values[0], values[1])
            }
            None => (auto(d0, false), auto(d1, false)),
        };
        let hi = match &self.grid_max {
            Some(values) => {
                if values.len() != 2 {
                    return Err(ScenarioError::Invalid(
                        "grid_max must have two components (slice coordinates)".into(),
                    ));
                }
                (values[0], values[1])
            }
            None => (auto(d0, true), auto(d1, true)),
        };
        if lo.0 >= hi.0 || lo.1 >= hi.1 {
            return Err(ScenarioError::Invalid(
                "grid window is empty (grid_min must be below grid_max)".into(),
            ));
        }
        Ok(GridSpec {
            dims: (d0, d1),
            base,
            min: lo,
            max: hi,
        })
    }
}

/// Density-grid slice description: which two coordinates vary, the window,
/// and the values held fixed on all other coordinates.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub dims: (usize, usize),
    pub base: DVector<f64>,
    pub min: (f64, f64),
    pub max: (f64, f64),
}

/// A validated scenario with everything built and ready to run.
#[derive(Debug)]
pub struct BuiltScenario {
    pub system: ControlAffineSystem,
    pub density: DensityFunction,
    pub sim: SimConfig,
    pub is_dubin: bool,
    pub x0: Option<DVector<f64>>,
    pub theta0: f64,
    pub k_gain: f64,
    pub seed: u64,
    pub count: usize,
    pub sampler: Option<InitialSampler>,
    pub grid: GridSpec,
}

impl BuiltScenario {
    /// Run one closed loop from the given start (dispatches the Dubin
    /// pipeline when the scenario asks for it).
    pub fn run_from(&self, x0: &DVector<f64>) -> Result<Trajectory, SimError> {
        if self.is_dubin {
            let bounds = Some((
                self.system.control_lower().clone(),
                self.system.control_upper().clone(),
            ));
            simulate_dubin_bounded(
                &self.density,
                &self.sim.cdf,
                x0,
                self.theta0,
                self.k_gain,
                bounds,
            )
        } else {
            simulate(&self.system, &self.density, &self.sim, x0)
        }
    }

    /// Run the scenario from its own `x0`.
    pub fn run(&self) -> Result<Trajectory, SimError> {
        let x0 = self
            .x0
            .as_ref()
            .ok_or_else(|| SimError::InvalidInput("scenario has no x0".into()))?;
        self.run_from(x0)
    }

    /// Seeded sweep with `count` runs.
    pub fn sweep(&self, count: usize, seed: u64) -> Result<SweepReport, SimError> {
        let sampler = self
            .sampler
            .as_ref()
            .ok_or_else(|| SimError::InvalidInput("scenario has no sampler".into()))?;
        Ok(monte_carlo_sweep_with(
            &self.density,
            sampler,
            count,
            seed,
            |x0| self.run_from(x0),
        ))
    }
}

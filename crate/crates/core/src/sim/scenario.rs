//! Scenario configuration and the two built-in demos.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::control::{ControllerSpec, Reference};
use super::wind::WindSpec;
use super::SimError;
use crate::disturbance::gp::{GpHyper, GpInput, HyperPolicy, HyperSearch};
use crate::dynamics::GRAVITY;
use crate::dynamics::{DoubleIntegrator, DynamicsModel, PlanarHover, ProductModel, Quad2DVert, VerticalHover};
use crate::grid::{Axis, Grid, ScalarField};
use crate::safety::FilterConfig;
use crate::solver::{Dissipation, SolveConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Quad2dVert { k_t: f64, k_0: f64 },
    PlanarHover { gravity: f64, d0: f64, d1: f64, n0: f64, max_angle: f64 },
    VerticalHover { gravity: f64, thrust_gain: f64, thrust_min: f64, thrust_max: f64 },
    DoubleIntegrator { a_min: f64, a_max: f64 },
    /// Independent parts stacked block-diagonally.
    Product { name: String, parts: Vec<ModelSpec>, labels: Option<Vec<String>> },
}

impl ModelSpec {
    pub fn quad2d() -> Self {
        ModelSpec::Quad2dVert { k_t: 19.6, k_0: 0.0 }
    }

    pub fn planar_hover() -> Self {
        let m = PlanarHover::default();
        ModelSpec::PlanarHover { gravity: m.gravity, d0: m.d0, d1: m.d1, n0: m.n0, max_angle: m.max_angle() }
    }

    pub fn vertical_hover() -> Self {
        let m = VerticalHover::default();
        let r = m.thrust_range();
        ModelSpec::VerticalHover { gravity: m.gravity, thrust_gain: m.thrust_gain, thrust_min: r.lo, thrust_max: r.hi }
    }

    pub fn near_hover() -> Self {
        let labels = ["px", "vx", "thx", "wx", "py", "vy", "thy", "wy", "pz", "vz"].map(String::from).to_vec();
        ModelSpec::Product {
            name: "near_hover_10d".into(),
            parts: vec![Self::planar_hover(), Self::planar_hover(), Self::vertical_hover()],
            labels: Some(labels),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn DynamicsModel>, SimError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SimError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        Ok(match self {
            ModelSpec::Quad2dVert { k_t, k_0 } => {
                positive("k_t", *k_t)?;
                Arc::new(Quad2DVert::new(*k_t, *k_0))
            }
            ModelSpec::PlanarHover { gravity, d0, d1, n0, max_angle } => {
                positive("max_angle", *max_angle)?;
                Arc::new(PlanarHover::new(*gravity, *d0, *d1, *n0, *max_angle))
            }
            ModelSpec::VerticalHover { gravity, thrust_gain, thrust_min, thrust_max } => {
                positive("thrust_gain", *thrust_gain)?;
                if thrust_min >= thrust_max {
                    return Err(SimError::Config("thrust_min must be below thrust_max".into()));
                }
                Arc::new(VerticalHover::new(*gravity, *thrust_gain, *thrust_min, *thrust_max))
            }
            ModelSpec::DoubleIntegrator { a_min, a_max } => {
                if a_min >= a_max {
                    return Err(SimError::Config("a_min must be below a_max".into()));
                }
                Arc::new(DoubleIntegrator::new(*a_min, *a_max))
            }
            ModelSpec::Product { name, parts, labels } => {
                let parts = parts.iter().map(|p| p.build()).collect::<Result<Vec<_>, _>>()?;
                let mut m = ProductModel::new(name.clone(), parts);
                if let Some(labels) = labels {
                    if labels.len() != m.state_dim() {
                        return Err(SimError::Config(format!("{} labels for {} states", labels.len(), m.state_dim())));
                    }
                    m = m.with_labels(labels.clone());
                }
                Arc::new(m)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Self { min, max, n }
    }
}

pub fn build_grid(axes: &[AxisSpec]) -> Result<Grid, SimError> {
    Ok(Grid::new(axes.iter().map(|a| Axis::new(a.min, a.max, a.n)).collect())?)
}

/// Box over the full state; `None` leaves a side unconstrained. Each axis
/// violation is divided by `scale` (default 1) before taking the maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub lo: Vec<Option<f64>>,
    pub hi: Vec<Option<f64>>,
    #[serde(default)]
    pub scale: Option<Vec<f64>>,
}

impl ConstraintSpec {
    fn check(&self, dim: usize) -> Result<(), SimError> {
        if self.lo.len() != dim || self.hi.len() != dim || self.scale.as_ref().is_some_and(|s| s.len() != dim) {
            return Err(SimError::Config(format!("constraint needs {dim} entries per side")));
        }
        if self.scale.as_ref().is_some_and(|s| s.iter().any(|v| !(*v > 0.0))) {
            return Err(SimError::Config("constraint scales must be positive".into()));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if let (Some(l), Some(h)) = (l, h) {
                if l >= h {
                    return Err(SimError::Config(format!("empty constraint interval [{l}, {h}]")));
                }
            }
        }
        if self.lo.iter().chain(&self.hi).all(Option::is_none) {
            return Err(SimError::Config("constraint bounds nothing".into()));
        }
        Ok(())
    }

    fn scale(&self, i: usize) -> f64 {
        self.scale.as_ref().map_or(1.0, |s| s[i])
    }

    /// `max_i` of the scaled violation over the listed full-state axes; `<= 0` inside.
    pub fn value(&self, x: &[f64], indices: &[usize]) -> f64 {
        let mut v = f64::NEG_INFINITY;
        for (&i, &xi) in indices.iter().zip(x) {
            let s = self.scale(i);
            if let Some(l) = self.lo[i] {
                v = v.max((l - xi) / s);
            }
            if let Some(h) = self.hi[i] {
                v = v.max((xi - h) / s);
            }
        }
        v
    }

    pub fn violated(&self, x: &[f64]) -> bool {
        let all: Vec<usize> = (0..x.len()).collect();
        self.value(x, &all) > 0.0
    }

    /// Constraint field on a subsystem grid whose axes are the listed full-state axes.
    pub fn field(&self, grid: &Grid, indices: &[usize]) -> Result<ScalarField, SimError> {
        if indices.iter().all(|&i| self.lo[i].is_none() && self.hi[i].is_none()) {
            return Err(SimError::Config(format!("no constraint acts on state axes {indices:?}")));
        }
        Ok(ScalarField::from_fn(grid.clone(), |x| self.value(x, indices))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// One GP input: a full-state coordinate. Coordinates outside the
/// subsystem's grid are swept over `sweep` and the bounds united.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub state: usize,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSpec {
    pub name: String,
    pub model: ModelSpec,
    pub state_indices: Vec<usize>,
    pub control_indices: Vec<usize>,
    pub disturbance_indices: Vec<usize>,
    pub grid: Vec<AxisSpec>,
    /// Per-axis node counts of a coarse grid for the initial solve.
    #[serde(default)]
    pub coarse: Option<Vec<usize>>,
    pub features: Vec<FeatureSpec>,
}

impl SubsystemSpec {
    /// GP inputs on this subsystem's grid.
    pub fn gp_inputs(&self) -> Result<Vec<GpInput>, SimError> {
        self.features
            .iter()
            .map(|f| match (self.state_indices.iter().position(|&i| i == f.state), f.sweep) {
                (Some(axis), _) => Ok(GpInput::Axis { axis }),
                (None, Some(s)) => Ok(GpInput::Sweep { min: s.min, max: s.max, n: s.n }),
                (None, None) => Err(SimError::Config(format!(
                    "subsystem {}: feature state {} is not on the grid and has no sweep",
                    self.name, f.state
                ))),
            })
            .collect()
    }

    pub fn feature_indices(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.state).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSpec {
    /// Prior standard deviation of every channel; the initial bounds are
    /// `+- k_sigma * prior_std`.
    pub prior_std: f64,
    pub prior_lengthscale: f64,
    pub k_sigma: f64,
    pub max_points: usize,
    pub policy: HyperPolicy,
    /// Minimum number of samples before a refit is attempted.
    pub min_samples: usize,
    /// Only measurements from the last `window` seconds enter a refit.
    pub window: f64,
}

impl Default for GpSpec {
    fn default() -> Self {
        Self {
            prior_std: 0.1,
            prior_lengthscale: 1.0,
            k_sigma: 3.0,
            max_points: 500,
            policy: HyperPolicy::Search(HyperSearch::default()),
            min_samples: 20,
            window: 10.0,
        }
    }
}

impl GpSpec {
    pub fn prior_hyper(&self, dim: usize) -> GpHyper {
        GpHyper {
            signal_var: self.prior_std * self.prior_std,
            lengthscales: vec![self.prior_lengthscale; dim],
            noise_var: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    pub duration: f64,
    pub physics_dt: f64,
    pub control_period: f64,
    pub refit_period: f64,
    /// Simulated time between launching a safety update and adopting it.
    pub update_latency: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self { duration: 30.0, physics_dt: 0.001, control_period: 0.01, refit_period: 5.0, update_latency: 1.0 }
    }
}

impl Timing {
    pub fn substeps(&self) -> Result<usize, SimError> {
        let k = (self.control_period / self.physics_dt).round();
        if !(self.duration > 0.0 && self.physics_dt > 0.0 && self.control_period > 0.0 && self.refit_period > 0.0)
            || self.update_latency < 0.0
            || k < 1.0
            || ((k * self.physics_dt - self.control_period).abs() > 1e-9 * self.control_period)
        {
            return Err(SimError::Config(format!("inconsistent timing {self:?}")));
        }
        Ok(k as usize)
    }

    pub fn ticks(&self) -> usize {
        (self.duration / self.control_period).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    pub constraint: ConstraintSpec,
    pub subsystems: Vec<SubsystemSpec>,
    pub initial_state: Vec<f64>,
    pub reference: Reference,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub wind: WindSpec,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub gp: GpSpec,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "yes")]
    pub filter_enabled: bool,
    /// Learn disturbance bounds online and update the safe set.
    #[serde(default = "yes")]
    pub learning: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Scenario {
    /// Checks index maps, grids and the constraint against the model.
    pub fn validate(&self) -> Result<Arc<dyn DynamicsModel>, SimError> {
        let model = self.model.build()?;
        let n = model.state_dim();
        self.constraint.check(n)?;
        self.timing.substeps()?;
        self.solver.validate()?;
        if self.initial_state.len() != n {
            return Err(SimError::Config(format!("initial state needs {n} entries")));
        }
        if self.constraint.violated(&self.initial_state) {
            return Err(SimError::Config("initial state violates the constraint".into()));
        }
        if self.subsystems.is_empty() {
            return Err(SimError::Config("at least one subsystem is required".into()));
        }
        for s in &self.subsystems {
            let m = s.model.build()?;
            if s.grid.len() != m.state_dim() {
                return Err(SimError::Config(format!("subsystem {}: grid needs {} axes", s.name, m.state_dim())));
            }
            if s.state_indices.iter().chain(&s.features.iter().map(|f| f.state).collect::<Vec<_>>()).any(|&i| i >= n) {
                return Err(SimError::Config(format!("subsystem {}: state index out of range", s.name)));
            }
            let grid = build_grid(&s.grid)?;
            if let Some(c) = &s.coarse {
                grid.with_resolution(c)?;
            }
            // the constraint must sit inside the grid
            for (axis, &i) in s.state_indices.iter().enumerate() {
                let a = grid.axis(axis);
                let inside = |b: Option<f64>| b.is_none_or(|b| b >= a.min && b <= a.max);
                if !inside(self.constraint.lo[i]) || !inside(self.constraint.hi[i]) {
                    return Err(SimError::Config(format!("subsystem {}: constraint on state {i} outside the grid", s.name)));
                }
            }
            s.gp_inputs()?;
            if s.features.is_empty() {
                return Err(SimError::Config(format!("subsystem {}: no GP features", s.name)));
            }
        }
        if !(self.gp.k_sigma > 0.0 && self.gp.prior_std > 0.0 && self.gp.window > 0.0) || self.gp.max_points == 0 {
            return Err(SimError::Config("gp: k_sigma, prior_std, window and max_points must be positive".into()));
        }
        Ok(model)
    }

    /// Altitude-only quadcopter cycling between the floor and 2.3 m with a
    /// detuned PD controller and ground-effect wind.
    pub fn quad2d_demo() -> Self {
        Scenario {
            name: "quad2d_demo".into(),
            model: ModelSpec::quad2d(),
            constraint: ConstraintSpec { lo: vec![Some(0.35), None], hi: vec![Some(2.8), None], scale: None },
            subsystems: vec![SubsystemSpec {
                name: "quad2d".into(),
                model: ModelSpec::quad2d(),
                state_indices: vec![0, 1],
                control_indices: vec![0],
                disturbance_indices: vec![0],
                grid: vec![AxisSpec::new(0.0, 3.2, 101), AxisSpec::new(-6.0, 6.0, 101)],
                coarse: Some(vec![51, 51]),
                features: vec![FeatureSpec { state: 0, sweep: None }],
            }],
            initial_state: vec![1.0, 0.0],
            reference: Reference::Cycle { position_index: 0, velocity_index: 1, low: 0.35, high: 2.3, period: 6.0 },
            controller: ControllerSpec::DetunedPd { position_index: 0, velocity_index: 1, kp: 1.2, kd: 0.05 },
            wind: WindSpec::Altitude { altitude_index: 0, channel: 0, w0: 1.5, a0: 1.2, s0: 0.2, onset: 8.0 },
            timing: Timing { duration: 30.0, ..Timing::default() },
            gp: GpSpec::default(),
            solver: SolveConfig::default(),
            filter: FilterConfig::default(),
            filter_enabled: true,
            learning: true,
            seed: 7,
        }
    }

    /// Decomposed near-hover quadcopter flying a figure eight through a
    /// windy corner.
    pub fn near_hover_demo() -> Self {
        let lateral = |name: &str, offset: usize, channel: usize, other: usize| SubsystemSpec {
            name: name.into(),
            model: ModelSpec::planar_hover(),
            state_indices: (offset..offset + 4).collect(),
            control_indices: vec![channel],
            disturbance_indices: vec![channel],
            grid: vec![
                AxisSpec::new(-2.8, 2.8, 17),
                AxisSpec::new(-3.9, 3.9, 17),
                AxisSpec::new(-0.45, 0.45, 17),
                AxisSpec::new(-3.0, 3.0, 17),
            ],
            coarse: Some(vec![9, 9, 9, 9]),
            features: vec![
                FeatureSpec { state: offset, sweep: None },
                FeatureSpec { state: other, sweep: Some(SweepSpec { min: -2.5, max: 2.5, n: 11 }) },
            ],
        };
        let angle = std::f64::consts::PI / 8.0;
        let inf = None;
        let mut hover_state = vec![0.0; 10];
        hover_state[8] = 1.5;
        let mut initial_state = vec![0.0; 10];
        initial_state[8] = 1.5;
        Scenario {
            name: "near_hover_demo".into(),
            model: ModelSpec::near_hover(),
            constraint: ConstraintSpec {
                lo: vec![Some(-2.5), Some(-3.5), Some(-angle), inf, Some(-2.5), Some(-3.5), Some(-angle), inf, Some(0.35), Some(-3.5)],
                hi: vec![Some(2.5), Some(3.5), Some(angle), inf, Some(2.5), Some(3.5), Some(angle), inf, Some(2.8), Some(3.5)],
                scale: Some(vec![2.5, 3.5, angle, 1.0, 2.5, 3.5, angle, 1.0, 1.225, 3.5]),
            },
            subsystems: vec![
                lateral("x", 0, 0, 4),
                lateral("y", 4, 1, 0),
                SubsystemSpec {
                    name: "z".into(),
                    model: ModelSpec::vertical_hover(),
                    state_indices: vec![8, 9],
                    control_indices: vec![2],
                    disturbance_indices: vec![2],
                    grid: vec![AxisSpec::new(0.0, 3.2, 81), AxisSpec::new(-4.5, 4.5, 81)],
                    coarse: Some(vec![41, 41]),
                    features: vec![FeatureSpec { state: 8, sweep: None }],
                },
            ],
            initial_state,
            reference: Reference::FigureEight { x: [0, 1], y: [4, 5], z: [8, 9], ax: 2.0, ay: 1.5, omega: 0.5, altitude: 1.5 },
            controller: ControllerSpec::Lqr {
                q: vec![4.0, 1.0, 0.1, 0.01, 4.0, 1.0, 0.1, 0.01, 4.0, 1.0],
                r: vec![1.0, 1.0, 0.1],
                hover_state,
                hover_control: vec![0.0, 0.0, GRAVITY],
            },
            wind: WindSpec::Region {
                axes: [0, 4],
                lo: [-2.5, -2.5],
                hi: [-1.0, -1.0],
                ramp: 0.25,
                mean: vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0],
                std: vec![0.1, 0.1, 0.0],
                onset: 5.0,
            },
            timing: Timing { duration: 40.0, update_latency: 5.0, refit_period: 10.0, ..Timing::default() },
            // signal scale pinned to the prior so unvisited regions fall back to the prior bounds
            gp: GpSpec {
                policy: HyperPolicy::Search(HyperSearch { signal_std: vec![0.1], ..HyperSearch::default() }),
                ..GpSpec::default()
            },
            // LF smears the thin 4D safe sets away; the ENO scheme needs a smaller step
            solver: SolveConfig { dissipation: Dissipation::Eno2, cfl_factor: 0.4, ..SolveConfig::default() },
            filter: FilterConfig::default(),
            filter_enabled: true,
            learning: true,
            seed: 11,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for s in [Scenario::quad2d_demo(), Scenario::near_hover_demo()] {
            s.validate().unwrap();
        }
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let s = Scenario::near_hover_demo();
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["timing"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<Scenario>(v).is_err());
    }

    #[test]
    fn constraint_value() {
        let c = ConstraintSpec { lo: vec![Some(0.35), None], hi: vec![Some(2.8), None], scale: None };
        assert!((c.value(&[1.0, 5.0], &[0, 1]) + 0.65).abs() < 1e-12);
        assert!(c.violated(&[0.3, 0.0]));
        assert!(!c.violated(&[0.35, 100.0]));
    }

    #[test]
    fn gp_inputs_map_to_axes_and_sweeps() {
        let s = Scenario::near_hover_demo();
        let inputs = s.subsystems[1].gp_inputs().unwrap();
        assert_eq!(inputs[0], GpInput::Axis { axis: 0 });
        assert!(matches!(inputs[1], GpInput::Sweep { n: 11, .. }));
    }

    #[test]
    fn rejects_constraint_outside_grid() {
        let mut s = Scenario::quad2d_demo();
        s.subsystems[0].grid[0] = AxisSpec::new(0.5, 3.2, 51);
        assert!(s.validate().is_err());
    }
}

//! Self-contained subsystems of a larger model, filtered jointly.
//!
//! The full safe set is the intersection of the back-projected subsystem safe
//! sets, so in level-set form the combined value is the maximum of the
//! subsystem values.

use thiserror::Error;

use crate::disturbance::IntervalField;
use crate::grid::ScalarField;
use crate::safety::{Contraction, ContractionSchedule, FilterDecision, SafetyError, SafetyFilter};

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("{what} index {index} is used by more than one subsystem")]
    Overlap { what: &'static str, index: usize },
    #[error("{what} index {index} is not covered by any subsystem")]
    Uncovered { what: &'static str, index: usize },
    #[error("subsystem {name}: {what} map has {got} entries, model expects {expected}")]
    MapSize { name: String, what: &'static str, expected: usize, got: usize },
    #[error("expected a {expected}-dimensional vector, got {got}")]
    Length { expected: usize, got: usize },
    #[error("no subsystem at position {0}")]
    NoSuchSubsystem(usize),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

/// A subsystem, its index maps into the full state/control/disturbance
/// vectors, and its filter.
#[derive(Clone, Debug)]
pub struct Subsystem {
    pub name: String,
    pub state_indices: Vec<usize>,
    pub control_indices: Vec<usize>,
    pub disturbance_indices: Vec<usize>,
    pub filter: SafetyFilter,
}

impl Subsystem {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.state_indices.iter().map(|&i| x[i]).collect()
    }
}

/// Joint decision over all subsystems.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedDecision {
    pub control: Vec<f64>,
    pub overridden: bool,
    pub value: f64,
    pub parts: Vec<FilterDecision>,
    /// Subsystems whose own band was entered.
    pub critical: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    state_dim: usize,
    control_dim: usize,
    disturbance_dim: usize,
    subsystems: Vec<Subsystem>,
    schedule: ContractionSchedule,
    lambda: f64,
    emergency: bool,
}

fn check_partition(what: &'static str, dim: usize, maps: &[&[usize]]) -> Result<(), DecompositionError> {
    let mut seen = vec![false; dim];
    for map in maps {
        for &i in *map {
            if i >= dim {
                return Err(DecompositionError::Uncovered { what, index: i });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DecompositionError::Overlap { what, index: i });
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(index) => Err(DecompositionError::Uncovered { what, index }),
        None => Ok(()),
    }
}

impl Decomposition {
    /// The index maps must partition `0..state_dim` and `0..control_dim`;
    /// disturbance maps must be disjoint.
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        disturbance_dim: usize,
        subsystems: Vec<Subsystem>,
        schedule: ContractionSchedule,
    ) -> Result<Self, DecompositionError> {
        for s in &subsystems {
            let m = s.filter.model();
            for (what, expected, got) in [
                ("state", m.state_dim(), s.state_indices.len()),
                ("control", m.control_dim(), s.control_indices.len()),
                ("disturbance", m.disturbance_dim(), s.disturbance_indices.len()),
            ] {
                if expected != got {
                    return Err(DecompositionError::MapSize { name: s.name.clone(), what, expected, got });
                }
            }
        }
        let maps = |f: fn(&Subsystem) -> &[usize]| subsystems.iter().map(f).collect::<Vec<_>>();
        check_partition("state", state_dim, &maps(|s| &s.state_indices))?;
        check_partition("control", control_dim, &maps(|s| &s.control_indices))?;
        let mut seen = vec![false; disturbance_dim];
        for s in &subsystems {
            for &i in &s.disturbance_indices {
                if i >= disturbance_dim {
                    return Err(DecompositionError::Uncovered { what: "disturbance", index: i });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(DecompositionError::Overlap { what: "disturbance", index: i });
                }
            }
        }
        Ok(Self { state_dim, control_dim, disturbance_dim, subsystems, schedule, lambda: 0.0, emergency: false })
    }

    /// A single system viewed as a one-part decomposition.
    pub fn single(name: &str, filter: SafetyFilter, schedule: ContractionSchedule) -> Result<Self, DecompositionError> {
        let m = filter.model().clone();
        let sub = Subsystem {
            name: name.to_owned(),
            state_indices: (0..m.state_dim()).collect(),
            control_indices: (0..m.control_dim()).collect(),
            disturbance_indices: (0..m.disturbance_dim()).collect(),
            filter,
        };
        Self::new(m.state_dim(), m.control_dim(), m.disturbance_dim(), vec![sub], schedule)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_dim
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn subsystem(&self, i: usize) -> Result<&Subsystem, DecompositionError> {
        self.subsystems.get(i).ok_or(DecompositionError::NoSuchSubsystem(i))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn emergency(&self) -> bool {
        self.emergency
    }

    fn check_len(&self, expected: usize, got: usize) -> Result<(), DecompositionError> {
        if expected == got {
            Ok(())
        } else {
            Err(DecompositionError::Length { expected, got })
        }
    }

    /// Coordinates of subsystem `i` within the full state.
    pub fn project(&self, x: &[f64], i: usize) -> Result<Vec<f64>, DecompositionError> {
        self.check_len(self.state_dim, x.len())?;
        Ok(self.subsystem(i)?.project(x))
    }

    /// Inverse of [`project`](Self::project) over all subsystems.
    pub fn scatter(&self, parts: &[Vec<f64>]) -> Result<Vec<f64>, DecompositionError> {
        self.check_len(self.subsystems.len(), parts.len())?;
        let mut x = vec![0.0; self.state_dim];
        for (s, p) in self.subsystems.iter().zip(parts) {
            self.check_len(s.state_indices.len(), p.len())?;
            for (&i, &v) in s.state_indices.iter().zip(p) {
                x[i] = v;
            }
        }
        Ok(x)
    }

    /// Subsystem values at `x` (`+inf` off-grid).
    pub fn values(&self, x: &[f64]) -> Result<Vec<f64>, DecompositionError> {
        self.check_len(self.state_dim, x.len())?;
        self.subsystems.iter().map(|s| Ok(s.filter.value_at(&s.project(x))?)).collect()
    }

    /// `max_i V_i(x_i)`.
    pub fn combined_value(&self, x: &[f64]) -> Result<f64, DecompositionError> {
        Ok(self.values(x)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Minimum of the combined value over the product of the subsystem grids.
    pub fn combined_min(&self) -> f64 {
        self.subsystems.iter().map(|s| s.filter.value().min_value()).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Overrides every channel with its subsystem's optimal control as soon
    /// as any subsystem enters its band around `{V_i <= -lambda}`.
    pub fn combined_control(&self, x: &[f64], u_perf: &[f64]) -> Result<CombinedDecision, DecompositionError> {
        self.check_len(self.state_dim, x.len())?;
        self.check_len(self.control_dim, u_perf.len())?;
        let mut parts = Vec::with_capacity(self.subsystems.len());
        for s in &self.subsystems {
            let xs = s.project(x);
            let us: Vec<f64> = s.control_indices.iter().map(|&j| u_perf[j]).collect();
            parts.push(s.filter.filter(&xs, &us)?);
        }
        let critical: Vec<bool> = parts.iter().map(|p| p.overridden).collect();
        let overridden = critical.iter().any(|c| *c);
        let mut control = u_perf.to_vec();
        if overridden {
            for (s, p) in self.subsystems.iter().zip(&parts) {
                let u = if p.overridden {
                    p.control.clone()
                } else {
                    s.filter.optimal_control(&s.project(x))?.control
                };
                for (&j, v) in s.control_indices.iter().zip(u) {
                    control[j] = v;
                }
            }
        }
        let value = parts.iter().map(|p| if p.out_of_domain { f64::INFINITY } else { p.value }).fold(f64::NEG_INFINITY, f64::max);
        Ok(CombinedDecision { control, overridden, value, parts, critical })
    }

    /// Contracts the shared level so that every listed full state is excluded.
    pub fn contract(&mut self, violation_states: &[Vec<f64>]) -> Result<Contraction, DecompositionError> {
        let values = violation_states.iter().map(|x| self.combined_value(x)).collect::<Result<Vec<_>, _>>()?;
        let out = self.schedule.contract(self.lambda, &values, self.combined_min());
        self.lambda = out.lambda;
        self.emergency |= out.emergency;
        for s in &mut self.subsystems {
            s.filter.set_lambda(self.lambda, self.emergency);
        }
        Ok(out)
    }

    /// Installs new value functions and bounds for every subsystem at once
    /// and clears the contraction.
    pub fn adopt(&mut self, updates: Vec<(ScalarField, IntervalField, bool)>) -> Result<(), DecompositionError> {
        self.check_len(self.subsystems.len(), updates.len())?;
        if updates.iter().any(|u| !u.2) {
            return Err(SafetyError::NotConverged.into());
        }
        // validate everything before mutating so adoption is all-or-nothing
        let mut staged = self.subsystems.clone();
        for (s, (v, d, ok)) in staged.iter_mut().zip(updates) {
            s.filter.adopt(v, d, ok)?;
        }
        self.subsystems = staged;
        self.lambda = 0.0;
        self.emergency = false;
        Ok(())
    }

    pub fn set_base_band(&mut self, i: usize, band: f64) -> Result<(), DecompositionError> {
        self.subsystems.get_mut(i).ok_or(DecompositionError::NoSuchSubsystem(i))?.filter.set_base_band(band);
        Ok(())
    }
}

/// Nodes touched per sweep when each subsystem is solved on its own grid.
pub fn decomposed_node_count(resolution: u64, subsystem_dims: &[u32]) -> u128 {
    subsystem_dims.iter().map(|&d| (resolution as u128).pow(d)).sum()
}

/// Nodes of a single grid over the full state.
pub fn full_node_count(resolution: u64, subsystem_dims: &[u32]) -> u128 {
    (resolution as u128).pow(subsystem_dims.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DoubleIntegrator, DynamicsModel, Interval, PlanarHover, VerticalHover};
    use crate::grid::{Axis, Grid};
    use crate::safety::FilterConfig;
    use std::sync::Arc;

    fn flat_filter(model: Arc<dyn DynamicsModel>, lo: f64, hi: f64, value: f64) -> SafetyFilter {
        let d = model.state_dim();
        let g = Grid::new((0..d).map(|_| Axis::new(lo, hi, 5)).collect()).unwrap();
        let v = ScalarField::constant(g.clone(), value);
        let dist = IntervalField::uniform(&g, &vec![Interval::symmetric(0.3); model.disturbance_dim()]);
        SafetyFilter::new(v, model, dist, FilterConfig { base_band: 0.05, ..FilterConfig::default() }).unwrap()
    }

    fn near_hover(values: [f64; 3]) -> Decomposition {
        let lat: Arc<dyn DynamicsModel> = Arc::new(PlanarHover::default());
        let vert: Arc<dyn DynamicsModel> = Arc::new(VerticalHover::default());
        let subs = vec![
            Subsystem {
                name: "x".into(),
                state_indices: vec![0, 1, 2, 3],
                control_indices: vec![0],
                disturbance_indices: vec![0],
                filter: flat_filter(lat.clone(), -3.0, 3.0, values[0]),
            },
            Subsystem {
                name: "y".into(),
                state_indices: vec![4, 5, 6, 7],
                control_indices: vec![1],
                disturbance_indices: vec![1],
                filter: flat_filter(lat, -3.0, 3.0, values[1]),
            },
            Subsystem {
                name: "z".into(),
                state_indices: vec![8, 9],
                control_indices: vec![2],
                disturbance_indices: vec![2],
                filter: flat_filter(vert, -3.0, 3.0, values[2]),
            },
        ];
        Decomposition::new(10, 3, 3, subs, ContractionSchedule::default()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let dec = near_hover([-1.0, -0.5, -2.0]);
        let mut x = vec![0.0; 10];
        x[0] = 1.0;
        x[1] = 2.0;
        x[2] = 0.1;
        x[8] = 1.5;
        x[9] = -0.5;
        assert_eq!(dec.project(&x, 0).unwrap(), vec![1.0, 2.0, 0.1, 0.0]);
        assert_eq!(dec.project(&x, 2).unwrap(), vec![1.5, -0.5]);
        let parts: Vec<Vec<f64>> = (0..3).map(|i| dec.project(&x, i).unwrap()).collect();
        assert_eq!(dec.scatter(&parts).unwrap(), x);
    }

    #[test]
    fn combined_value_is_max() {
        let dec = near_hover([-1.0, -0.5, -2.0]);
        assert_eq!(dec.combined_value(&[0.0; 10]).unwrap(), -0.5);
        let dec = near_hover([-1.0, 0.2, -2.0]);
        assert!(dec.combined_value(&[0.0; 10]).unwrap() > 0.0);
        let mut far = vec![0.0; 10];
        far[8] = 10.0;
        assert_eq!(near_hover([-1.0; 3]).combined_value(&far).unwrap(), f64::INFINITY);
    }

    #[test]
    fn critical_subsystem_triggers_full_override() {
        let dec = near_hover([-0.01, -2.0, -2.0]);
        let u_perf = [0.1, -0.1, 9.0];
        let out = dec.combined_control(&[0.0; 10], &u_perf).unwrap();
        assert!(out.overridden);
        assert_eq!(out.critical, vec![true, false, false]);
        assert_eq!(out.control.len(), 3);
        for (j, p) in out.parts.iter().enumerate() {
            // flat values: each channel falls back to its tie-rule control
            assert!(p.degenerate, "part {j}");
        }
        let calm = near_hover([-2.0; 3]).combined_control(&[0.0; 10], &u_perf).unwrap();
        assert!(!calm.overridden);
        assert_eq!(calm.control, u_perf.to_vec());
    }

    #[test]
    fn invalid_maps_rejected() {
        let m: Arc<dyn DynamicsModel> = Arc::new(DoubleIntegrator::new(-1.0, 1.0));
        let sub = |name: &str, s: Vec<usize>, c: Vec<usize>, d: Vec<usize>| Subsystem {
            name: name.into(),
            state_indices: s,
            control_indices: c,
            disturbance_indices: d,
            filter: flat_filter(m.clone(), -1.0, 1.0, -1.0),
        };
        let overlap = vec![sub("a", vec![0, 1], vec![0], vec![0]), sub("b", vec![1, 2], vec![1], vec![1])];
        assert!(matches!(
            Decomposition::new(4, 2, 2, overlap, ContractionSchedule::default()),
            Err(DecompositionError::Overlap { what: "state", index: 1 })
        ));
        let gap = vec![sub("a", vec![0, 1], vec![0], vec![0]), sub("b", vec![2, 4], vec![1], vec![1])];
        assert!(matches!(
            Decomposition::new(5, 2, 2, gap, ContractionSchedule::default()),
            Err(DecompositionError::Uncovered { what: "state", index: 3 })
        ));
        let short = vec![sub("a", vec![0], vec![0], vec![0])];
        assert!(matches!(
            Decomposition::new(1, 1, 1, short, ContractionSchedule::default()),
            Err(DecompositionError::MapSize { .. })
        ));
    }

    #[test]
    fn shared_contraction_and_atomic_adoption() {
        let mut dec = near_hover([-1.0, -0.5, -2.0]);
        // flat fields: the violation sits at the minimum, so the cap is hit
        let out = dec.contract(&[vec![0.0; 10]]).unwrap();
        assert!(out.emergency);
        assert_eq!(out.lambda, 0.4);
        for s in dec.subsystems() {
            assert_eq!(s.filter.lambda(), out.lambda);
        }
        let updates: Vec<_> =
            dec.subsystems().iter().map(|s| (s.filter.value().clone(), s.filter.dbounds().clone(), true)).collect();
        let mut bad = updates.clone();
        bad[1].2 = false;
        assert!(dec.adopt(bad).is_err());
        assert!(dec.lambda() > 0.0);
        dec.adopt(updates).unwrap();
        assert_eq!(dec.lambda(), 0.0);
    }

    #[test]
    fn node_count_accounting() {
        assert_eq!(decomposed_node_count(25, &[4, 4, 2]), 781_875);
        assert_eq!(full_node_count(25, &[4, 4, 2]), 95_367_431_640_625);
    }
}

//! Least-restrictive safety filter around a converged value function.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disturbance::IntervalField;
use crate::dynamics::{extremal_inputs, AffineTerms, DynamicsError, DynamicsModel};
use crate::grid::{GridError, ScalarField};

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("refusing to adopt a value function that did not converge")]
    NotConverged,
    #[error("value grid has {grid} dimensions, model has {model}")]
    DimensionMismatch { grid: usize, model: usize },
    #[error("invalid filter configuration: {0}")]
    Config(String),
}

/// Geometric contraction schedule `start * ratio^k`, capped at
/// `cap_fraction * |min V|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionSchedule {
    pub start: f64,
    pub ratio: f64,
    pub cap_fraction: f64,
}

impl Default for ContractionSchedule {
    fn default() -> Self {
        Self { start: 0.05, ratio: 1.5, cap_fraction: 0.8 }
    }
}

/// Result of a contraction request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contraction {
    pub lambda: f64,
    /// The cap was hit or the contracted set is empty.
    pub emergency: bool,
}

impl ContractionSchedule {
    fn validate(&self) -> Result<(), SafetyError> {
        if !(self.start > 0.0 && self.ratio > 1.0 && self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return Err(SafetyError::Config(format!("bad contraction schedule {self:?}")));
        }
        Ok(())
    }

    /// Smallest schedule element strictly above `-value`.
    pub fn level_excluding(&self, value: f64) -> f64 {
        let mut lambda = self.start;
        while -value >= lambda {
            lambda *= self.ratio;
        }
        lambda
    }

    /// New contraction level excluding every state whose value is listed.
    /// `min_value` is the minimum of the value function; never returns less
    /// than `current`.
    pub fn contract(&self, current: f64, violation_values: &[f64], min_value: f64) -> Contraction {
        if violation_values.is_empty() {
            return Contraction { lambda: current, emergency: false };
        }
        let needed = violation_values.iter().map(|&v| self.level_excluding(v)).fold(current, f64::max);
        let cap = self.cap_fraction * (-min_value).max(0.0);
        if needed > cap {
            Contraction { lambda: cap.max(current), emergency: true }
        } else {
            Contraction { lambda: needed, emergency: min_value > -needed }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Minimum switch band; typically `tol * dt` of the solve that produced V.
    pub base_band: f64,
    /// Time between control updates. The band grows by the largest change of
    /// V one control period can produce, which keeps the filter invariant
    /// under sample-and-hold control.
    pub control_period: f64,
    pub schedule: ContractionSchedule,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { base_band: 1e-5, control_period: 0.0, schedule: ContractionSchedule::default() }
    }
}

/// Optimal safety control at a state.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyControl {
    pub control: Vec<f64>,
    /// The costate gives no information about the control (flat V); the
    /// tie rule picked the control.
    pub degenerate: bool,
    pub out_of_domain: bool,
    pub gradient: Vec<f64>,
}

/// What the filter did at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterDecision {
    pub control: Vec<f64>,
    pub overridden: bool,
    pub value: f64,
    pub band: f64,
    pub out_of_domain: bool,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct SafetyFilter {
    value: ScalarField,
    model: Arc<dyn DynamicsModel>,
    dbounds: IntervalField,
    config: FilterConfig,
    lambda: f64,
    emergency: bool,
}

impl SafetyFilter {
    pub fn new(
        value: ScalarField,
        model: Arc<dyn DynamicsModel>,
        dbounds: IntervalField,
        config: FilterConfig,
    ) -> Result<Self, SafetyError> {
        if !(config.base_band > 0.0) || !(config.control_period >= 0.0) {
            return Err(SafetyError::Config("base_band must be positive and control_period non-negative".into()));
        }
        config.schedule.validate()?;
        check_dims(&value, &dbounds, model.as_ref())?;
        Ok(Self { value, model, dbounds, config, lambda: 0.0, emergency: false })
    }

    pub fn value(&self) -> &ScalarField {
        &self.value
    }

    pub fn dbounds(&self) -> &IntervalField {
        &self.dbounds
    }

    pub fn model(&self) -> &Arc<dyn DynamicsModel> {
        &self.model
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn emergency(&self) -> bool {
        self.emergency
    }

    pub fn set_lambda(&mut self, lambda: f64, emergency: bool) {
        self.lambda = lambda.max(0.0);
        self.emergency = emergency;
    }

    /// Interpolated value; states off the grid are reported as `+inf`.
    pub fn value_at(&self, x: &[f64]) -> Result<f64, SafetyError> {
        let q = self.value.interp(x)?;
        Ok(if q.out_of_domain { f64::INFINITY } else { q.value })
    }

    /// `u* = argmin_u max_d <grad V(x), f(x, u, d)>` from the interpolated
    /// central gradient.
    pub fn optimal_control(&self, x: &[f64]) -> Result<SafetyControl, SafetyError> {
        let (gradient, out_of_domain) = self.value.gradient_at(x)?;
        let (dist, _) = self.dbounds.at(x)?;
        let ext = extremal_inputs(self.model.as_ref(), x, &gradient, &dist)?;
        let degenerate = ext.control_switch.iter().all(|s| *s == 0.0);
        Ok(SafetyControl { control: ext.control, degenerate, out_of_domain, gradient })
    }

    /// Switch band at `x`: the largest of the configured floor, half the
    /// biggest jump between adjacent nodes of the enclosing cell, and the
    /// change of V one control period can produce.
    pub fn band(&self, x: &[f64], gradient: &[f64]) -> Result<f64, SafetyError> {
        let jump = 0.5 * self.value.cell_jump(x)?;
        let lookahead = if self.config.control_period > 0.0 {
            let (dist, _) = self.dbounds.at(x)?;
            let mut terms = AffineTerms::for_model(self.model.as_ref());
            terms.evaluate(self.model.as_ref(), x)?;
            self.config.control_period * terms.directional_bound(gradient, self.model.control_bounds(), &dist)
        } else {
            0.0
        };
        Ok(self.config.base_band.max(jump).max(lookahead))
    }

    /// Passes `u_perf` through unless `V(x) > -lambda - band`, in which case
    /// the optimal safety control is applied.
    pub fn filter(&self, x: &[f64], u_perf: &[f64]) -> Result<FilterDecision, SafetyError> {
        let q = self.value.interp(x)?;
        let safety = self.optimal_control(x)?;
        let band = self.band(x, &safety.gradient)?;
        let overridden = q.out_of_domain || q.value > -self.lambda - band;
        Ok(FilterDecision {
            control: if overridden { safety.control } else { u_perf.to_vec() },
            overridden,
            value: q.value,
            band,
            out_of_domain: q.out_of_domain,
            degenerate: safety.degenerate,
        })
    }

    /// Raises the contraction level so that every listed state lies outside
    /// `{V <= -lambda}`.
    pub fn contract(&mut self, violation_states: &[Vec<f64>]) -> Result<Contraction, SafetyError> {
        let values = violation_states.iter().map(|x| self.value_at(x)).collect::<Result<Vec<_>, _>>()?;
        let out = self.config.schedule.contract(self.lambda, &values, self.value.min_value());
        self.lambda = out.lambda;
        self.emergency |= out.emergency;
        Ok(out)
    }

    /// Replaces the value function and disturbance bounds and clears the contraction.
    pub fn adopt(&mut self, value: ScalarField, dbounds: IntervalField, converged: bool) -> Result<(), SafetyError> {
        if !converged {
            return Err(SafetyError::NotConverged);
        }
        check_dims(&value, &dbounds, self.model.as_ref())?;
        self.value = value;
        self.dbounds = dbounds;
        self.lambda = 0.0;
        self.emergency = false;
        Ok(())
    }

    /// Updates the band floor (e.g. after adopting a solve with a different step).
    pub fn set_base_band(&mut self, base_band: f64) {
        if base_band > 0.0 {
            self.config.base_band = base_band;
        }
    }
}

fn check_dims(value: &ScalarField, dbounds: &IntervalField, model: &dyn DynamicsModel) -> Result<(), SafetyError> {
    let d = value.grid().ndims();
    if d != model.state_dim() || dbounds.grid().ndims() != d {
        return Err(SafetyError::DimensionMismatch { grid: d, model: model.state_dim() });
    }
    if dbounds.channels() != model.disturbance_dim() {
        return Err(SafetyError::Config(format!(
            "disturbance field has {} channels, model expects {}",
            dbounds.channels(),
            model.disturbance_dim()
        )));
    }
    Ok(())
}

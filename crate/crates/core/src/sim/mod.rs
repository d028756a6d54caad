//! Deterministic quadcopter simulation with online safety updates.
//!
//! The physics runs RK4 at a fixed sub-step inside each control period with
//! the control and the wind draw held. The disturbance estimate compares the
//! observed state with a second integration that leaves the wind out.

mod control;
mod episode;
mod scenario;
mod wind;

pub use control::{discretize, dlqr, linearize, Controller, ControllerSpec, Lqr, Reference};
pub use episode::{initial_solves, prior_bounds, run_episode, run_episode_with, EpisodeLog, EpisodeRow, Event, InitialSolve, UpdateReport};
pub use scenario::{
    build_grid, AxisSpec, ConstraintSpec, FeatureSpec, GpSpec, ModelSpec, Scenario, SubsystemSpec, SweepSpec, Timing,
};
pub use wind::{WindField, WindSpec};

use thiserror::Error;

use crate::decomposition::DecompositionError;
use crate::disturbance::gp::GpError;
use crate::disturbance::DisturbanceError;
use crate::dynamics::{AffineTerms, DynamicsError, DynamicsModel};
use crate::grid::GridError;
use crate::safety::SafetyError;
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error("background update failed: {0}")]
    Update(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One classic fourth-order Runge-Kutta step of length `h`.
pub fn rk4_step(model: &dyn DynamicsModel, x: &[f64], u: &[f64], d: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    model.flow_into(x, u, d, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    model.flow_into(&tmp, u, d, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    model.flow_into(&tmp, u, d, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    model.flow_into(&tmp, u, d, &mut k4);
    (0..n).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

fn integrate(model: &dyn DynamicsModel, x: &[f64], u: &[f64], d: &[f64], period: f64, substeps: usize) -> Vec<f64> {
    let h = period / substeps as f64;
    let mut x = x.to_vec();
    for _ in 0..substeps {
        x = rk4_step(model, &x, u, d, h);
    }
    x
}

/// State after one control period and the disturbance estimate for it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub measured: Vec<f64>,
}

/// Advances `x` over `period` with `u` and the wind `d` held, and estimates
/// each disturbance channel from the state it drives:
/// `d_k = (x_obs[i] - x_pred[i]) / (period * g_ik)` where `x_pred` is the
/// same integration with `d = 0`.
pub fn step(
    model: &dyn DynamicsModel,
    x: &[f64],
    u: &[f64],
    d: &[f64],
    period: f64,
    substeps: usize,
) -> Result<StepOutcome, SimError> {
    if !(period > 0.0) || substeps == 0 {
        return Err(SimError::Config(format!("bad step: period {period}, substeps {substeps}")));
    }
    let observed = integrate(model, x, u, d, period, substeps);
    let predicted = integrate(model, x, u, &vec![0.0; d.len()], period, substeps);
    let mut terms = AffineTerms::for_model(model);
    terms.evaluate(model, x)?;
    let measured = (0..d.len())
        .map(|k| {
            let col = terms.disturbance_column(k);
            let (i, g) = col
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, &g)| if g.abs() > best.1.abs() { (i, g) } else { best });
            if g == 0.0 {
                0.0
            } else {
                (observed[i] - predicted[i]) / (period * g)
            }
        })
        .collect();
    Ok(StepOutcome { state: observed, measured })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{near_hover_10d, Interval, PlanarHover, Quad2DVert, VerticalHover};
    use approx::assert_relative_eq;

    #[derive(Debug)]
    struct Growth;

    impl DynamicsModel for Growth {
        fn name(&self) -> &str {
            "growth"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_bounds(&self) -> &[Interval] {
            &[]
        }
        fn disturbance_dim(&self) -> usize {
            0
        }
        fn flow_into(&self, x: &[f64], _u: &[f64], _d: &[f64], out: &mut [f64]) {
            out[0] = x[0];
        }
    }

    #[test]
    fn rk4_order_check() {
        let dt = 0.01;
        let x = rk4_step(&Growth, &[1.0], &[], &[], dt);
        assert!(((x[0] - dt.exp()) / dt.exp()).abs() < 1e-9);
    }

    #[test]
    fn hover_without_wind_measures_nothing() {
        let out = step(&Quad2DVert::default(), &[1.0, 0.0], &[0.5], &[0.0], 0.01, 10).unwrap();
        assert_relative_eq!(out.measured[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(out.state[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_wind_is_recovered() {
        let out = step(&Quad2DVert::default(), &[1.0, 0.3], &[0.7], &[1.25], 0.01, 10).unwrap();
        assert_relative_eq!(out.measured[0], 1.25, epsilon = 1e-9);
        let model = near_hover_10d(PlanarHover::default(), VerticalHover::default());
        let x = [0.1, 0.2, 0.05, 0.1, -0.3, 0.4, -0.02, 0.1, 1.5, -0.5];
        let out = step(&model, &x, &[0.1, -0.05, 9.0], &[0.7, -0.2, 0.05], 0.01, 10).unwrap();
        for (m, d) in out.measured.iter().zip([0.7, -0.2, 0.05]) {
            assert_relative_eq!(*m, d, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_period() {
        assert!(step(&Quad2DVert::default(), &[1.0, 0.0], &[0.5], &[0.0], 0.0, 10).is_err());
        assert!(step(&Quad2DVert::default(), &[1.0, 0.0], &[0.5], &[0.0], 0.01, 0).is_err());
    }
}

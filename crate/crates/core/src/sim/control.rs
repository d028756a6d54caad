//! Reference trajectories and performance controllers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::dynamics::DynamicsModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    Hold { state: Vec<f64> },
    /// Cosine cycle of one position coordinate between `low` and `high`,
    /// starting at `low`.
    Cycle { position_index: usize, velocity_index: usize, low: f64, high: f64, period: f64 },
    /// `p_x = ax sin(w t)`, `p_y = ay sin(2 w t)` at constant altitude. Index
    /// pairs are `[position, velocity]`.
    FigureEight { x: [usize; 2], y: [usize; 2], z: [usize; 2], ax: f64, ay: f64, omega: f64, altitude: f64 },
}

impl Reference {
    /// Desired full state at time `t`; unset coordinates are zero.
    pub fn state(&self, t: f64, dim: usize) -> Vec<f64> {
        let mut r = vec![0.0; dim];
        match self {
            Reference::Hold { state } => r.copy_from_slice(state),
            Reference::Cycle { position_index, velocity_index, low, high, period } => {
                let mid = 0.5 * (low + high);
                let amp = 0.5 * (high - low);
                let w = 2.0 * PI / period;
                r[*position_index] = mid - amp * (w * t).cos();
                r[*velocity_index] = amp * w * (w * t).sin();
            }
            Reference::FigureEight { x, y, z, ax, ay, omega, altitude } => {
                let s = omega * t;
                r[x[0]] = ax * s.sin();
                r[x[1]] = ax * omega * s.cos();
                r[y[0]] = ay * (2.0 * s).sin();
                r[y[1]] = 2.0 * ay * omega * (2.0 * s).cos();
                r[z[0]] = *altitude;
                r[z[1]] = 0.0;
            }
        }
        r
    }

    fn validate(&self, dim: usize) -> Result<(), SimError> {
        let ok = match self {
            Reference::Hold { state } => state.len() == dim,
            Reference::Cycle { position_index, velocity_index, low, high, period } => {
                *position_index < dim && *velocity_index < dim && low < high && *period > 0.0
            }
            Reference::FigureEight { x, y, z, omega, .. } => {
                x.iter().chain(y).chain(z).all(|&i| i < dim) && *omega > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid reference {self:?} for a {dim}-dimensional state")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// `u = u_hover + kp (p_ref - p) + kd (v_ref - v)`, saturated. The hover
    /// input is found from the model.
    DetunedPd { position_index: usize, velocity_index: usize, kp: f64, kd: f64 },
    /// Discrete-time LQR around a hover point with diagonal weights.
    Lqr { q: Vec<f64>, r: Vec<f64>, hover_state: Vec<f64>, hover_control: Vec<f64> },
}

#[derive(Clone, Debug)]
pub enum Controller {
    Pd { position_index: usize, velocity_index: usize, kp: f64, kd: f64, hover: f64, lo: f64, hi: f64 },
    Lqr(Lqr),
}

impl Controller {
    pub fn new(spec: &ControllerSpec, model: &dyn DynamicsModel, reference: &Reference, period: f64) -> Result<Self, SimError> {
        let n = model.state_dim();
        reference.validate(n)?;
        match spec {
            ControllerSpec::DetunedPd { position_index, velocity_index, kp, kd } => {
                if model.control_dim() != 1 || *position_index >= n || *velocity_index >= n {
                    return Err(SimError::Config("detuned_pd needs a single-input model and valid indices".into()));
                }
                let b = model.control_bounds()[0];
                let hover = hover_input(model, &reference.state(0.0, n), *velocity_index)?;
                Ok(Controller::Pd {
                    position_index: *position_index,
                    velocity_index: *velocity_index,
                    kp: *kp,
                    kd: *kd,
                    hover,
                    lo: b.lo,
                    hi: b.hi,
                })
            }
            ControllerSpec::Lqr { q, r, hover_state, hover_control } => {
                Ok(Controller::Lqr(Lqr::new(model, hover_state, hover_control, q, r, period)?))
            }
        }
    }

    pub fn control(&self, x: &[f64], x_ref: &[f64]) -> Vec<f64> {
        match self {
            Controller::Pd { position_index: p, velocity_index: v, kp, kd, hover, lo, hi } => {
                let u = hover + kp * (x_ref[*p] - x[*p]) + kd * (x_ref[*v] - x[*v]);
                vec![u.clamp(*lo, *hi)]
            }
            Controller::Lqr(l) => l.control(x, x_ref),
        }
    }
}

/// Input that zeroes the acceleration of coordinate `velocity_index` at `x`
/// with no disturbance (the flow is affine in the single input).
fn hover_input(model: &dyn DynamicsModel, x: &[f64], velocity_index: usize) -> Result<f64, SimError> {
    let b = model.control_bounds()[0];
    let d = vec![0.0; model.disturbance_dim()];
    let mut f = vec![0.0; x.len()];
    model.flow_into(x, &[b.lo], &d, &mut f);
    let a_lo = f[velocity_index];
    model.flow_into(x, &[b.hi], &d, &mut f);
    let a_hi = f[velocity_index];
    if a_lo == a_hi || a_lo.signum() == a_hi.signum() {
        return Err(SimError::Config("model cannot hover within its input bounds".into()));
    }
    Ok(b.lo + (b.hi - b.lo) * a_lo / (a_lo - a_hi))
}

/// Central-difference Jacobians `(A, B)` of the undisturbed flow.
pub fn linearize(model: &dyn DynamicsModel, x0: &[f64], u0: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x0.len();
    let m = u0.len();
    let d = vec![0.0; model.disturbance_dim()];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let h = 1e-6;
    for j in 0..n {
        let (mut xp, mut xm) = (x0.to_vec(), x0.to_vec());
        xp[j] += h;
        xm[j] -= h;
        model.flow_into(&xp, u0, &d, &mut fp);
        model.flow_into(&xm, u0, &d, &mut fm);
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    for j in 0..m {
        let (mut up, mut um) = (u0.to_vec(), u0.to_vec());
        up[j] += h;
        um[j] -= h;
        model.flow_into(x0, &up, &d, &mut fp);
        model.flow_into(x0, &um, &d, &mut fm);
        for i in 0..n {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (a, b)
}

/// Zero-order-hold discretization via the exponential of the augmented matrix.
pub fn discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, period: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * period));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * period));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Gain of the discrete algebraic Riccati equation, solved by fixed-point iteration.
pub fn dlqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, SimError> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = (r + &btp * b).try_inverse().ok_or_else(|| SimError::Config("singular LQR system".into()))?;
        let k = &s * &btp * a;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let diff = (&next - &p).abs().max();
        p = next;
        if !diff.is_finite() {
            break;
        }
        if diff <= 1e-10 * p.abs().max().max(1.0) {
            let btp = b.transpose() * &p;
            let s = (r + &btp * b).try_inverse().ok_or_else(|| SimError::Config("singular LQR system".into()))?;
            return Ok(s * btp * a);
        }
    }
    Err(SimError::Config("Riccati iteration did not converge".into()))
}

#[derive(Clone, Debug)]
pub struct Lqr {
    pub gain: DMatrix<f64>,
    pub hover_control: Vec<f64>,
    /// Linearization used to design the gain.
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Lqr {
    pub fn new(
        model: &dyn DynamicsModel,
        hover_state: &[f64],
        hover_control: &[f64],
        q: &[f64],
        r: &[f64],
        period: f64,
    ) -> Result<Self, SimError> {
        let (n, m) = (model.state_dim(), model.control_dim());
        if hover_state.len() != n || hover_control.len() != m || q.len() != n || r.len() != m {
            return Err(SimError::Config(format!("lqr needs {n} state and {m} control entries")));
        }
        if q.iter().any(|v| *v < 0.0) || r.iter().any(|v| *v <= 0.0) || !(period > 0.0) {
            return Err(SimError::Config("lqr weights must be q >= 0, r > 0".into()));
        }
        let (a, b) = linearize(model, hover_state, hover_control);
        let (ad, bd) = discretize(&a, &b, period);
        let gain = dlqr(&ad, &bd, &DMatrix::from_diagonal(&DVector::from_column_slice(q)), &DMatrix::from_diagonal(&DVector::from_column_slice(r)))?;
        let bounds = model.control_bounds();
        Ok(Self {
            gain,
            hover_control: hover_control.to_vec(),
            a,
            b,
            lo: bounds.iter().map(|b| b.lo).collect(),
            hi: bounds.iter().map(|b| b.hi).collect(),
        })
    }

    pub fn control(&self, x: &[f64], x_ref: &[f64]) -> Vec<f64> {
        let e = DVector::from_iterator(x.len(), x.iter().zip(x_ref).map(|(a, b)| a - b));
        let du = &self.gain * e;
        (0..self.hover_control.len()).map(|j| (self.hover_control[j] - du[j]).clamp(self.lo[j], self.hi[j])).collect()
    }

    /// Largest real part among the eigenvalues of `A - B K`.
    pub fn closed_loop_abscissa(&self) -> f64 {
        let cl = &self.a - &self.b * &self.gain;
        cl.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

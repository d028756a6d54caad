//! Control-affine dynamics `f(x, u, d) = a(x) + B(x) u + G(x) d` with box
//! bounded inputs, and the extremal-input machinery used by the Hamiltonian.

mod models;

pub use models::{DoubleIntegrator, PlanarHover, ProductModel, Quad2DVert, VerticalHover, near_hover_10d, GRAVITY};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("model `{0}` is not control/disturbance affine")]
    NotAffine(String),
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn symmetric(half: f64) -> Self {
        Self { lo: -half, hi: half }
    }

    #[inline]
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    #[inline]
    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Writable view into [`AffineTerms`] at a block offset, so composite models
/// can let their parts fill the block they own.
pub struct AffineView<'a> {
    terms: &'a mut AffineTerms,
    row: usize,
    control_col: usize,
    disturbance_col: usize,
}

impl AffineView<'_> {
    #[inline]
    pub fn set_drift(&mut self, i: usize, v: f64) {
        self.terms.drift[self.row + i] = v;
    }

    #[inline]
    pub fn set_control_gain(&mut self, i: usize, j: usize, v: f64) {
        let n = self.terms.state_dim;
        self.terms.control_gain[(self.control_col + j) * n + self.row + i] = v;
    }

    #[inline]
    pub fn set_disturbance_gain(&mut self, i: usize, k: usize, v: f64) {
        let n = self.terms.state_dim;
        self.terms.disturbance_gain[(self.disturbance_col + k) * n + self.row + i] = v;
    }

    /// View shifted by a further block offset.
    pub fn block(&mut self, row: usize, control_col: usize, disturbance_col: usize) -> AffineView<'_> {
        AffineView {
            row: self.row + row,
            control_col: self.control_col + control_col,
            disturbance_col: self.disturbance_col + disturbance_col,
            terms: self.terms,
        }
    }
}

/// `a(x)`, `B(x)` and `G(x)` evaluated at one state. Gains are stored column
/// by column: entry `(i, j)` of `B` sits at `j * state_dim + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTerms {
    pub state_dim: usize,
    pub drift: Vec<f64>,
    pub control_gain: Vec<f64>,
    pub disturbance_gain: Vec<f64>,
}

impl AffineTerms {
    pub fn for_model<M: DynamicsModel + ?Sized>(model: &M) -> Self {
        let n = model.state_dim();
        Self {
            state_dim: n,
            drift: vec![0.0; n],
            control_gain: vec![0.0; n * model.control_dim()],
            disturbance_gain: vec![0.0; n * model.disturbance_dim()],
        }
    }

    /// Zeroes the terms and evaluates `model` at `x`.
    #[inline]
    pub fn evaluate<M: DynamicsModel + ?Sized>(&mut self, model: &M, x: &[f64]) -> Result<(), DynamicsError> {
        self.drift.fill(0.0);
        self.control_gain.fill(0.0);
        self.disturbance_gain.fill(0.0);
        let mut view = AffineView { terms: self, row: 0, control_col: 0, disturbance_col: 0 };
        model.affine_terms(x, &mut view)
    }

    #[inline]
    pub fn control_column(&self, j: usize) -> &[f64] {
        &self.control_gain[j * self.state_dim..(j + 1) * self.state_dim]
    }

    #[inline]
    pub fn disturbance_column(&self, k: usize) -> &[f64] {
        &self.disturbance_gain[k * self.state_dim..(k + 1) * self.state_dim]
    }

    /// `min_u max_d <p, f>` under the extremal-input rule.
    #[inline]
    pub fn hamiltonian(&self, p: &[f64], controls: &[Interval], disturbances: &[Interval]) -> f64 {
        let mut h = dot(p, &self.drift);
        for (j, b) in controls.iter().enumerate() {
            let s = dot(p, self.control_column(j));
            h += s * minimizing_control(s, b);
        }
        for (k, b) in disturbances.iter().enumerate() {
            let s = dot(p, self.disturbance_column(k));
            h += s * maximizing_disturbance(s, b);
        }
        h
    }

    /// `max |f_i|` over the input boxes, per state dimension.
    #[inline]
    pub fn flow_bounds_into(&self, controls: &[Interval], disturbances: &[Interval], out: &mut [f64]) {
        let n = self.state_dim;
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut center = self.drift[i];
            let mut spread = 0.0;
            for (j, b) in controls.iter().enumerate() {
                let g = self.control_gain[j * n + i];
                center += g * b.mid();
                spread += g.abs() * b.half_width();
            }
            for (k, b) in disturbances.iter().enumerate() {
                let g = self.disturbance_gain[k * n + i];
                center += g * b.mid();
                spread += g.abs() * b.half_width();
            }
            *o = center.abs() + spread;
        }
    }

    /// `max |<p, f>|` over the input boxes.
    pub fn directional_bound(&self, p: &[f64], controls: &[Interval], disturbances: &[Interval]) -> f64 {
        let mut center = dot(p, &self.drift);
        let mut spread = 0.0;
        for (j, b) in controls.iter().enumerate() {
            let s = dot(p, self.control_column(j));
            center += s * b.mid();
            spread += s.abs() * b.half_width();
        }
        for (k, b) in disturbances.iter().enumerate() {
            let s = dot(p, self.disturbance_column(k));
            center += s * b.mid();
            spread += s.abs() * b.half_width();
        }
        center.abs() + spread
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizer of `s * u` over `b`; ties go to the lower bound.
#[inline]
pub fn minimizing_control(s: f64, b: &Interval) -> f64 {
    if s < 0.0 {
        b.hi
    } else {
        b.lo
    }
}

/// Maximizer of `s * d` over `b`; ties go to the lower bound.
#[inline]
pub fn maximizing_disturbance(s: f64, b: &Interval) -> f64 {
    if s > 0.0 {
        b.hi
    } else {
        b.lo
    }
}

/// A dynamical system `x' = f(x, u, d)` with box input bounds.
///
/// Disturbance bounds are not part of the model: they are state dependent and
/// supplied by the caller.
pub trait DynamicsModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_bounds(&self) -> &[Interval];
    fn disturbance_dim(&self) -> usize;

    fn control_dim(&self) -> usize {
        self.control_bounds().len()
    }

    fn state_labels(&self) -> Vec<String> {
        (0..self.state_dim()).map(|i| format!("x{i}")).collect()
    }

    /// Writes `f(x, u, d)` into `out`; all slices have the model's dimensions.
    fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]);

    /// Fills the model's block of `out`. Entries the model does not touch are zero.
    fn affine_terms(&self, _x: &[f64], _out: &mut AffineView<'_>) -> Result<(), DynamicsError> {
        Err(DynamicsError::NotAffine(self.name().to_owned()))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch { what, expected, got })
    }
}

pub fn flow<M: DynamicsModel + ?Sized>(model: &M, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    check_len("state", model.state_dim(), x.len())?;
    check_len("control", model.control_dim(), u.len())?;
    check_len("disturbance", model.disturbance_dim(), d.len())?;
    let mut out = vec![0.0; model.state_dim()];
    model.flow_into(x, u, d, &mut out);
    Ok(out)
}

/// Optimal control (minimizer) and worst disturbance (maximizer) of `<p, f>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremalInputs {
    pub control: Vec<f64>,
    pub disturbance: Vec<f64>,
    /// `<p, B_j(x)>` per control channel; all zero means the costate carries
    /// no information about the control.
    pub control_switch: Vec<f64>,
}

fn affine_at<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &[f64],
    p: &[f64],
    dbounds: &[Interval],
) -> Result<AffineTerms, DynamicsError> {
    check_len("state", model.state_dim(), x.len())?;
    check_len("costate", model.state_dim(), p.len())?;
    check_len("disturbance bounds", model.disturbance_dim(), dbounds.len())?;
    let mut terms = AffineTerms::for_model(model);
    terms.evaluate(model, x)?;
    Ok(terms)
}

pub fn extremal_inputs<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &[f64],
    p: &[f64],
    dbounds: &[Interval],
) -> Result<ExtremalInputs, DynamicsError> {
    let terms = affine_at(model, x, p, dbounds)?;
    let mut control = Vec::with_capacity(model.control_dim());
    let mut control_switch = Vec::with_capacity(model.control_dim());
    for (j, b) in model.control_bounds().iter().enumerate() {
        let s = dot(p, terms.control_column(j));
        control_switch.push(s);
        control.push(minimizing_control(s, b));
    }
    let disturbance = dbounds
        .iter()
        .enumerate()
        .map(|(k, b)| maximizing_disturbance(dot(p, terms.disturbance_column(k)), b))
        .collect();
    Ok(ExtremalInputs { control, disturbance, control_switch })
}

pub fn hamiltonian<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &[f64],
    p: &[f64],
    dbounds: &[Interval],
) -> Result<f64, DynamicsError> {
    let terms = affine_at(model, x, p, dbounds)?;
    Ok(terms.hamiltonian(p, model.control_bounds(), dbounds))
}

pub fn flow_bounds<M: DynamicsModel + ?Sized>(model: &M, x: &[f64], dbounds: &[Interval]) -> Result<Vec<f64>, DynamicsError> {
    check_len("state", model.state_dim(), x.len())?;
    check_len("disturbance bounds", model.disturbance_dim(), dbounds.len())?;
    let mut terms = AffineTerms::for_model(model);
    terms.evaluate(model, x)?;
    let mut out = vec![0.0; model.state_dim()];
    terms.flow_bounds_into(model.control_bounds(), dbounds, &mut out);
    Ok(out)
}

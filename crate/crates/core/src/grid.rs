//! Uniform Cartesian grids and scalar fields sampled on their nodes.
//!
//! Values are stored row-major with the last dimension varying fastest.
//! Interpolation is multilinear and clamps out-of-range queries to the grid
//! boundary, reporting the clamp through [`Interpolated::out_of_domain`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("axis {axis}: need min < max, got [{min}, {max}]")]
    EmptyAxis { axis: usize, min: f64, max: f64 },
    #[error("axis {axis}: need at least 2 nodes, got {n}")]
    TooFewNodes { axis: usize, n: usize },
    #[error("grid must have at least one dimension")]
    NoDimensions,
    #[error("index {index} out of range on axis {axis} (n = {n})")]
    IndexOutOfRange { axis: usize, index: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("value count {got} does not match node count {expected}")]
    ValueCount { expected: usize, got: usize },
    #[error("non-finite value at node {0}")]
    NonFiniteValue(usize),
    #[error("non-finite query coordinate on axis {0}")]
    NonFiniteQuery(usize),
    #[error("fields live on different grids")]
    GridMismatch,
}

/// One axis of a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Self { min, max, n }
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn coord(&self, k: usize) -> f64 {
        self.min + k as f64 * self.spacing()
    }

    fn validate(&self, axis: usize) -> Result<(), GridError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(GridError::EmptyAxis { axis, min: self.min, max: self.max });
        }
        if self.n < 2 {
            return Err(GridError::TooFewNodes { axis, n: self.n });
        }
        Ok(())
    }
}

/// N-dimensional uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    spacing: Vec<f64>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        if axes.is_empty() {
            return Err(GridError::NoDimensions);
        }
        for (i, a) in axes.iter().enumerate() {
            a.validate(i)?;
        }
        let mut strides = vec![1usize; axes.len()];
        for i in (0..axes.len() - 1).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].n;
        }
        let len = strides[0] * axes[0].n;
        let spacing = axes.iter().map(Axis::spacing).collect();
        Ok(Self { axes, strides, spacing, len })
    }

    /// Grid with the same extent and `n` nodes on every axis.
    pub fn uniform(bounds: &[(f64, f64)], n: usize) -> Result<Self, GridError> {
        Self::new(bounds.iter().map(|&(lo, hi)| Axis::new(lo, hi, n)).collect())
    }

    /// Same extent, different resolution per axis.
    pub fn with_resolution(&self, n: &[usize]) -> Result<Self, GridError> {
        if n.len() != self.ndims() {
            return Err(GridError::DimensionMismatch { expected: self.ndims(), got: n.len() });
        }
        Self::new(self.axes.iter().zip(n).map(|(a, &n)| Axis::new(a.min, a.max, n)).collect())
    }

    #[inline]
    pub fn ndims(&self) -> usize {
        self.axes.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    #[inline]
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    #[inline]
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn node_coords(&self, index: &[usize]) -> Result<Vec<f64>, GridError> {
        self.check_index(index)?;
        Ok(index.iter().zip(&self.axes).map(|(&k, a)| a.coord(k)).collect())
    }

    pub fn ravel(&self, index: &[usize]) -> Result<usize, GridError> {
        self.check_index(index)?;
        Ok(index.iter().zip(&self.strides).map(|(k, s)| k * s).sum())
    }

    #[inline]
    pub fn unravel_into(&self, mut flat: usize, index: &mut [usize]) {
        for (i, s) in self.strides.iter().enumerate() {
            index[i] = flat / s;
            flat %= s;
        }
    }

    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.ndims()];
        self.unravel_into(flat, &mut idx);
        idx
    }

    #[inline]
    pub fn coords_into(&self, index: &[usize], out: &mut [f64]) {
        for ((o, &k), a) in out.iter_mut().zip(index).zip(&self.axes) {
            *o = a.coord(k);
        }
    }

    pub fn flat_coords(&self, flat: usize) -> Vec<f64> {
        let idx = self.unravel(flat);
        idx.iter().zip(&self.axes).map(|(&k, a)| a.coord(k)).collect()
    }

    /// Advance a multi-index in row-major order. Returns false after the last node.
    #[inline]
    pub fn advance(&self, index: &mut [usize]) -> bool {
        for i in (0..index.len()).rev() {
            index[i] += 1;
            if index[i] < self.axes[i].n {
                return true;
            }
            index[i] = 0;
        }
        false
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.ndims() && x.iter().zip(&self.axes).all(|(&v, a)| v >= a.min && v <= a.max)
    }

    pub fn same_extent(&self, other: &Grid) -> bool {
        self.ndims() == other.ndims()
            && self.axes.iter().zip(&other.axes).all(|(a, b)| a.min == b.min && a.max == b.max)
    }

    /// `other` lies within this grid's extent.
    pub fn covers(&self, other: &Grid) -> bool {
        self.ndims() == other.ndims()
            && self.axes.iter().zip(&other.axes).all(|(a, b)| a.min <= b.min && a.max >= b.max)
    }

    fn check_index(&self, index: &[usize]) -> Result<(), GridError> {
        if index.len() != self.ndims() {
            return Err(GridError::DimensionMismatch { expected: self.ndims(), got: index.len() });
        }
        for (axis, (&k, a)) in index.iter().zip(&self.axes).enumerate() {
            if k >= a.n {
                return Err(GridError::IndexOutOfRange { axis, index: k, n: a.n });
            }
        }
        Ok(())
    }

    /// Cell lookup for multilinear interpolation: lower corner index and
    /// fractional offset per axis, with the clamp flag.
    #[inline]
    fn locate(&self, x: &[f64], lower: &mut [usize], frac: &mut [f64]) -> bool {
        let mut clamped = false;
        for (i, a) in self.axes.iter().enumerate() {
            let mut xi = x[i];
            if xi < a.min {
                xi = a.min;
                clamped = true;
            } else if xi > a.max {
                xi = a.max;
                clamped = true;
            }
            let s = (xi - a.min) / self.spacing[i];
            let k = (s.floor() as usize).min(a.n - 2);
            lower[i] = k;
            frac[i] = (s - k as f64).clamp(0.0, 1.0);
        }
        clamped
    }
}

/// Result of a point query on a [`ScalarField`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub out_of_domain: bool,
}

/// Scalar value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ValueCount { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFiniteValue(i));
        }
        Ok(Self { grid, values })
    }

    /// Construction path for solver internals that already guarantee finiteness.
    pub(crate) fn from_parts(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let len = grid.len();
        Self { grid, values: vec![value; len] }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self, GridError> {
        let mut idx = vec![0; grid.ndims()];
        let mut x = vec![0.0; grid.ndims()];
        let mut values = Vec::with_capacity(grid.len());
        loop {
            grid.coords_into(&idx, &mut x);
            values.push(f(&x));
            if !grid.advance(&mut idx) {
                break;
            }
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, index: &[usize]) -> Result<f64, GridError> {
        Ok(self.values[self.grid.ravel(index)?])
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Number of nodes with value `<= level`.
    pub fn count_at_or_below(&self, level: f64) -> usize {
        self.values.iter().filter(|&&v| v <= level).count()
    }

    /// Multilinear interpolation; queries outside the grid are clamped and flagged.
    pub fn interp(&self, x: &[f64]) -> Result<Interpolated, GridError> {
        let d = self.grid.ndims();
        if x.len() != d {
            return Err(GridError::DimensionMismatch { expected: d, got: x.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFiniteQuery(i));
        }
        let mut lower = vec![0; d];
        let mut frac = vec![0.0; d];
        let out_of_domain = self.grid.locate(x, &mut lower, &mut frac);
        let value = self.blend(&lower, &frac, |flat| self.values[flat]);
        Ok(Interpolated { value, out_of_domain })
    }

    /// Weighted sum over the 2^d corners of the cell at `lower`.
    fn blend(&self, lower: &[usize], frac: &[f64], mut at: impl FnMut(usize) -> f64) -> f64 {
        let d = lower.len();
        let strides = self.grid.strides();
        let base: usize = lower.iter().zip(strides).map(|(k, s)| k * s).sum();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = base;
            for i in 0..d {
                if corner >> (d - 1 - i) & 1 == 1 {
                    w *= frac[i];
                    flat += strides[i];
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w != 0.0 {
                acc += w * at(flat);
            }
        }
        acc
    }

    /// One-sided differences `(D-, D+)` per axis at a node. A missing side on
    /// the grid boundary copies the available one.
    pub fn gradient(&self, index: &[usize]) -> Result<Vec<(f64, f64)>, GridError> {
        let flat = self.grid.ravel(index)?;
        Ok((0..self.grid.ndims())
            .map(|i| one_sided(&self.values, flat, index[i], self.grid.axes[i].n, self.grid.strides[i], self.grid.spacing[i]))
            .collect())
    }

    /// Central-difference gradient interpolated multilinearly at `x`.
    pub fn gradient_at(&self, x: &[f64]) -> Result<(Vec<f64>, bool), GridError> {
        let d = self.grid.ndims();
        if x.len() != d {
            return Err(GridError::DimensionMismatch { expected: d, got: x.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFiniteQuery(i));
        }
        let mut lower = vec![0; d];
        let mut frac = vec![0.0; d];
        let clamped = self.grid.locate(x, &mut lower, &mut frac);
        let mut idx = vec![0; d];
        let grad = (0..d)
            .map(|axis| {
                self.blend(&lower, &frac, |flat| {
                    self.grid.unravel_into(flat, &mut idx);
                    let (l, r) = one_sided(
                        &self.values,
                        flat,
                        idx[axis],
                        self.grid.axes[axis].n,
                        self.grid.strides[axis],
                        self.grid.spacing[axis],
                    );
                    0.5 * (l + r)
                })
            })
            .collect();
        Ok((grad, clamped))
    }

    /// Largest absolute difference between adjacent corners of the cell that
    /// contains `x`.
    pub fn cell_jump(&self, x: &[f64]) -> Result<f64, GridError> {
        let d = self.grid.ndims();
        if x.len() != d {
            return Err(GridError::DimensionMismatch { expected: d, got: x.len() });
        }
        let mut lower = vec![0; d];
        let mut frac = vec![0.0; d];
        self.grid.locate(x, &mut lower, &mut frac);
        let strides = self.grid.strides();
        let base: usize = lower.iter().zip(strides).map(|(k, s)| k * s).sum();
        let mut jump: f64 = 0.0;
        for corner in 0..(1usize << d) {
            let mut flat = base;
            for i in 0..d {
                if corner >> (d - 1 - i) & 1 == 1 {
                    flat += strides[i];
                }
            }
            for i in 0..d {
                if corner >> (d - 1 - i) & 1 == 0 {
                    jump = jump.max((self.values[flat + strides[i]] - self.values[flat]).abs());
                }
            }
        }
        Ok(jump)
    }

    /// Multilinear transfer onto `target`, which must lie within this field's extent.
    pub fn resample(&self, target: &Grid) -> Result<ScalarField, GridError> {
        if target.ndims() != self.grid.ndims() {
            return Err(GridError::DimensionMismatch { expected: self.grid.ndims(), got: target.ndims() });
        }
        if target == &self.grid {
            return Ok(self.clone());
        }
        let d = target.ndims();
        let mut lower = vec![0; d];
        let mut frac = vec![0.0; d];
        let mut idx = vec![0; d];
        let mut x = vec![0.0; d];
        let mut values = Vec::with_capacity(target.len());
        loop {
            target.coords_into(&idx, &mut x);
            self.grid.locate(&x, &mut lower, &mut frac);
            values.push(self.blend(&lower, &frac, |flat| self.values[flat]));
            if !target.advance(&mut idx) {
                break;
            }
        }
        Ok(ScalarField::from_parts(target.clone(), values))
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<ScalarField, GridError> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        ScalarField::new(self.grid.clone(), values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScalarField, GridError> {
        ScalarField::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }
}

#[inline]
pub(crate) fn one_sided(values: &[f64], flat: usize, k: usize, n: usize, stride: usize, dx: f64) -> (f64, f64) {
    let v = values[flat];
    let left = (k > 0).then(|| (v - values[flat - stride]) / dx);
    let right = (k + 1 < n).then(|| (values[flat + stride] - v) / dx);
    match (left, right) {
        (Some(l), Some(r)) => (l, r),
        (Some(l), None) => (l, l),
        (None, Some(r)) => (r, r),
        (None, None) => (0.0, 0.0),
    }
}

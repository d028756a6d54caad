//! Implicit sets `{x : phi(x) <= 0}` over a grid.

use thiserror::Error;

use crate::grid::{Grid, GridError, ScalarField};

#[derive(Debug, Error, PartialEq)]
pub enum LevelSetError {
    #[error("box bounds must satisfy lo < hi on every axis (axis {axis}: [{lo}, {hi}])")]
    InvalidBox { axis: usize, lo: f64, hi: f64 },
    #[error("box has {got} axes, grid has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Sublevel-set representation: members are the points where the field is `<= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitSet {
    field: ScalarField,
}

impl ImplicitSet {
    pub fn new(field: ScalarField) -> Self {
        Self { field }
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn into_field(self) -> ScalarField {
        self.field
    }

    pub fn contains_node(&self, flat: usize) -> bool {
        self.field.values()[flat] <= 0.0
    }

    /// Membership of an arbitrary point (interpolated). Points off the grid are not members.
    pub fn contains(&self, x: &[f64]) -> Result<bool, GridError> {
        let q = self.field.interp(x)?;
        Ok(!q.out_of_domain && q.value <= 0.0)
    }

    pub fn intersect(&self, other: &ImplicitSet) -> Result<ImplicitSet, GridError> {
        Ok(Self::new(self.field.zip_with(&other.field, f64::max)?))
    }

    pub fn union(&self, other: &ImplicitSet) -> Result<ImplicitSet, GridError> {
        Ok(Self::new(self.field.zip_with(&other.field, f64::min)?))
    }

    pub fn member_count(&self) -> usize {
        self.field.count_at_or_below(0.0)
    }
}

/// Axis-aligned box `lo <= x <= hi`. Infinite bounds leave an axis unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, LevelSetError> {
        if lo.len() != hi.len() {
            return Err(LevelSetError::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        for (axis, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || h.is_nan() || l >= h {
                return Err(LevelSetError::InvalidBox { axis, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((&v, &l), &h)| v >= l && v <= h)
    }

    /// Exact signed distance: negative inside (distance to the nearest face),
    /// positive outside (Euclidean distance to the box).
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        let mut outside_sq = 0.0;
        let mut inside = f64::INFINITY;
        for ((&v, &l), &h) in x.iter().zip(&self.lo).zip(&self.hi) {
            let excess = (l - v).max(v - h).max(0.0);
            outside_sq += excess * excess;
            inside = inside.min(v - l).min(h - v);
        }
        if outside_sq > 0.0 {
            outside_sq.sqrt()
        } else if inside.is_finite() {
            -inside
        } else {
            // every axis unbounded
            f64::NEG_INFINITY
        }
    }

    /// Largest violation `max(lo - x, x - hi)` over axes, `<= 0` inside.
    pub fn violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .map(|((&v, &l), &h)| (l - v).max(v - h))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn signed_distance_box(grid: &Grid, lo: &[f64], hi: &[f64]) -> Result<ScalarField, LevelSetError> {
    let b = BoxSet::new(lo.to_vec(), hi.to_vec())?;
    if b.dims() != grid.ndims() {
        return Err(LevelSetError::DimensionMismatch { expected: grid.ndims(), got: b.dims() });
    }
    if b.lo.iter().chain(&b.hi).all(|v| v.is_infinite()) {
        return Err(LevelSetError::InvalidBox { axis: 0, lo: b.lo[0], hi: b.hi[0] });
    }
    Ok(ScalarField::from_fn(grid.clone(), |x| b.signed_distance(x))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn signed_distance_examples() {
        let b = BoxSet::new(vec![0.35], vec![2.8]).unwrap();
        assert_relative_eq!(b.signed_distance(&[1.5]), -1.15, epsilon = 1e-12);
        assert_eq!(b.signed_distance(&[0.35]), 0.0);
        let b = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_relative_eq!(b.signed_distance(&[2.0, 2.0]), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn unbounded_axis_is_ignored() {
        let b = BoxSet::new(vec![0.0, f64::NEG_INFINITY], vec![1.0, f64::INFINITY]).unwrap();
        assert_relative_eq!(b.signed_distance(&[0.25, 1e6]), -0.25);
        assert_relative_eq!(b.signed_distance(&[1.5, -3.0]), 0.5);
    }

    #[test]
    fn degenerate_box_rejected() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 3)]).unwrap();
        assert!(matches!(signed_distance_box(&g, &[0.5], &[0.5]), Err(LevelSetError::InvalidBox { .. })));
        assert!(matches!(signed_distance_box(&g, &[0.0, 0.0], &[1.0, 1.0]), Err(LevelSetError::DimensionMismatch { .. })));
    }

    #[test]
    fn sign_classifies_random_points() {
        let b = BoxSet::new(vec![-0.5, 0.2, -1.0], vec![0.7, 1.1, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let inside = b.contains(&x);
            assert_eq!(b.signed_distance(&x) <= 0.0, inside, "{x:?}");
        }
    }

    #[test]
    fn band_intersection_and_union() {
        let g = Grid::new(vec![Axis::new(-1.0, 4.0, 51)]).unwrap();
        let a = ImplicitSet::new(signed_distance_box(&g, &[0.0], &[2.0]).unwrap());
        let b = ImplicitSet::new(signed_distance_box(&g, &[1.0], &[3.0]).unwrap());
        assert_eq!(a.intersect(&a).unwrap(), a);
        let both = a.intersect(&b).unwrap();
        // zero crossings at 1 and 2
        assert_relative_eq!(both.field().interp(&[1.0]).unwrap().value, 0.0, epsilon = 1e-12);
        assert_relative_eq!(both.field().interp(&[2.0]).unwrap().value, 0.0, epsilon = 1e-12);
        assert!(both.contains(&[1.5]).unwrap());
        assert!(!both.contains(&[0.5]).unwrap());
        assert!(!both.contains(&[2.5]).unwrap());

        let far = ImplicitSet::new(signed_distance_box(&g, &[3.5], &[3.9]).unwrap());
        let either = a.union(&far).unwrap();
        for flat in 0..g.len() {
            assert_eq!(either.contains_node(flat), a.contains_node(flat) || far.contains_node(flat));
        }
    }

    #[test]
    fn de_morgan_on_membership() {
        let g = Grid::uniform(&[(-2.0, 2.0), (-2.0, 2.0)], 21).unwrap();
        let a = ImplicitSet::new(signed_distance_box(&g, &[-1.0, -1.5], &[1.0, 0.5]).unwrap());
        let b = ImplicitSet::new(signed_distance_box(&g, &[0.0, -0.5], &[1.8, 1.9]).unwrap());
        let i = a.intersect(&b).unwrap();
        let u = a.union(&b).unwrap();
        for flat in 0..g.len() {
            let (ma, mb) = (a.contains_node(flat), b.contains_node(flat));
            // not(A and B) == not A or not B; not(A or B) == not A and not B
            assert_eq!(!i.contains_node(flat), !ma || !mb);
            assert_eq!(!u.contains_node(flat), !ma && !mb);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let g1 = Grid::new(vec![Axis::new(0.0, 1.0, 3)]).unwrap();
        let g2 = Grid::new(vec![Axis::new(0.0, 1.0, 4)]).unwrap();
        let a = ImplicitSet::new(ScalarField::constant(g1, 1.0));
        let b = ImplicitSet::new(ScalarField::constant(g2, 1.0));
        assert_eq!(a.intersect(&b), Err(GridError::GridMismatch));
    }
}
